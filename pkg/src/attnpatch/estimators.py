"""scikit-learn compatible front ends.

``TAPClassifier`` wraps model building, training and ensemble prediction.
``NadarayaWatsonRegressor`` and ``GaussianKDE`` expose the kernel estimators
with determinant-scaled Gaussian kernels.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp, softmax
from sklearn.base import BaseEstimator, ClassifierMixin, DensityMixin, RegressorMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y, validate_data

from . import tensor as T
from .data import LabeledSet, ReferenceSet, SplitData
from .kernels import GAUSSIAN, Bandwidth, bandwidth_schedule, log_kernel_matrix
from .models import PATCH_VARIANTS, VARIANTS, ModelSpec, build, first_hidden, forward_from_hidden
from .nw import PairedSample, nw_estimate_many
from .tap import ReferenceBank, make_noise_bank
from .training import TrainConfig, predict, train


class TAPClassifier(ClassifierMixin, BaseEstimator):
    """Two-hidden-layer classifier with an optional attention patch.

    Parameters
    ----------
    variant : {"baseline", "ffn", "control_group", "tap", "tap_no_batch"}
        Network to train. The patched variants need reference data ``Z``
        passed to :meth:`fit`; it is stored and reused at prediction time.
    ref_batch : int
        Reference rows per batch. ``tap_no_batch`` always uses the whole bank.
    epochs : int or None
        Training epochs. ``None`` uses ``epochs_base``, divided by the number
        of reference batches for ``tap`` and ``control_group``.
    random_state : int or None
        Seed for initialisation, dropout, minibatch order and the noise bank.

    Attributes
    ----------
    classes_ : ndarray
    model_ : ModelState
    bank_ : ReferenceBank or None
    history_ : RunResult
        Per-epoch loss and accuracy on the validation data (the training
        data when none is given).
    """

    def __init__(
        self,
        variant="tap",
        hidden_dim=64,
        dropout_rate=0.5,
        ref_batch=250,
        epochs=None,
        epochs_base=1000,
        lr=1e-4,
        data_batch=100,
        tap_hidden=64,
        tap_out=64,
        norm_const=None,
        metric_mode="best5",
        random_state=None,
    ):
        self.variant = variant
        self.hidden_dim = hidden_dim
        self.dropout_rate = dropout_rate
        self.ref_batch = ref_batch
        self.epochs = epochs
        self.epochs_base = epochs_base
        self.lr = lr
        self.data_batch = data_batch
        self.tap_hidden = tap_hidden
        self.tap_out = tap_out
        self.norm_const = norm_const
        self.metric_mode = metric_mode
        self.random_state = random_state

    def _config(self, n_reference):
        return TrainConfig(
            lr=self.lr,
            data_batch=self.data_batch,
            ref_batch=self.ref_batch,
            epochs_base=self.epochs_base,
            n_reference=n_reference,
            hidden_dim=self.hidden_dim,
            dropout_rate=self.dropout_rate,
            metric_mode=self.metric_mode,
        )

    def fit(self, X, y, Z=None, X_val=None, y_val=None):
        """Train on labelled ``(X, y)`` with unpaired reference rows ``Z``."""
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        patched = self.variant in PATCH_VARIANTS
        if patched and Z is None:
            raise ValueError(f"variant {self.variant!r} needs reference data Z")
        if not patched and Z is not None:
            raise ValueError(f"variant {self.variant!r} does not use reference data")

        ss = np.random.SeedSequence(self.random_state)
        model_seed, noise_seed, train_seed = ss.spawn(3)
        n_ref = 1
        if patched:
            Z = check_array(Z, dtype=np.float64)
            n_ref = Z.shape[0]
        cfg = self._config(n_ref)
        spec = ModelSpec(
            variant=self.variant,
            input_dim=X.shape[1],
            num_classes=len(self.classes_),
            ref_dim=Z.shape[1] if patched else 0,
            hidden_dim=self.hidden_dim,
            dropout_rate=self.dropout_rate,
            tap_hidden=self.tap_hidden,
            tap_out=self.tap_out,
            ref_batch=self.ref_batch,
            n_reference=n_ref,
            norm_const=self.norm_const,
        )
        self.model_ = build(spec, model_seed)
        self.bank_ = None
        if patched:
            self.bank_ = ReferenceBank(Z, spec.effective_ref_batch)
            if self.variant == "control_group":
                self.bank_ = make_noise_bank(self.bank_, np.random.default_rng(noise_seed))

        if X_val is None:
            val = LabeledSet(X, y_enc)
        else:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64)
            val = LabeledSet(X_val, self._encode(y_val))
        split = SplitData(LabeledSet(X, y_enc), ReferenceSet(Z if patched else np.empty((0, 0))), val)
        self.history_ = train(
            self.model_,
            split,
            cfg,
            bank=self.bank_,
            rng=np.random.default_rng(train_seed),
            epochs=self.epochs,
        )
        return self

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise ValueError("y contains labels not seen during fit")
        return idx

    def _check_input(self, X):
        check_is_fitted(self, "model_")
        return validate_data(self, X, dtype=np.float64, reset=False)

    def predict(self, X):
        """Class labels; patched variants take a majority vote over reference batches."""
        X = self._check_input(X)
        return self.classes_[predict(self.model_, X, self.bank_)]

    def predict_proba(self, X):
        """Softmax probabilities, averaged over reference batches for patched variants.

        The argmax of these probabilities can differ from :meth:`predict`,
        which votes instead of averaging.
        """
        X = self._check_input(X)
        with T.no_grad():
            h1 = first_hidden(self.model_, X)
            if self.bank_ is None:
                return softmax(forward_from_hidden(self.model_, h1).data, axis=1)
            probs = [
                softmax(forward_from_hidden(self.model_, h1, self.bank_.batch(i)).data, axis=1)
                for i in range(self.bank_.m)
            ]
        return np.mean(probs, axis=0)


class NadarayaWatsonRegressor(RegressorMixin, BaseEstimator):
    """Gaussian-kernel Nadaraya-Watson regression.

    ``bandwidth=None`` uses ``h = c * n ** (-alpha)``.
    """

    def __init__(self, bandwidth=None, alpha=0.2, c=1.0):
        self.bandwidth = bandwidth
        self.alpha = alpha
        self.c = c

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        return tags

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64, multi_output=True, y_numeric=True)
        self._1d = y.ndim == 1
        self.sample_ = PairedSample(X, y.reshape(len(y), -1))
        if self.bandwidth is None:
            self.bandwidth_ = bandwidth_schedule(len(X), X.shape[1], "theorem_rate", self.alpha, self.c)
        else:
            self.bandwidth_ = Bandwidth(float(self.bandwidth), X.shape[1])
        return self

    def predict(self, X):
        check_is_fitted(self, "sample_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        out = nw_estimate_many(GAUSSIAN, self.bandwidth_, X, self.sample_)
        return out[:, 0] if self._1d else out


class GaussianKDE(DensityMixin, BaseEstimator):
    """Gaussian kernel density estimate with the same bandwidth conventions."""

    def __init__(self, bandwidth=None, alpha=0.2, c=1.0):
        self.bandwidth = bandwidth
        self.alpha = alpha
        self.c = c

    def fit(self, X, y=None):
        X = validate_data(self, X, dtype=np.float64)
        self.sample_ = X
        if self.bandwidth is None:
            self.bandwidth_ = bandwidth_schedule(len(X), X.shape[1], "theorem_rate", self.alpha, self.c)
        else:
            self.bandwidth_ = Bandwidth(float(self.bandwidth), X.shape[1])
        return self

    def score_samples(self, X):
        """Log density at each row of ``X``."""
        check_is_fitted(self, "sample_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        logk = log_kernel_matrix(self.bandwidth_, X, self.sample_)
        return logsumexp(logk, axis=1) - math.log(self.sample_.shape[0])

    def score(self, X, y=None):
        """Total log-likelihood of ``X``."""
        return float(np.sum(self.score_samples(X)))
