import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.estimator_checks import parametrize_with_checks

from attnpatch.estimators import GaussianKDE, NadarayaWatsonRegressor, TAPClassifier
from attnpatch.kernels import GAUSSIAN, Bandwidth, kde_many
from attnpatch.nw import PairedSample, nw_estimate_many


@parametrize_with_checks([NadarayaWatsonRegressor(bandwidth=0.5), GaussianKDE(bandwidth=0.5)])
def test_sklearn_compatible(estimator, check):
    check(estimator)


def blobs(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.choice(np.array(["a", "b", "c"]), size=n)
    idx = np.searchsorted(["a", "b", "c"], y)
    X = rng.normal(size=(n, 4)) + 4.0 * np.eye(3, 4)[idx]
    Z = rng.normal(size=(3 * n, 5)) + 3.0 * np.eye(3, 5)[rng.integers(0, 3, 3 * n)]
    return X, y, Z


FAST = dict(hidden_dim=8, tap_hidden=4, tap_out=8, ref_batch=30, epochs_base=60, lr=1e-2, data_batch=20)


class TestTAPClassifier:
    def test_fit_predict_string_labels(self):
        X, y, Z = blobs(60, 0)
        clf = TAPClassifier(random_state=0, **FAST).fit(X, y, Z=Z)
        assert set(clf.predict(X)) <= {"a", "b", "c"}
        Xt, yt, _ = blobs(200, 1)
        assert clf.score(Xt, yt) > 0.8
        proba = clf.predict_proba(Xt)
        assert proba.shape == (200, 3)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)
        assert clf.bank_.m == 6 and clf.history_.epochs == 10

    def test_reproducible(self):
        X, y, Z = blobs(40, 2)
        a = TAPClassifier(random_state=5, **FAST).fit(X, y, Z=Z)
        b = TAPClassifier(random_state=5, **FAST).fit(X, y, Z=Z)
        assert a.predict_proba(X).tobytes() == b.predict_proba(X).tobytes()

    def test_clone_and_params(self):
        clf = TAPClassifier(variant="ffn", lr=0.5)
        params = clone(clf).get_params()
        assert params["variant"] == "ffn" and params["lr"] == 0.5

    def test_reference_contract(self):
        X, y, Z = blobs(30, 3)
        with pytest.raises(ValueError, match="needs reference"):
            TAPClassifier(**FAST).fit(X, y)
        with pytest.raises(ValueError, match="does not use"):
            TAPClassifier(variant="baseline", **FAST).fit(X, y, Z=Z)

    def test_baseline_in_pipeline_with_validation(self):
        X, y, _ = blobs(60, 4)
        Xv, yv, _ = blobs(50, 5)
        pipe = make_pipeline(StandardScaler(), TAPClassifier(variant="baseline", random_state=1, **FAST))
        pipe.fit(X, y)
        clf = pipe[-1]
        assert len(clf.history_.val_accuracy) == 60
        clf.fit(StandardScaler().fit_transform(X), y, X_val=StandardScaler().fit_transform(Xv), y_val=yv)
        assert clf.history_.final_metric is not None

    def test_control_group_uses_noise(self):
        X, y, Z = blobs(30, 6)
        clf = TAPClassifier(variant="control_group", random_state=0, **{**FAST, "epochs_base": 6}).fit(X, y, Z=Z)
        assert clf.bank_.mode == "noise"
        assert not np.array_equal(clf.bank_.Z, Z)

    def test_unfitted_and_wrong_width(self):
        X, y, Z = blobs(30, 7)
        with pytest.raises(Exception, match="not fitted"):
            TAPClassifier().predict(X)
        clf = TAPClassifier(variant="baseline", **{**FAST, "epochs_base": 5}).fit(X, y)
        with pytest.raises(ValueError, match="features"):
            clf.predict(X[:, :3])


class TestKernelEstimators:
    def test_nw_matches_core(self, rng):
        X, y = rng.normal(size=(50, 2)), rng.normal(size=50)
        q = rng.normal(size=(7, 2))
        got = NadarayaWatsonRegressor(bandwidth=0.4).fit(X, y).predict(q)
        want = nw_estimate_many(GAUSSIAN, Bandwidth(0.4, 2), q, PairedSample(X, y[:, None]))[:, 0]
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_nw_default_bandwidth(self, rng):
        X = rng.normal(size=(1024, 1))
        model = NadarayaWatsonRegressor().fit(X, np.sin(X[:, 0]))
        assert model.bandwidth_.h == pytest.approx(1024 ** (-0.2))
        assert model.score(X, np.sin(X[:, 0])) > 0.95

    def test_nw_multi_output(self, rng):
        X, Y = rng.normal(size=(30, 1)), rng.normal(size=(30, 3))
        assert NadarayaWatsonRegressor(bandwidth=1.0).fit(X, Y).predict(X).shape == (30, 3)

    def test_kde_matches_core(self, rng):
        X = rng.normal(size=(200, 2))
        q = rng.normal(size=(9, 2))
        kde = GaussianKDE(bandwidth=0.6).fit(X)
        np.testing.assert_allclose(np.exp(kde.score_samples(q)), kde_many(GAUSSIAN, Bandwidth(0.6, 2), q, X), rtol=1e-10)

    def test_kde_far_query_finite(self, rng):
        kde = GaussianKDE(bandwidth=0.05).fit(rng.normal(size=(20, 1)))
        assert np.isfinite(kde.score_samples([[40.0]])[0])
