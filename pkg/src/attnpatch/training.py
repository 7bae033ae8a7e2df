"""Training loop, ensemble evaluation, Monte-Carlo repetition and batch-size sweep."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import apply_split, make_split
from .models import VARIANTS, ModelSpec, build, first_hidden, forward, forward_from_hidden
from .optim import Adam
from .tap import ReferenceBank, make_noise_bank

log = logging.getLogger(__name__)

METRIC_MODES = ("best5", "literal_lowest5")


class NumericAbort(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    data_batch: int = 100
    ref_batch: int = 250
    epochs_base: int = 1000
    mc_runs: int = 20
    seed: int = 0
    n_labeled: int = 200
    n_reference: int = 1000
    hidden_dim: int = 64
    dropout_rate: float = 0.5
    eval_every: int = 1
    eval_chunk: int = 2000
    metric_mode: str = "best5"
    stratify: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.metric_mode not in METRIC_MODES:
            raise ValueError(f"metric_mode must be one of {METRIC_MODES}")

    def num_ref_batches(self, variant):
        if variant == "tap_no_batch":
            return 1
        return math.ceil(self.n_reference / min(self.ref_batch, self.n_reference))

    def epochs_for(self, variant):
        """Epoch budget; batched patch variants get ``epochs_base / m``."""
        if variant in ("tap", "control_group"):
            return max(1, round(self.epochs_base / self.num_ref_batches(variant)))
        return self.epochs_base


@dataclass
class RunResult:
    dataset: str
    variant: str
    seed: list
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    eval_epochs: list = field(default_factory=list)
    final_metric: float | None = None
    metric_mode: str = "best5"
    epochs: int = 0
    steps: int = 0
    ref_batch: int | None = None
    m: int = 1
    wall_time: float = 0.0
    status: str = "ok"
    error: str | None = None
    bank_hash: str | None = None

    def to_dict(self):
        return asdict(self)


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------
def final_metric(history, mode="best5", window=5):
    """Score a validation-accuracy history by its 5-wide moving average.

    ``best5`` returns the highest window mean; ``literal_lowest5`` the
    lowest one.
    """
    h = np.asarray(history, dtype=float)
    if h.size < window:
        raise ValueError(f"history has {h.size} entries, need at least {window}")
    means = np.convolve(h, np.ones(window) / window, mode="valid")
    if mode == "best5":
        return float(means.max())
    if mode == "literal_lowest5":
        return float(means.min())
    raise ValueError(f"unknown metric mode {mode!r}")


def majority_vote(votes, num_classes=None):
    """Plurality class per column of ``votes`` (shape ``(m, n)``); ties go to the lowest class."""
    votes = np.atleast_2d(np.asarray(votes, dtype=np.int64))
    k = int(votes.max()) + 1 if num_classes is None else num_classes
    counts = np.zeros((k, votes.shape[1]), dtype=np.int64)
    for row in votes:
        np.add.at(counts, (row, np.arange(votes.shape[1])), 1)
    return counts.argmax(axis=0)


def predict(model, X, bank=None, chunk=2000):
    """Class predictions; patched models vote over every reference batch."""
    X = np.asarray(X)
    out = np.empty(X.shape[0], dtype=np.int64)
    with T.no_grad():
        for a in range(0, X.shape[0], chunk):
            xb = X[a : a + chunk]
            if model.spec.uses_refs:
                h1 = first_hidden(model, xb)
                votes = [
                    forward_from_hidden(model, h1, bank.batch(i)).data.argmax(axis=1)
                    for i in range(bank.m)
                ]
                out[a : a + chunk] = majority_vote(votes, model.spec.num_classes)
            else:
                out[a : a + chunk] = forward(model, xb, training=False).data.argmax(axis=1)
    return out


def evaluate(model, eval_data, bank=None, chunk=2000):
    """Accuracy on a labelled set (ensemble majority vote for patched variants)."""
    if len(eval_data) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(predict(model, eval_data.X, bank, chunk) == eval_data.y))


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------
def train(model, split, cfg, bank=None, rng=None, epochs=None, dataset=""):
    """Fit ``model`` on ``split.labeled`` with Adam and cross-entropy.

    Patched variants sweep the reference batches in a shuffled order each
    epoch; every reference batch is paired with every labelled minibatch,
    one optimiser step per pairing.
    """
    spec = model.spec
    if spec.uses_refs and bank is None:
        raise ValueError(f"variant {spec.variant!r} needs a reference bank")
    if not spec.uses_refs and bank is not None:
        raise ValueError(f"variant {spec.variant!r} does not take a reference bank")
    rng = np.random.default_rng(rng)
    epochs = cfg.epochs_for(spec.variant) if epochs is None else epochs
    opt = Adam(model.parameters(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    if model.optimizer:
        opt.load_state_dict(model.optimizer)

    X, y = split.labeled.X, split.labeled.y
    n = X.shape[0]
    m = bank.m if bank is not None else 1
    result = RunResult(
        dataset=dataset,
        variant=spec.variant,
        seed=[],
        metric_mode=cfg.metric_mode,
        epochs=epochs,
        ref_batch=bank.batch_size if bank is not None else None,
        m=m,
    )
    start = time.perf_counter()
    for epoch in range(epochs):
        ref_order = rng.permutation(m) if bank is not None else [None]
        losses = []
        for ref_id in ref_order:
            refs = bank.batch(ref_id) if ref_id is not None else None
            perm = rng.permutation(n)
            for a in range(0, n, cfg.data_batch):
                idx = perm[a : a + cfg.data_batch]
                opt.zero_grad()
                loss = T.cross_entropy(forward(model, X[idx], refs, training=True), y[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericAbort(
                        f"non-finite loss {value} (lr={cfg.lr}, epoch={epoch}, "
                        f"ref_batch={ref_id}, rows={idx[:5].tolist()}...)"
                    )
                loss.backward()
                opt.step()
                losses.append(value)
                result.steps += 1
        model.epoch += 1
        result.train_loss.append(float(np.mean(losses)))
        if (epoch + 1) % cfg.eval_every == 0 or epoch == epochs - 1:
            result.val_accuracy.append(evaluate(model, split.eval, bank, cfg.eval_chunk))
            result.eval_epochs.append(epoch + 1)
    model.optimizer = opt.state_dict()
    result.wall_time = time.perf_counter() - start
    if len(result.val_accuracy) >= 5:
        result.final_metric = final_metric(result.val_accuracy, cfg.metric_mode)
    elif result.val_accuracy:
        result.final_metric = float(np.mean(result.val_accuracy))
    return result


def _bank_hash(bank):
    return hashlib.sha256(bank.Z.tobytes()).hexdigest()[:16]


def run_seeds(master_seed, run_index):
    """Independent seeds for split, model init, noise bank and training order."""
    ss = np.random.SeedSequence([int(master_seed), int(run_index)])
    return ss.spawn(4)


def run_variant(dataset, variant, cfg, run_index=0, ref_batch=None, epochs=None):
    """One complete run: split, build, train, score."""
    split_seed, model_seed, noise_seed, train_seed = run_seeds(cfg.seed, run_index)
    plan = make_split(
        dataset,
        np.random.default_rng(split_seed),
        cfg.n_labeled,
        cfg.n_reference,
        cfg.stratify,
    )
    split = apply_split(dataset, plan)
    ref_batch = cfg.ref_batch if ref_batch is None else ref_batch
    local = replace(cfg, ref_batch=ref_batch)
    spec = ModelSpec(
        variant=variant,
        input_dim=dataset.X_primary.shape[1],
        num_classes=dataset.class_count,
        ref_dim=dataset.Z_secondary.shape[1],
        hidden_dim=cfg.hidden_dim,
        dropout_rate=cfg.dropout_rate,
        ref_batch=ref_batch,
        n_reference=cfg.n_reference,
    )
    model = build(spec, model_seed)
    bank = None
    if spec.uses_refs:
        bank = ReferenceBank(split.reference.Z, spec.effective_ref_batch)
        if variant == "control_group":
            bank = make_noise_bank(bank, np.random.default_rng(noise_seed))
    result = train(
        model,
        split,
        local,
        bank=bank,
        rng=np.random.default_rng(train_seed),
        epochs=epochs,
        dataset=dataset.name,
    )
    result.seed = [int(cfg.seed), int(run_index)]
    if bank is not None:
        result.bank_hash = _bank_hash(bank)
    return result, model, bank


# fields that change the computation of a run (metric_mode is applied afterwards)
_RUN_FIELDS = (
    "lr", "adam_beta1", "adam_beta2", "adam_eps", "data_batch", "epochs_base", "seed",
    "n_labeled", "n_reference", "hidden_dim", "dropout_rate", "eval_every", "stratify",
)


def run_key(dataset, variant, cfg, run_index, ref_batch=None, epochs=None):
    """Identity of one run, stable across processes.

    A ``tap`` run whose batch covers the whole bank is the same computation
    as ``tap_no_batch`` and shares its key.
    """
    ref_batch = cfg.ref_batch if ref_batch is None else ref_batch
    if variant == "tap" and ref_batch >= cfg.n_reference:
        variant = "tap_no_batch"
    local = replace(cfg, ref_batch=ref_batch)
    if variant in ("baseline", "ffn"):
        ref_batch = None
    elif variant == "tap_no_batch":
        ref_batch = cfg.n_reference
    epochs = local.epochs_for(variant) if epochs is None else epochs
    payload = {
        "dataset": dataset.name,
        "rows": len(dataset),
        "source": dataset.source,
        "variant": variant,
        "ref_batch": ref_batch,
        "epochs": epochs,
        "run": int(run_index),
        "dtype": str(np.dtype(T.DTYPE)),
        **{f: getattr(cfg, f) for f in _RUN_FIELDS},
    }
    return json.dumps(payload, sort_keys=True)


class RunCache:
    """Append-only JSON-lines store of finished runs, keyed by :func:`run_key`."""

    def __init__(self, path):
        self.path = Path(path)
        self._runs = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._runs[rec["key"]] = rec["result"]

    def __len__(self):
        return len(self._runs)

    def get(self, key, variant, metric_mode):
        rec = self._runs.get(key)
        if rec is None:
            return None
        result = RunResult(**{**rec, "variant": variant, "metric_mode": metric_mode})
        if result.status == "ok" and len(result.val_accuracy) >= 5:
            result.final_metric = final_metric(result.val_accuracy, metric_mode)
        return result

    def put(self, key, result):
        self._runs[key] = result.to_dict()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps({"key": key, "result": result.to_dict()}) + "\n")


def _safe_run(args):
    dataset, variant, cfg, run_index, ref_batch, epochs = args
    try:
        result, _, _ = run_variant(dataset, variant, cfg, run_index, ref_batch, epochs)
    except NumericAbort as exc:
        log.warning("run %d of %s aborted: %s", run_index, variant, exc)
        result = RunResult(
            dataset=dataset.name,
            variant=variant,
            seed=[int(cfg.seed), int(run_index)],
            status="failed",
            error=str(exc),
            metric_mode=cfg.metric_mode,
        )
    return result


def _map(jobs, tasks, cache=None):
    """Run tasks (serially or on a process pool), reusing cached runs."""
    results = [None] * len(tasks)
    keys = [run_key(t[0], *t[1:]) for t in tasks]
    todo = []
    for i, (task, key) in enumerate(zip(tasks, keys)):
        hit = cache.get(key, task[1], task[2].metric_mode) if cache is not None else None
        if hit is not None:
            results[i] = hit
        else:
            todo.append(i)

    def store(i, result):
        results[i] = result
        if cache is not None and result.status == "ok":
            cache.put(keys[i], result)

    if jobs <= 1:
        for i in todo:
            store(i, _safe_run(tasks[i]))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for i, result in zip(todo, pool.map(_safe_run, [tasks[i] for i in todo])):
                store(i, result)
    return results


def summarize(results):
    """Mean and standard error of the final metric over successful runs."""
    ok = [r.final_metric for r in results if r.status == "ok" and r.final_metric is not None]
    failed = sum(1 for r in results if r.status != "ok")
    mean = float(np.mean(ok)) if ok else float("nan")
    stderr = float(np.std(ok, ddof=1) / math.sqrt(len(ok))) if len(ok) > 1 else float("nan")
    return {"mean": mean, "stderr": stderr, "runs": len(ok), "failed": failed}


def monte_carlo(dataset, variants=VARIANTS, cfg=None, progress=None, cache=None):
    """Repeat every variant over ``cfg.mc_runs`` reshuffled splits.

    Returns ``(rows, results)``: one summary row per variant, and all
    :class:`RunResult` objects keyed by variant.
    """
    cfg = cfg or TrainConfig()
    if cfg.mc_runs < 2:
        raise ValueError("monte_carlo needs mc_runs >= 2")
    rows, results = [], {}
    for variant in variants:
        tasks = [(dataset, variant, cfg, r, None, None) for r in range(cfg.mc_runs)]
        res = _map(cfg.jobs, tasks, cache)
        results[variant] = res
        row = {"variant": variant, **summarize(res)}
        rows.append(row)
        if progress:
            progress(row)
    return rows, results


def batch_size_sweep(dataset, sizes=(100, 200, 250, 500, 1000), cfg=None, progress=None, cache=None):
    """TAP accuracy against reference batch size, with the baseline as reference row.

    Each point uses ``m = ceil(n_reference / size)`` batches and an epoch
    budget of ``epochs_base / m``.
    """
    cfg = cfg or TrainConfig()
    points = []
    for size in sizes:
        if size > cfg.n_reference:
            warnings.warn(f"batch size {size} exceeds n_reference; clamped", stacklevel=2)
            size = cfg.n_reference
        m = math.ceil(cfg.n_reference / size)
        epochs = max(1, round(cfg.epochs_base / m))
        tasks = [(dataset, "tap", cfg, r, size, epochs) for r in range(cfg.mc_runs)]
        res = _map(cfg.jobs, tasks, cache)
        point = {
            "kind": "tap",
            "ref_batch": size,
            "ratio": size / cfg.n_labeled,
            "m": m,
            "epochs": epochs,
            **summarize(res),
        }
        points.append(point)
        if progress:
            progress(point)
    base = _map(cfg.jobs, [(dataset, "baseline", cfg, r, None, None) for r in range(cfg.mc_runs)], cache)
    baseline = {
        "kind": "baseline",
        "ref_batch": None,
        "ratio": None,
        "m": None,
        "epochs": cfg.epochs_base,
        **summarize(base),
    }
    if progress:
        progress(baseline)
    return points, baseline
