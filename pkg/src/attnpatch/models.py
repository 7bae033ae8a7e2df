"""Benchmark networks: a two-hidden-layer MLP and its patched variants.

Every variant shares the backbone::

    x -> [linear -> ReLU -> dropout -> LN] -> patch? -> [linear -> ReLU -> dropout -> LN] -> linear

``baseline`` has no patch. The others concatenate a 64-wide patch output to
the first hidden activation, so the second hidden layer reads 128 inputs:

* ``tap`` / ``tap_no_batch`` / ``control_group``: attention patch over a
  reference batch (real, full real bank, or moment-matched noise).
* ``ffn``: a linear 64 -> 64 map of the first hidden activation plus LN.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .kernels import ContractError
from .tap import TapParams, default_norm_const, tap_forward, uniform_init

VARIANTS = ("baseline", "ffn", "control_group", "tap", "tap_no_batch")
PATCH_VARIANTS = ("control_group", "tap", "tap_no_batch")
CHECKPOINT_VERSION = 1


@dataclass
class ModelSpec:
    variant: str
    input_dim: int
    num_classes: int
    ref_dim: int = 0
    hidden_dim: int = 64
    dropout_rate: float = 0.5
    tap_hidden: int = 64
    tap_out: int = 64
    ref_batch: int = 250
    n_reference: int = 1000
    norm_const: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("input_dim", "num_classes", "hidden_dim", "tap_hidden", "tap_out"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.uses_refs and self.ref_dim < 1:
            raise ContractError(f"variant {self.variant!r} needs ref_dim >= 1")

    @property
    def uses_refs(self):
        return self.variant in PATCH_VARIANTS

    @property
    def effective_ref_batch(self):
        if self.variant == "tap_no_batch":
            return self.n_reference
        return min(self.ref_batch, self.n_reference)


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict
    rng: np.random.Generator
    epoch: int = 0
    optimizer: dict = field(default_factory=dict)
    tap: TapParams | None = None

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))


def _linear(params, name, rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    params[f"{name}.weight"] = T.parameter(uniform_init(rng, fan_out, fan_in))
    params[f"{name}.bias"] = T.parameter(rng.uniform(-bound, bound, size=fan_out))


def _norm(params, name, width):
    params[f"{name}.gain"] = T.parameter(np.ones(width))
    params[f"{name}.bias"] = T.parameter(np.zeros(width))


def build(spec, seed):
    """Initialise a model deterministically from ``seed``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_rng, drop_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    h = spec.hidden_dim
    params = {}
    _linear(params, "hidden1", init_rng, spec.input_dim, h)
    _norm(params, "norm1", h)
    tap = None
    width2 = h
    if spec.variant == "ffn":
        _linear(params, "ffn", init_rng, h, spec.tap_out)
        _norm(params, "ffn_norm", spec.tap_out)
        width2 = h + spec.tap_out
    elif spec.uses_refs:
        norm_const = spec.norm_const or default_norm_const(spec.tap_hidden, spec.effective_ref_batch)
        tap = TapParams.init(h, spec.ref_dim, spec.tap_hidden, spec.tap_out, norm_const, init_rng)
        params["tap.Wq"], params["tap.Wk"], params["tap.Wv"] = tap.Wq, tap.Wk, tap.Wv
        params["tap_norm.gain"], params["tap_norm.bias"] = tap.ln_gain, tap.ln_bias
        width2 = h + spec.tap_out
    _linear(params, "hidden2", init_rng, width2, h)
    _norm(params, "norm2", h)
    _linear(params, "head", init_rng, h, spec.num_classes)
    return ModelState(spec=spec, params=params, rng=drop_rng, tap=tap)


def _dense(x, params, name):
    return T.add(T.matmul(x, params[f"{name}.weight"].T), params[f"{name}.bias"])


def _hidden_block(x, model, linear, norm, training):
    p = model.params
    out = T.relu(_dense(x, p, linear))
    out = T.dropout(out, model.spec.dropout_rate, training, model.rng)
    return T.layer_norm(out, p[f"{norm}.gain"], p[f"{norm}.bias"])


def forward(model, x, refs=None, training=False):
    """Logits for a batch of primary inputs.

    ``refs`` is one reference batch (a frozen tensor or array) and must be
    given exactly for the patched variants.
    """
    return forward_from_hidden(model, first_hidden(model, x, training), refs, training)


def first_hidden(model, x, training=False):
    """Activation of the first hidden block, where the patch attaches."""
    spec = model.spec
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ContractError(f"expected inputs of width {spec.input_dim}, got shape {x.shape}")
    return _hidden_block(x, model, "hidden1", "norm1", training)


def forward_from_hidden(model, h1, refs=None, training=False):
    """Patch (if any), second hidden block and classifier head."""
    spec, p = model.spec, model.params
    if spec.uses_refs and refs is None:
        raise ContractError(f"variant {spec.variant!r} requires reference data")
    if not spec.uses_refs and refs is not None:
        raise ContractError(f"variant {spec.variant!r} does not accept reference data")
    if spec.variant == "ffn":
        patch = _dense(h1, p, "ffn")
        patch = T.layer_norm(patch, p["ffn_norm.gain"], p["ffn_norm.bias"])
        h1 = T.concat([h1, patch], axis=1)
    elif spec.uses_refs:
        patch = tap_forward(model.tap, h1, T.as_tensor(refs))
        h1 = T.concat([h1, patch], axis=1)
    h2 = _hidden_block(h1, model, "hidden2", "norm2", training)
    return _dense(h2, p, "head")


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------
def save_checkpoint(model, path):
    """Write an ``.npz`` archive: parameters, optimiser moments, and a JSON header.

    Header keys: ``format`` ("attnpatch-checkpoint"), ``version``, ``spec``,
    ``epoch``, ``param_names``, ``rng_state``, ``adam_t``.
    Arrays: ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>``.
    """
    names = list(model.params)
    header = {
        "format": "attnpatch-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": asdict(model.spec),
        "epoch": model.epoch,
        "param_names": names,
        "rng_state": model.rng.bit_generator.state,
        "adam_t": model.optimizer.get("t", 0),
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for i, name in enumerate(names):
        arrays[f"param/{name}"] = model.params[name].data
        if model.optimizer.get("m"):
            arrays[f"adam_m/{name}"] = model.optimizer["m"][i]
            arrays[f"adam_v/{name}"] = model.optimizer["v"][i]
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    with np.load(path) as archive:
        header = json.loads(archive["header"].tobytes().decode())
        if header.get("format") != "attnpatch-checkpoint":
            raise ContractError(f"{path} is not an attnpatch checkpoint")
        if header["version"] > CHECKPOINT_VERSION:
            raise ContractError(f"checkpoint version {header['version']} is newer than supported")
        model = build(ModelSpec(**header["spec"]), 0)
        for name in header["param_names"]:
            model.params[name].data[...] = archive[f"param/{name}"]
        model.epoch = header["epoch"]
        model.rng.bit_generator.state = header["rng_state"]
        if f"adam_m/{header['param_names'][0]}" in archive:
            model.optimizer = {
                "t": header["adam_t"],
                "m": [archive[f"adam_m/{n}"].copy() for n in header["param_names"]],
                "v": [archive[f"adam_v/{n}"].copy() for n in header["param_names"]],
            }
    return model
