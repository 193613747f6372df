"""Permutation-conditioned affine autoregressive flow.

One set of masked-MLP weights serves every ordering: the ordering enters only
through the masks. Hidden neurons come in blocks, one block of
``multiplier`` neurons per variable, and a weight from a neuron labelled ``a``
to one labelled ``b`` is kept when ``pos(a) <= pos(b)`` (hidden layers) or
``pos(a) < pos(b)`` (final layer). Weights are stored ``(in, out)``.

The layer code is written once against the primitive vocabulary shared by
:class:`~oslow.autodiff.Tape` and :data:`~oslow.autodiff.numpy_ops`, so the
same function gives plain values or a differentiable graph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Tape, numpy_ops
from .exceptions import ShapeError
from .permutation import from_ordering, is_permutation_matrix, positions, to_ordering

BASE_FAMILIES = ("standard-normal", "standard-laplace")
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG_2 = math.log(2.0)


@dataclass(frozen=True)
class FlowConfig:
    d: int
    hidden_multipliers: tuple[int, ...] = (10, 10)
    num_transforms: int = 1
    base_distribution: str = "standard-normal"
    clamp_a: float = 5.0
    clamp_b: float = 2.5

    def __post_init__(self):
        object.__setattr__(self, "hidden_multipliers", tuple(int(m) for m in self.hidden_multipliers))
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.num_transforms < 1:
            raise ValueError("num_transforms must be >= 1")
        if any(m < 1 for m in self.hidden_multipliers):
            raise ValueError("hidden multipliers must be positive")
        if self.clamp_a <= 0 or self.clamp_b <= 0:
            raise ValueError("clamp parameters must be positive")
        if self.base_distribution not in BASE_FAMILIES:
            raise ValueError(f"unknown base distribution {self.base_distribution!r}")

    @property
    def layer_labels(self) -> list[np.ndarray]:
        """Variable label of every neuron, input layer first."""
        labels = [np.arange(self.d)]
        labels += [np.repeat(np.arange(self.d), m) for m in self.hidden_multipliers]
        return labels

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "hidden_multipliers": list(self.hidden_multipliers),
            "num_transforms": self.num_transforms,
            "base_distribution": self.base_distribution,
            "clamp_a": self.clamp_a,
            "clamp_b": self.clamp_b,
        }


@dataclass
class FlowModel:
    config: FlowConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: FlowConfig, rng: np.random.Generator, final_scale: float = 0.1) -> "FlowModel":
        params = {}
        sizes = [len(lab) for lab in config.layer_labels]
        for k in range(config.num_transforms):
            for layer, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                bound = 1.0 / math.sqrt(n_in)
                params[f"{k}.W{layer}"] = rng.uniform(-bound, bound, (n_in, n_out))
                params[f"{k}.b{layer}"] = rng.uniform(-bound, bound, (n_out,))
            bound = final_scale / math.sqrt(sizes[-1])
            for head in ("t", "s"):
                params[f"{k}.W{head}"] = rng.uniform(-bound, bound, (sizes[-1], config.d))
                params[f"{k}.b{head}"] = np.zeros(config.d)
        return cls(config, params)

    def copy(self) -> "FlowModel":
        return FlowModel(self.config, {k: v.copy() for k, v in self.params.items()})


@dataclass
class MaskSet:
    """Per-ordering masks. ``variable_*`` are the d x d variable-level masks."""

    variable_hidden: np.ndarray
    variable_final: np.ndarray
    hidden: list[np.ndarray]
    final: np.ndarray


def _variable_masks(p):
    """``P^T U P`` and ``P^T (U - I) P`` with ``U`` upper triangular ones.

    Works on arrays and on tape nodes (soft permutation matrices).
    """
    if isinstance(p, Node):
        tape = p.tape
        d = p.shape[0]
        upper = np.triu(np.ones((d, d)))
        pt = tape.transpose(p)
        return pt @ tape.const(upper) @ p, pt @ tape.const(upper - np.eye(d)) @ p
    d = p.shape[0]
    upper = np.triu(np.ones((d, d)))
    return p.T @ upper @ p, p.T @ (upper - np.eye(d)) @ p


def _indicator(labels: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros((len(labels), d))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def build_masks(config: FlowConfig, p) -> MaskSet:
    """Block masks for permutation matrix ``p`` (array or soft tape node)."""
    d = config.d
    if p.shape != (d, d):
        raise ShapeError(f"permutation of shape {p.shape} for d={d}")
    labels = config.layer_labels
    var_hidden, var_final = _variable_masks(p)
    if isinstance(p, Node):
        tape = p.tape

        def expand(base, lab_in, lab_out):
            return tape.const(_indicator(lab_in, d)) @ base @ tape.const(_indicator(lab_out, d).T)
    else:
        if not is_permutation_matrix(p):
            raise ShapeError("build_masks expects a 0/1 permutation matrix or a tape node")
        # exact 0/1 values, no float round-off from the products above
        pos = positions(to_ordering(p))
        var_hidden = (pos[:, None] <= pos[None, :]).astype(np.float64)
        var_final = (pos[:, None] < pos[None, :]).astype(np.float64)

        def expand(base, lab_in, lab_out):
            return base[np.ix_(lab_in, lab_out)]

    hidden = [expand(var_hidden, a, b) for a, b in zip(labels[:-1], labels[1:])]
    final = expand(var_final, labels[-1], np.arange(d))
    return MaskSet(var_hidden, var_final, hidden, final)


def _masked(ops, w, mask):
    if isinstance(mask, Node):
        return ops.multiply(w, mask)
    return ops.mask_multiply(w, mask)


def _heads(ops, params, masks: MaskSet, z, k: int, n_hidden: int):
    h = z
    for layer in range(n_hidden):
        h = ops.tanh(ops.add(ops.matmul(h, _masked(ops, params[f"{k}.W{layer}"], masks.hidden[layer])),
                             params[f"{k}.b{layer}"]))
    t = ops.add(ops.matmul(h, _masked(ops, params[f"{k}.Wt"], masks.final)), params[f"{k}.bt"])
    s_raw = ops.add(ops.matmul(h, _masked(ops, params[f"{k}.Ws"], masks.final)), params[f"{k}.bs"])
    return t, s_raw


def _log_scale(ops, s_raw, a: float, b: float):
    return ops.multiply(ops.tanh(ops.multiply(s_raw, 1.0 / a)), b)


def _base_log_density(ops, u, family: str):
    if family == "standard-normal":
        return ops.add(ops.multiply(ops.multiply(u, u), -0.5), -_HALF_LOG_2PI)
    if family == "standard-laplace":
        return ops.add(ops.multiply(ops.abs(u), -1.0), -_LOG_2)
    raise ValueError(f"unknown base distribution {family!r}")


def loglik_graph(ops, params, masks: MaskSet, x, config: FlowConfig):
    """Average log-likelihood of ``x`` (N x d); returns ``(loglik, u)``."""
    n = Tape.value_of(x).shape[0]
    n_hidden = len(config.hidden_multipliers)
    z = x
    log_det = None
    for k in range(config.num_transforms):
        t, s_raw = _heads(ops, params, masks, z, k, n_hidden)
        log_s = _log_scale(ops, s_raw, config.clamp_a, config.clamp_b)
        z = ops.multiply(ops.add(z, ops.multiply(t, -1.0)), ops.exp(ops.multiply(log_s, -1.0)))
        term = ops.sum(log_s)
        log_det = term if log_det is None else ops.add(log_det, term)
    total = ops.add(ops.sum(_base_log_density(ops, z, config.base_distribution)), ops.multiply(log_det, -1.0))
    return ops.multiply(total, 1.0 / n), z


def tape_params(tape: Tape, model: FlowModel) -> dict[str, Node]:
    return {name: tape.input(name, value) for name, value in model.params.items()}


# --------------------------------------------------------------- plain numpy API
def clamp_scale(s_raw, a: float, b: float) -> np.ndarray:
    """Positive scale ``exp(tanh(s_raw / a) * b)``, inside ``[e^-b, e^b]``."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    return np.exp(np.tanh(np.asarray(s_raw, dtype=np.float64) / a) * b)


def base_log_density(u, family: str) -> np.ndarray:
    if family not in BASE_FAMILIES:
        raise ValueError(f"unknown base distribution {family!r}")
    return _base_log_density(numpy_ops, np.asarray(u, dtype=np.float64), family)


def heads(model: FlowModel, masks: MaskSet, x, transform: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Location and pre-scale outputs ``(t, s_raw)`` of one stacked transform."""
    x = _check_data(x, model.config.d)
    return _heads(numpy_ops, model.params, masks, x, transform, len(model.config.hidden_multipliers))


def inverse_and_loglik(model: FlowModel, p: np.ndarray, x) -> tuple[np.ndarray, float]:
    """Map data to base noise and return the average log-likelihood (higher is better)."""
    x = _check_data(x, model.config.d)
    masks = build_masks(model.config, p)
    ll, u = loglik_graph(numpy_ops, model.params, masks, x, model.config)
    return u, float(ll)


def per_sample_loglik(model: FlowModel, p: np.ndarray, x) -> np.ndarray:
    x = _check_data(x, model.config.d)
    cfg = model.config
    masks = build_masks(cfg, p)
    z = x
    log_det = np.zeros(x.shape[0])
    for k in range(cfg.num_transforms):
        t, s_raw = heads(model, masks, z, k)
        log_s = np.tanh(s_raw / cfg.clamp_a) * cfg.clamp_b
        z = (z - t) * np.exp(-log_s)
        log_det += log_s.sum(axis=1)
    return base_log_density(z, cfg.base_distribution).sum(axis=1) - log_det


def forward_sample(model: FlowModel, p: np.ndarray, u) -> np.ndarray:
    """Push base noise through the flow, generating variables along the ordering."""
    cfg = model.config
    u = _check_data(u, cfg.d)
    masks = build_masks(cfg, p)
    order = to_ordering(p)
    z = u
    for k in reversed(range(cfg.num_transforms)):
        x = np.zeros_like(z)
        for var in order:
            t, s_raw = heads(model, masks, x, k)
            x[:, var] = t[:, var] + clamp_scale(s_raw[:, var], cfg.clamp_a, cfg.clamp_b) * z[:, var]
        z = x
    return z


def sample(model: FlowModel, p: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    return forward_sample(model, p, sample_base(model.config, n, rng))


def sample_base(config: FlowConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    if config.base_distribution == "standard-normal":
        return rng.standard_normal((n, config.d))
    return rng.laplace(0.0, 1.0, (n, config.d))


def _check_data(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"expected an (N, {d}) array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x
