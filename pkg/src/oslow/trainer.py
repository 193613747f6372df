"""Ordering search: alternating flow / permutation-belief training.

The objective is the average log-likelihood (higher is better), ascended
with AdamW by feeding it negated gradients.
"""
from __future__ import annotations

import itertools
import math
import time
from collections import Counter, OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import AdamWState, Tape, adamw_step, numpy_ops
from .exceptions import ConfigError, NumericalError, ShapeError, TrainingDivergedError
from .flow import FlowConfig, FlowModel, MaskSet, build_masks, heads, inverse_and_loglik, loglik_graph, tape_params
from .permutation import (
    CandidateSet,
    NoiseSchedule,
    Ordering,
    boltzmann_weights,
    boltzmann_weights_node,
    dedupe,
    from_ordering,
    matching,
    sample_gumbel,
    sinkhorn,
    sinkhorn_node,
    squash,
    to_ordering,
)

METHODS = ("gumbel-top-k", "gumbel-sinkhorn-st", "soft-sinkhorn")
GAMMA = "gamma"
MAD_SCALE = 1.4826
OUTLIER_MADS = 8.0
LOOP_THRESHOLD = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    k: int = 16
    epochs: int = 200
    batch_size: int = 128
    lr_theta: float = 1e-3
    lr_gamma: float = 1e-2
    weight_decay: float = 1e-2
    sigma_init: float = 0.5
    phase_lengths: tuple[int, int] = (5, 1)
    method: str = "gumbel-top-k"
    tau: float = 0.1
    sinkhorn_iters: int = 50
    seed: int = 0
    flow: FlowConfig | None = None
    one_step: bool = False
    standardize: bool = True
    keep_gamma_trace: bool = False

    def __post_init__(self):
        object.__setattr__(self, "phase_lengths", tuple(int(n) for n in self.phase_lengths))
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr_theta <= 0 or self.lr_gamma <= 0:
            raise ConfigError("learning rates must be positive")
        if len(self.phase_lengths) != 2 or min(self.phase_lengths) < 1:
            raise ConfigError("phase_lengths must be two integers >= 1")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.tau <= 0 or self.sinkhorn_iters < 1:
            raise ConfigError("tau and sinkhorn_iters must be positive")
        if self.sigma_init < 0:
            raise ConfigError("sigma_init must be non-negative")

    def flow_for(self, d: int) -> FlowConfig:
        if self.flow is None:
            return FlowConfig(d)
        if self.flow.d != d:
            raise ShapeError(f"flow config has d={self.flow.d} but data has {d} columns")
        return self.flow

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "flow"}
        out["phase_lengths"] = list(self.phase_lengths)
        out["flow"] = None if self.flow is None else self.flow.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        flow = data.pop("flow", None)
        if isinstance(flow, dict):
            flow = FlowConfig(**flow)
        return cls(flow=flow, **data)


@dataclass
class StandardizationStats:
    medians: np.ndarray
    mads: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    dropped: int
    kept_rows: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.means) / self.stds

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.stds + self.means

    def to_dict(self) -> dict:
        return {
            "medians": self.medians.tolist(),
            "mads": self.mads.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "dropped": self.dropped,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StandardizationStats":
        return cls(
            np.asarray(data["medians"], dtype=float),
            np.asarray(data["mads"], dtype=float),
            np.asarray(data["means"], dtype=float),
            np.asarray(data["stds"], dtype=float),
            int(data["dropped"]),
            np.zeros(0, dtype=int),
        )

    @classmethod
    def identity(cls, d: int, n: int) -> "StandardizationStats":
        return cls(np.zeros(d), np.ones(d), np.zeros(d), np.ones(d), 0, np.arange(n))


def standardize(data) -> tuple[np.ndarray, StandardizationStats]:
    """Drop robust outliers, then z-score each column.

    A row is dropped when any column is more than 8 scaled MADs from its
    median. Columns whose MAD is zero do not drop anything.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {x.shape}")
    if x.shape[0] < 3:
        raise ValueError("need at least 3 rows to standardize")
    if not np.all(np.isfinite(x)):
        raise ValueError("data contains non-finite values")
    if np.any(x.std(axis=0) == 0):
        raise NumericalError("constant column; cannot standardize")
    medians = np.median(x, axis=0)
    mads = MAD_SCALE * np.median(np.abs(x - medians), axis=0)
    limit = np.where(mads > 0, OUTLIER_MADS * mads, np.inf)
    keep = np.all(np.abs(x - medians) <= limit, axis=1)
    if not keep.any():
        raise NumericalError("outlier filter dropped every row")
    kept = x[keep]
    means, stds = kept.mean(axis=0), kept.std(axis=0)
    if np.any(stds == 0):
        raise NumericalError("column constant after outlier removal")
    stats = StandardizationStats(medians, mads, means, stds, int((~keep).sum()), np.flatnonzero(keep))
    return (kept - means) / stds, stats


def varsort(data) -> Ordering:
    """Ascending marginal variance; near-ties (relative 1e-9) keep column order."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("varsort needs an (N >= 2, d) array")
    var = x.var(axis=0, ddof=1)
    scale = max(float(var.max()), 1e-300)
    keys = np.round(var / scale / 1e-9)
    return tuple(int(i) for i in np.lexsort((np.arange(len(var)), keys)))


# ---------------------------------------------------------------- proxy score
class _MaskCache:
    def __init__(self, config: FlowConfig, maxsize: int = 512):
        self.config = config
        self.maxsize = maxsize
        self._store: OrderedDict[bytes, MaskSet] = OrderedDict()

    def __call__(self, p: np.ndarray) -> MaskSet:
        key = np.asarray(p, dtype=np.int8).tobytes()
        masks = self._store.get(key)
        if masks is None:
            masks = build_masks(self.config, p)
            self._store[key] = masks
            if len(self._store) > self.maxsize:
                self._store.popitem(last=False)
        else:
            self._store.move_to_end(key)
        return masks


def _proxy_tape(gamma, model: FlowModel, perms, batch, masks_for):
    tape = Tape()
    g = tape.input(GAMMA, gamma)
    theta = tape_params(tape, model)
    alpha = boltzmann_weights_node(tape, tape.sigmoid(g), perms)
    proxy = None
    for i, p in enumerate(perms):
        ll, _ = loglik_graph(tape, theta, masks_for(p), tape.const(batch), model.config)
        onehot = np.zeros((1, len(perms)))
        onehot[0, i] = 1.0
        term = tape.sum(tape.multiply(tape.mask_multiply(alpha, onehot), ll))
        proxy = term if proxy is None else proxy + term
    tape.output("proxy", proxy)
    return tape, proxy


def proxy_score(gamma, model: FlowModel, cset: CandidateSet, batch) -> float:
    """Boltzmann-weighted average log-likelihood over the candidate set."""
    if len(cset) == 0:
        raise ValueError("empty candidate set")
    weights = boltzmann_weights(gamma, cset).weights
    lls = [inverse_and_loglik(model, p, batch)[1] for p in cset.perms]
    return float(np.dot(weights, lls))


def proxy_value_and_grad(gamma, model: FlowModel, cset: CandidateSet, batch, masks_for=None):
    """``(proxy, d proxy / d gamma, {name: d proxy / d theta})``."""
    if len(cset) == 0:
        raise ValueError("empty candidate set")
    masks_for = masks_for or (lambda p: build_masks(model.config, p))
    tape, proxy = _proxy_tape(np.asarray(gamma, dtype=np.float64), model, cset.perms,
                              np.asarray(batch, dtype=np.float64), masks_for)
    grads = tape.backward(output=proxy)
    g_gamma = grads.pop(GAMMA)
    return float(proxy.value), g_gamma, grads


def _hard_st_value_and_grad(gamma, model, noises, batch, cfg: TrainConfig, masks_for):
    """Straight-through Gumbel-Sinkhorn: hard masks forward, Sinkhorn gradients back."""
    tape = Tape()
    g = tape.input(GAMMA, gamma)
    theta = tape_params(tape, model)
    belief = tape.sigmoid(g)
    total = None
    for eps in noises:
        scores = squash(gamma) + eps
        hard = matching(scores)
        soft = sinkhorn_node(tape, belief + eps, cfg.tau, cfg.sinkhorn_iters)
        p_st = soft + tape.const(hard - soft.value)
        relaxed = build_masks(model.config, p_st)
        # snap forward values to the exact 0/1 masks; gradients still flow through Sinkhorn
        exact = masks_for(hard)
        snap = lambda m, e: m + tape.const(e - m.value)
        masks = MaskSet(exact.variable_hidden, exact.variable_final,
                        [snap(m, e) for m, e in zip(relaxed.hidden, exact.hidden)],
                        snap(relaxed.final, exact.final))
        ll, _ = loglik_graph(tape, theta, masks, tape.const(batch), model.config)
        total = ll if total is None else total + ll
    proxy = tape.multiply(total, 1.0 / len(noises))
    grads = tape.backward(output=proxy)
    return float(proxy.value), grads.pop(GAMMA), grads


def _soft_value_and_grad(gamma, model, batch, cfg: TrainConfig):
    tape = Tape()
    g = tape.input(GAMMA, gamma)
    theta = tape_params(tape, model)
    soft = sinkhorn_node(tape, tape.sigmoid(g), cfg.tau, cfg.sinkhorn_iters)
    masks = build_masks(model.config, soft)
    ll, _ = loglik_graph(tape, theta, masks, tape.const(batch), model.config)
    grads = tape.backward(output=ll)
    return float(ll.value), grads.pop(GAMMA), grads


def soft_masks(config: FlowConfig, gamma, tau: float, iters: int) -> MaskSet:
    """Numeric masks built from the Sinkhorn relaxation of ``gamma``."""
    tape = Tape()
    soft = tape.const(sinkhorn(squash(gamma), tau, iters))
    masks = build_masks(config, soft)
    return MaskSet(masks.variable_hidden.value, masks.variable_final.value,
                   [m.value for m in masks.hidden], masks.final.value)


def soft_loglik(model: FlowModel, masks: MaskSet, x) -> float:
    ll, _ = loglik_graph(numpy_ops, model.params, masks, np.asarray(x, dtype=np.float64), model.config)
    return float(ll)


def self_jacobian(model: FlowModel, masks: MaskSet, x, h: float = 1e-5) -> float:
    """Largest |d head_i / d x_i| over rows and heads, by central differences.

    Zero for any valid autoregressive mask; positive when the masks let a
    variable's own value leak into its location or scale.
    """
    x = np.asarray(x, dtype=np.float64)
    worst = 0.0
    for i in range(model.config.d):
        up, down = x.copy(), x.copy()
        up[:, i] += h
        down[:, i] -= h
        for transform in range(model.config.num_transforms):
            t_up, s_up = heads(model, masks, up, transform)
            t_dn, s_dn = heads(model, masks, down, transform)
            dt = np.abs(t_up[:, i] - t_dn[:, i]) / (2 * h)
            ds = np.abs(s_up[:, i] - s_dn[:, i]) / (2 * h)
            worst = max(worst, float(dt.max()), float(ds.max()))
    return worst


# ---------------------------------------------------------------- training
@dataclass
class TrainResult:
    final_ordering: Ordering
    proxy_trace: list[float]
    perm_frequencies: dict[Ordering, int]
    standardization_stats: StandardizationStats
    gamma: np.ndarray
    model: FlowModel
    config: TrainConfig
    gamma_trace: list[np.ndarray] | None = None
    cheat_report: dict | None = None
    wall_time_s: float = 0.0

    @property
    def proxy_final(self) -> float:
        return self.proxy_trace[-1]

    def to_dict(self) -> dict:
        out = {
            "final_ordering": [v + 1 for v in self.final_ordering],
            "proxy_trace": list(self.proxy_trace),
            "perm_frequencies": [
                {"ordering": [v + 1 for v in o], "count": c} for o, c in self.perm_frequencies.items()
            ],
            "standardization_stats": self.standardization_stats.to_dict(),
            "gamma": self.gamma.tolist(),
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "wall_time_s": self.wall_time_s,
        }
        if self.gamma_trace is not None:
            out["gamma_trace"] = [g.tolist() for g in self.gamma_trace]
        if self.cheat_report is not None:
            out["cheat_report"] = self.cheat_report
        return out


def _prepare(data, cfg: TrainConfig):
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"expected an (N, d) array, got shape {x.shape}")
    if cfg.standardize:
        return standardize(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("data contains non-finite values")
    return x, StandardizationStats.identity(x.shape[1], x.shape[0])


def _batches(n: int, size: int, rng: np.random.Generator):
    idx = rng.permutation(n)
    return [idx[i:i + size] for i in range(0, n, size)]


def _is_theta_epoch(epoch: int, phases: tuple[int, int]) -> bool:
    return epoch % sum(phases) < phases[0]


def train(data, cfg: TrainConfig | None = None, callback=None) -> TrainResult:
    """Learn an ordering with the method named in ``cfg.method``.

    ``callback(epoch, gamma, model)`` runs after every epoch.
    """
    cfg = cfg or TrainConfig()
    if cfg.method == "gumbel-sinkhorn-st":
        return train_gumbel_sinkhorn_st(data, cfg, callback)
    if cfg.method == "soft-sinkhorn":
        return train_soft_sinkhorn(data, cfg, callback)
    return _train(data, cfg, callback)


def train_gumbel_sinkhorn_st(data, cfg: TrainConfig | None = None, callback=None) -> TrainResult:
    cfg = replace(cfg or TrainConfig(), method="gumbel-sinkhorn-st")
    return _train(data, cfg, callback)


def train_soft_sinkhorn(data, cfg: TrainConfig | None = None, callback=None) -> TrainResult:
    cfg = replace(cfg or TrainConfig(), method="soft-sinkhorn")
    result = _train(data, cfg, callback)
    x, _ = _prepare(data, cfg)
    masks = soft_masks(result.model.config, result.gamma, cfg.tau, cfg.sinkhorn_iters)
    relaxed = sinkhorn(squash(result.gamma), cfg.tau, cfg.sinkhorn_iters)
    loop = self_jacobian(result.model, masks, x[: min(len(x), 256)])
    result.cheat_report = {
        "max_proxy": float(np.max(result.proxy_trace)),
        "final_proxy": float(result.proxy_trace[-1]),
        "self_jacobian": loop,
        "loop_detected": bool(loop > LOOP_THRESHOLD),
        "max_deviation_from_permutation": float(np.abs(relaxed - matching(relaxed)).max()),
    }
    return result


def _train(data, cfg: TrainConfig, callback=None) -> TrainResult:
    start = time.perf_counter()
    x, stats = _prepare(data, cfg)
    n, d = x.shape
    flow_cfg = cfg.flow_for(d)
    init_ss, loop_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    model = FlowModel.init(flow_cfg, np.random.default_rng(init_ss))
    rng = np.random.default_rng(loop_ss)
    gamma = np.zeros((d, d))
    theta_opt = AdamWState(lr=cfg.lr_theta, weight_decay=cfg.weight_decay)
    gamma_opt = AdamWState(lr=cfg.lr_gamma, weight_decay=cfg.weight_decay)
    schedule = NoiseSchedule(cfg.sigma_init, max(cfg.epochs - 1, 1))
    masks_for = _MaskCache(flow_cfg)

    proxy_trace: list[float] = []
    gamma_trace: list[np.ndarray] | None = [] if cfg.keep_gamma_trace else None
    final_perms: list[np.ndarray] = []

    for epoch in range(cfg.epochs):
        sigma = schedule(epoch)
        noises = [sample_gumbel(d, sigma, rng) for _ in range(cfg.k)]
        perms = [matching(squash(gamma) + eps) for eps in noises]
        cset = dedupe(perms)
        theta_phase = _is_theta_epoch(epoch, cfg.phase_lengths)
        values = []
        try:
            for idx in _batches(n, cfg.batch_size, rng):
                batch = x[idx]
                value, g_gamma, g_theta = _step_grads(cfg, gamma, model, cset, noises, batch, masks_for)
                values.append(value)
                if cfg.one_step:
                    model.params = adamw_step(theta_opt, model.params, _negate(g_theta))
                    _, g_gamma, _ = _step_grads(cfg, gamma, model, cset, noises, batch, masks_for)
                    gamma = adamw_step(gamma_opt, {GAMMA: gamma}, {GAMMA: -g_gamma})[GAMMA]
                elif theta_phase:
                    model.params = adamw_step(theta_opt, model.params, _negate(g_theta))
                else:
                    gamma = adamw_step(gamma_opt, {GAMMA: gamma}, {GAMMA: -g_gamma})[GAMMA]
        except NumericalError as exc:
            raise TrainingDivergedError(f"epoch {epoch}: {exc}", epoch) from exc
        proxy = float(np.mean(values))
        if not math.isfinite(proxy):
            raise TrainingDivergedError(f"epoch {epoch}: proxy score is {proxy}", epoch)
        proxy_trace.append(proxy)
        if gamma_trace is not None:
            gamma_trace.append(gamma.copy())
        if callback is not None:
            callback(epoch, gamma, model)
        final_perms = perms

    counts = Counter(to_ordering(p) for p in final_perms)
    # most_common keeps first-seen order among ties
    final = counts.most_common(1)[0][0]
    return TrainResult(final, proxy_trace, dict(counts), stats, gamma, model, cfg, gamma_trace,
                       wall_time_s=time.perf_counter() - start)


def _negate(grads: dict) -> dict:
    return {k: -v for k, v in grads.items()}


def _step_grads(cfg, gamma, model, cset, noises, batch, masks_for):
    if cfg.method == "gumbel-top-k":
        return proxy_value_and_grad(gamma, model, cset, batch, masks_for)
    if cfg.method == "gumbel-sinkhorn-st":
        return _hard_st_value_and_grad(gamma, model, noises, batch, cfg, masks_for)
    return _soft_value_and_grad(gamma, model, batch, cfg)


# ---------------------------------------------------------------- baselines
@dataclass
class OracleEntry:
    ordering: Ordering
    loglik: float


def fit_fixed_ordering(x, ordering, flow_cfg: FlowConfig, epochs: int, batch_size: int = 128,
                       lr: float = 1e-3, weight_decay: float = 1e-2, seed: int = 0) -> FlowModel:
    """Train flow weights for one fixed ordering."""
    init_ss, loop_ss = np.random.SeedSequence(seed).spawn(2)
    model = FlowModel.init(flow_cfg, np.random.default_rng(init_ss))
    rng = np.random.default_rng(loop_ss)
    opt = AdamWState(lr=lr, weight_decay=weight_decay)
    masks = build_masks(flow_cfg, from_ordering(ordering))
    for _ in range(epochs):
        for idx in _batches(len(x), batch_size, rng):
            tape = Tape()
            theta = tape_params(tape, model)
            ll, _ = loglik_graph(tape, theta, masks, tape.const(x[idx]), flow_cfg)
            grads = tape.backward(output=ll)
            model.params = adamw_step(opt, model.params, _negate(grads))
    return model


def exhaustive_oracle(data, flow_cfg: FlowConfig | None = None, epochs: int = 50, *,
                      batch_size: int = 128, lr: float = 1e-3, seed: int = 0,
                      standardize_data: bool = True) -> list[OracleEntry]:
    """Every ordering trained on its own, best average log-likelihood first."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected an (N, d) array, got shape {x.shape}")
    d = x.shape[1]
    if d > 5:
        raise ValueError(f"exhaustive search is limited to d <= 5, got {d}")
    if standardize_data:
        x, _ = standardize(x)
    flow_cfg = flow_cfg or FlowConfig(d)
    entries = []
    for ordering in itertools.permutations(range(d)):
        model = fit_fixed_ordering(x, ordering, flow_cfg, epochs, batch_size, lr, seed=seed)
        entries.append(OracleEntry(ordering, inverse_and_loglik(model, from_ordering(ordering), x)[1]))
    entries.sort(key=lambda e: -e.loglik)
    return entries
