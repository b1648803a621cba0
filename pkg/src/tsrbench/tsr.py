"""Temporal saliency rescaling over any base estimator.

The base estimator is either a method name understood by
:func:`tsrbench.saliency.batched` or a callable ``base(oracle, Xs, c) ->
values [B, N, T]``. One *relevance call* is one base map computed for one
input; every wrapper reports the exact number it used.

Scores are sums of absolute map differences accumulated in float64, so every
output cell is non-negative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import saliency as sal
from .errors import ParameterError
from .saliency import ModelOracle, RelevanceMap


@dataclass
class TsrConfig:
    """Thresholding and masking options.

    ``alpha`` is an absolute threshold on the time-relevance scores; when
    ``None`` the threshold is ``quantile(scores, alpha_quantile)`` if that is
    set, else the mean score. ``inner_mask`` picks what is masked in the
    second step: the single cell ``(i, t)`` or the whole feature row.
    """

    alpha: float | None = None
    alpha_quantile: float | None = None
    group_size: int = 5
    mask_value: float = 0.0
    inner_mask: str = "cell"
    chunk_size: int = 256
    method_kwargs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.group_size < 1:
            raise ParameterError("group_size must be at least 1")
        if self.alpha_quantile is not None and not 0.0 <= self.alpha_quantile <= 1.0:
            raise ParameterError("alpha_quantile must lie in [0, 1]")
        if self.inner_mask not in ("cell", "row"):
            raise ParameterError("inner_mask must be 'cell' or 'row'")
        if self.chunk_size < 1:
            raise ParameterError("chunk_size must be positive")


@dataclass
class RelevanceScores:
    time: np.ndarray
    feature: np.ndarray


def _resolve(base, kwargs=None):
    if callable(base):
        return base, getattr(base, "__name__", "custom")
    return sal.batched(str(base), **(kwargs or {})), str(base).lower()


class _Counter:
    """Runs the base estimator in chunks and counts maps produced."""

    def __init__(self, fn, oracle, c, chunk_size):
        self.fn, self.oracle, self.c, self.chunk = fn, oracle, c, chunk_size
        self.calls = 0

    def __call__(self, Xs: np.ndarray) -> np.ndarray:
        parts = []
        for lo in range(0, len(Xs), self.chunk):
            part = Xs[lo : lo + self.chunk]
            parts.append(np.asarray(self.fn(self.oracle, part, self.c), dtype=np.float64))
            self.calls += len(part)
        return np.concatenate(parts)


def _abs_change(ref: np.ndarray, maps: np.ndarray) -> np.ndarray:
    return np.abs(maps - ref[None]).reshape(len(maps), -1).sum(axis=1)


def _time_scores(run: _Counter, X: np.ndarray, mask_value) -> tuple[np.ndarray, np.ndarray]:
    T = X.shape[1]
    batch = np.repeat(X[None], T + 1, axis=0)
    for t in range(T):
        batch[t + 1, :, t] = _mask_at(mask_value, X, (slice(None), t))
    maps = run(batch)
    return maps[0], _abs_change(maps[0], maps[1:])


def _mask_at(mask_value, X, idx):
    mv = np.asarray(mask_value, dtype=X.dtype)
    return mv[idx] if mv.ndim == 2 else mv


def threshold(time_scores: np.ndarray, cfg: TsrConfig) -> float:
    if cfg.alpha is not None:
        return float(cfg.alpha)
    if cfg.alpha_quantile is not None:
        return float(np.quantile(time_scores, cfg.alpha_quantile))
    return float(np.mean(time_scores))


def time_relevance(o: ModelOracle, base, X, c, mask_value=0.0, chunk_size: int = 256) -> np.ndarray:
    """Total absolute change of the base map when each time step is masked.

    Uses exactly ``T + 1`` base relevance calls.
    """
    fn, _ = _resolve(base)
    X = np.asarray(X)
    run = _Counter(fn, o, c, chunk_size)
    return _time_scores(run, X, mask_value)[1]


def _grouped(o, base, X, c, cfg: TsrConfig, group: int, tag: str) -> RelevanceMap:
    X = np.asarray(X)
    N, T = X.shape
    if group > N:
        raise ParameterError(f"group size {group} exceeds the {N} features")
    fn, name = _resolve(base, cfg.method_kwargs)
    run = _Counter(fn, o, c, cfg.chunk_size)
    ref, dtime = _time_scores(run, X, cfg.mask_value)
    alpha = threshold(dtime, cfg)
    active = np.flatnonzero(dtime > alpha)
    starts = list(range(0, N, group))
    dfeat = np.zeros((len(starts), T))
    if len(active):
        batch = np.repeat(X[None], len(active) * len(starts), axis=0)
        k = 0
        for t in active:
            for lo in starts:
                if cfg.inner_mask == "row":
                    idx = (slice(lo, lo + group), slice(None))
                else:
                    idx = (slice(lo, lo + group), t)
                batch[k][idx] = _mask_at(cfg.mask_value, X, idx)
                k += 1
        changes = _abs_change(ref, run(batch)).reshape(len(active), len(starts))
        dfeat[:, active] = changes.T
    per_feature = np.repeat(dfeat, group, axis=0)[:N]
    values = per_feature * dtime[None, :]
    info = {
        "alpha": alpha,
        "group_size": group,
        "active_steps": int(len(active)),
        "scores": RelevanceScores(dtime, dfeat),
    }
    return RelevanceMap(values, int(np.asarray(c).reshape(-1)[0]), f"{tag}+{name}", run.calls, info)


def tsr(o: ModelOracle, base, X, c, cfg: TsrConfig | None = None) -> RelevanceMap:
    """Two-step rescaling: time relevance, then per-cell feature relevance.

    Cells at time steps whose time relevance does not exceed the threshold
    get zero. Relevance calls: ``(T + 1) + |{t above alpha}| * N``.
    """
    cfg = cfg or TsrConfig()
    return _grouped(o, base, X, c, cfg, 1, "TSR")


def tsr_feature_grouping(o: ModelOracle, base, X, c, cfg: TsrConfig | None = None) -> RelevanceMap:
    """As :func:`tsr` but masks blocks of ``cfg.group_size`` consecutive features.

    Relevance calls: ``(T + 1) + |{t above alpha}| * ceil(N / G)``.
    """
    cfg = cfg or TsrConfig()
    out = _grouped(o, base, X, c, cfg, cfg.group_size, "TSRFG")
    return out


def tfsr(o: ModelOracle, base, X, c, cfg: TsrConfig | None = None) -> RelevanceMap:
    """Separable variant: one score per time step times one per feature row.

    The output is the outer product of the two score vectors. Relevance
    calls: ``T + N + 1``.
    """
    cfg = cfg or TsrConfig()
    X = np.asarray(X)
    N, T = X.shape
    fn, name = _resolve(base, cfg.method_kwargs)
    run = _Counter(fn, o, c, cfg.chunk_size)
    ref, dtime = _time_scores(run, X, cfg.mask_value)
    batch = np.repeat(X[None], N, axis=0)
    for i in range(N):
        batch[i, i, :] = _mask_at(cfg.mask_value, X, (i, slice(None)))
    dfeat = _abs_change(ref, run(batch))
    values = np.outer(dfeat, dtime)
    info = {"scores": RelevanceScores(dtime, dfeat)}
    return RelevanceMap(values, int(np.asarray(c).reshape(-1)[0]), f"TFSR+{name}", run.calls, info)


WRAPPERS = {"tsr": tsr, "tsrfg": tsr_feature_grouping, "tfsr": tfsr}


def expected_calls(variant: str, N: int, T: int, active_steps: int = 0, group_size: int = 1) -> int:
    variant = variant.lower()
    if variant == "tsr":
        return (T + 1) + active_steps * N
    if variant == "tsrfg":
        return (T + 1) + active_steps * math.ceil(N / group_size)
    if variant == "tfsr":
        return T + N + 1
    raise ParameterError(f"unknown variant {variant!r}")
