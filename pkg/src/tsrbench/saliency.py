"""Attribution estimators over a model oracle.

Every estimator has a single-sample entry point returning a
:class:`RelevanceMap` and a batched core ``(oracle, Xs [B, N, T], c) ->
values [B, N, T]``. The batched cores are what the rescaling wrappers in
:mod:`tsrbench.tsr` call; obtain one with :func:`batched`.

Stochastic estimators draw their noise once per call and share it across the
rows of a batch, so each row's map is a deterministic function of
``(X, seed)`` regardless of what else is in the batch.

Perturbation estimators score the raw class output ``S_c`` (pre-softmax),
the same quantity the gradient estimators differentiate.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, FormatError, ParameterError

METHODS = ("grad", "ig", "sg", "gs", "fo", "fa", "fp", "svs", "random")
SALIENCY_FORMAT_VERSION = 1


@dataclass
class RelevanceMap:
    values: np.ndarray
    target_class: int
    method: str
    relevance_calls: int
    info: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass(frozen=True)
class ModelOracle:
    """``score(Xs) -> [B, C]`` and ``gradient(Xs, c) -> [B, N, T]``.

    ``c`` is an int or one class per row.
    """

    score: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray, object], np.ndarray]

    @classmethod
    def from_model(cls, model, chunk_size: int = 256) -> "ModelOracle":
        from .models import input_gradient

        def score(Xs):
            return model.logits(Xs, chunk_size=chunk_size)

        def gradient(Xs, c):
            Xs = np.asarray(Xs)
            cs = np.broadcast_to(np.asarray(c), (len(Xs),))
            parts = [input_gradient(model, Xs[i : i + chunk_size], cs[i : i + chunk_size]) for i in range(0, len(Xs), chunk_size)]
            return np.concatenate(parts) if parts else np.zeros_like(Xs)

        return cls(score, gradient)

    @classmethod
    def linear(cls, weights: np.ndarray, bias=None) -> "ModelOracle":
        """``S_c(X) = sum(weights[c] * X) + bias[c]``; ``weights`` is ``[C, N, T]``."""
        w = np.asarray(weights, dtype=np.float64)
        b = np.zeros(len(w)) if bias is None else np.asarray(bias, dtype=np.float64)

        def score(Xs):
            return np.einsum("bnt,cnt->bc", np.asarray(Xs, dtype=np.float64), w) + b

        def gradient(Xs, c):
            cs = np.broadcast_to(np.asarray(c), (len(Xs),))
            return w[cs].copy()

        return cls(score, gradient)


@dataclass
class EstimatorConfig:
    ig_steps: int = 50
    sg_samples: int = 50
    sg_noise: float | None = None  # None: 0.1 x (max - min) of the input
    gs_samples: int = 20
    gs_noise: float | None = None
    svs_permutations: int = 25
    occlusion_window: tuple = (1, 1)
    permutation_batch_size: int = 16
    baseline: str = "ZERO"

    def __post_init__(self):
        self.baseline = str(self.baseline).upper()
        self.occlusion_window = tuple(int(v) for v in self.occlusion_window)
        counts = (self.ig_steps, self.sg_samples, self.gs_samples, self.svs_permutations, self.permutation_batch_size)
        if any(int(n) < 1 for n in counts):
            raise ParameterError("estimator sample counts must be at least 1")
        if any(v < 1 for v in self.occlusion_window) or len(self.occlusion_window) != 2:
            raise ParameterError("occlusion_window must be two positive ints")
        for noise in (self.sg_noise, self.gs_noise):
            if noise is not None and noise <= 0:
                raise ParameterError("noise scales must be positive")
        if self.baseline not in ("ZERO", "DATASET_MEAN"):
            raise ParameterError(f"unknown baseline {self.baseline!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# helpers


def _batch(X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X)
    if X.ndim == 2:
        return X[None], True
    if X.ndim != 3:
        raise DimensionError(f"expected [N, T] or [B, N, T], got {X.shape}")
    return X, False


def _classes(c, b: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(c, dtype=np.int64), (b,))


def _pick(scores: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.asarray(scores, dtype=np.float64)[np.arange(len(c)), c]


def _baseline(Xs: np.ndarray, baseline) -> np.ndarray:
    if baseline is None:
        return np.zeros_like(Xs[0])
    base = np.asarray(baseline, dtype=Xs.dtype)
    if base.shape != Xs.shape[1:]:
        raise DimensionError(f"baseline shape {base.shape} does not match input {Xs.shape[1:]}")
    return base


def _noise_scale(Xs: np.ndarray, sigma) -> np.ndarray:
    if sigma is not None:
        return np.full((len(Xs), 1, 1), float(sigma))
    rng = Xs.reshape(len(Xs), -1)
    span = rng.max(axis=1) - rng.min(axis=1)
    return (0.1 * np.where(span > 0, span, 1.0)).reshape(-1, 1, 1)


def _wrap(values, single, c, method, calls, **info):
    if single:
        return RelevanceMap(values[0], int(np.asarray(c).reshape(-1)[0]), method, calls, info)
    return [RelevanceMap(v, int(ci), method, calls, info) for v, ci in zip(values, _classes(c, len(values)))]


# ---------------------------------------------------------------------------
# batched cores


def grad_values(o: ModelOracle, Xs, c) -> np.ndarray:
    return np.asarray(o.gradient(Xs, _classes(c, len(Xs))))


def ig_values(o: ModelOracle, Xs, c, steps: int = 50, baseline=None) -> np.ndarray:
    if steps < 1:
        raise ParameterError("ig_steps must be at least 1")
    b = len(Xs)
    base = _baseline(Xs, baseline)
    alphas = (np.arange(steps) + 0.5) / steps
    diff = Xs - base
    points = base + alphas[:, None, None, None] * diff[None]
    cs = np.tile(_classes(c, b), steps)
    g = np.asarray(o.gradient(points.reshape(steps * b, *Xs.shape[1:]).astype(Xs.dtype), cs), dtype=np.float64)
    return diff * g.reshape(steps, b, *Xs.shape[1:]).mean(axis=0)


def sg_values(o: ModelOracle, Xs, c, samples: int = 50, sigma=None, seed: int = 0) -> np.ndarray:
    b = len(Xs)
    noise = np.random.default_rng(seed).standard_normal((samples, *Xs.shape[1:]))
    points = Xs[None] + _noise_scale(Xs, sigma)[None] * noise[:, None]
    cs = np.tile(_classes(c, b), samples)
    g = np.asarray(o.gradient(points.reshape(samples * b, *Xs.shape[1:]).astype(Xs.dtype), cs), dtype=np.float64)
    return g.reshape(samples, b, *Xs.shape[1:]).mean(axis=0)


def gs_values(o: ModelOracle, Xs, c, baselines, samples: int = 20, sigma=None, seed: int = 0) -> np.ndarray:
    bases = [np.asarray(_baseline(Xs, bl), dtype=np.float64) for bl in baselines]
    if not bases:
        raise ParameterError("gradient_shap needs at least one baseline")
    b = len(Xs)
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, len(bases), size=samples)
    alpha = rng.uniform(0.0, 1.0, size=samples)
    noise = rng.standard_normal((samples, *Xs.shape[1:]))
    scale = _noise_scale(Xs, sigma)
    stack = np.stack(bases)[pick]  # [S, N, T]
    noisy = Xs[None] + scale[None] * noise[:, None]
    points = stack[:, None] + alpha[:, None, None, None] * (noisy - stack[:, None])
    cs = np.tile(_classes(c, b), samples)
    g = np.asarray(o.gradient(points.reshape(samples * b, *Xs.shape[1:]).astype(Xs.dtype), cs), dtype=np.float64)
    g = g.reshape(samples, b, *Xs.shape[1:])
    return (g * (Xs[None] - stack[:, None])).mean(axis=0)


def _group_values(o: ModelOracle, Xs, c, groups: list[np.ndarray], baseline=None) -> np.ndarray:
    """Score drop when each group of cells is replaced by the baseline."""
    b = len(Xs)
    base = _baseline(Xs, baseline)
    cs = _classes(c, b)
    s0 = _pick(o.score(Xs), cs)
    out = np.zeros(Xs.shape, dtype=np.float64)
    chunk = max(1, 2048 // b)
    for lo in range(0, len(groups), chunk):
        part = groups[lo : lo + chunk]
        masked = np.repeat(Xs[None], len(part), axis=0)
        for j, g in enumerate(part):
            masked[j][:, g] = base[g]
        s = _pick(o.score(masked.reshape(len(part) * b, *Xs.shape[1:])), np.tile(cs, len(part))).reshape(len(part), b)
        for j, g in enumerate(part):
            out[:, g] = (s0 - s[j])[:, None]
    return out


def occlusion_windows(shape: tuple, window: tuple) -> list[np.ndarray]:
    n, t = shape
    wn, wt = window
    if wn > n or wt > t:
        raise ParameterError(f"occlusion window {window} is larger than the {n}x{t} grid")
    out = []
    for i in range(0, n, wn):
        for j in range(0, t, wt):
            g = np.zeros(shape, dtype=bool)
            g[i : i + wn, j : j + wt] = True
            out.append(g)
    return out


def fo_values(o: ModelOracle, Xs, c, window=(1, 1), baseline=None) -> np.ndarray:
    return _group_values(o, Xs, c, occlusion_windows(Xs.shape[1:], window), baseline)


def normalize_groups(groups, shape) -> list[np.ndarray]:
    """Cell groups as boolean masks; accepts masks, cell lists or a label grid."""
    if isinstance(groups, np.ndarray) and groups.shape == tuple(shape) and groups.dtype.kind in "iu":
        labels = groups
        groups = [labels == g for g in np.unique(labels) if g >= 0]
    out = []
    for g in groups:
        g = np.asarray(g)
        if g.dtype == bool:
            if g.shape != tuple(shape):
                raise ParameterError(f"group mask shape {g.shape} does not match {shape}")
            m = g
        else:
            m = np.zeros(shape, dtype=bool)
            cells = g.reshape(-1, 2)
            m[cells[:, 0], cells[:, 1]] = True
        out.append(m)
    if out:
        cover = np.sum(out, axis=0)
        if cover.max() > 1:
            raise ParameterError("feature groups overlap")
    return out


def row_groups(shape) -> list[np.ndarray]:
    n, t = shape
    out = []
    for i in range(n):
        g = np.zeros(shape, dtype=bool)
        g[i] = True
        out.append(g)
    return out


def fa_values(o: ModelOracle, Xs, c, groups=None, baseline=None) -> np.ndarray:
    groups = row_groups(Xs.shape[1:]) if groups is None else normalize_groups(groups, Xs.shape[1:])
    return _group_values(o, Xs, c, groups, baseline)


def svs_values(o: ModelOracle, Xs, c, permutations: int = 25, baseline=None, seed: int = 0, chunk_size: int = 4096) -> np.ndarray:
    if permutations < 1:
        raise ParameterError("svs_permutations must be at least 1")
    b = len(Xs)
    shape = Xs.shape[1:]
    cells = int(np.prod(shape))
    base = _baseline(Xs, baseline).reshape(cells).astype(np.float64)
    flat = Xs.reshape(b, cells).astype(np.float64)
    cs = _classes(c, b)
    rng = np.random.default_rng(seed)
    total = np.zeros((b, cells))
    steps = np.arange(cells + 1)
    for _ in range(permutations):
        order = rng.permutation(cells)
        rank = np.empty(cells, dtype=np.int64)
        rank[order] = np.arange(cells)
        for r in range(b):
            scores = np.empty(cells + 1)
            for lo in range(0, cells + 1, chunk_size):
                ks = steps[lo : lo + chunk_size]
                on = rank[None, :] < ks[:, None]
                path = np.where(on, flat[r][None], base[None])
                scores[lo : lo + len(ks)] = _pick(o.score(path.reshape(len(ks), *shape).astype(Xs.dtype)), np.full(len(ks), cs[r]))
            total[r, order] += np.diff(scores)
    return (total / permutations).reshape(Xs.shape)


def _non_identity_perm(rng, b: int) -> np.ndarray:
    ident = np.arange(b)
    while True:
        p = rng.permutation(b)
        if not np.array_equal(p, ident):
            return p


def fp_values(o: ModelOracle, Xs, c, seed: int = 0) -> np.ndarray:
    """Per cell: permute that cell across the batch, record each row's score drop."""
    b = len(Xs)
    if b < 2:
        raise ParameterError("feature permutation needs a batch of at least 2 samples")
    shape = Xs.shape[1:]
    cells = int(np.prod(shape))
    cs = _classes(c, b)
    rng = np.random.default_rng(seed)
    perms = np.stack([_non_identity_perm(rng, b) for _ in range(cells)])  # [cells, B]
    s0 = _pick(o.score(Xs), cs)
    flat = Xs.reshape(b, cells)
    out = np.zeros((b, cells))
    chunk = max(1, 4096 // b)
    for lo in range(0, cells, chunk):
        idx = np.arange(lo, min(lo + chunk, cells))
        batch = np.repeat(flat[None], len(idx), axis=0)  # [k, B, cells]
        batch[np.arange(len(idx)), :, idx] = flat[perms[idx], idx[:, None]]
        s = _pick(o.score(batch.reshape(len(idx) * b, *shape)), np.tile(cs, len(idx))).reshape(len(idx), b)
        out[:, idx] = (s0[None] - s).T
    return out.reshape(Xs.shape)


# ---------------------------------------------------------------------------
# single-sample estimators


def grad(o: ModelOracle, X, c) -> RelevanceMap:
    Xs, single = _batch(X)
    return _wrap(grad_values(o, Xs, c), single, c, "grad", 1)


def integrated_gradients(o: ModelOracle, X, c, cfg: EstimatorConfig | None = None, baseline=None) -> RelevanceMap:
    """Midpoint-rule path integral from ``baseline`` (zeros) to ``X``."""
    cfg = cfg or EstimatorConfig()
    Xs, single = _batch(X)
    return _wrap(ig_values(o, Xs, c, cfg.ig_steps, baseline), single, c, "ig", cfg.ig_steps)


def smoothgrad(o: ModelOracle, X, c, cfg: EstimatorConfig | None = None, seed: int = 0) -> RelevanceMap:
    cfg = cfg or EstimatorConfig()
    Xs, single = _batch(X)
    return _wrap(sg_values(o, Xs, c, cfg.sg_samples, cfg.sg_noise, seed), single, c, "sg", cfg.sg_samples)


def gradient_shap(o: ModelOracle, X, c, cfg: EstimatorConfig | None = None, baselines: Sequence | None = None, seed: int = 0) -> RelevanceMap:
    cfg = cfg or EstimatorConfig()
    Xs, single = _batch(X)
    if baselines is None:
        baselines = [None]
    if len(baselines) == 0:
        raise ParameterError("gradient_shap needs at least one baseline")
    values = gs_values(o, Xs, c, list(baselines), cfg.gs_samples, cfg.gs_noise, seed)
    return _wrap(values, single, c, "gs", cfg.gs_samples)


def feature_occlusion(o: ModelOracle, X, c, cfg: EstimatorConfig | None = None, baseline=None) -> RelevanceMap:
    cfg = cfg or EstimatorConfig()
    Xs, single = _batch(X)
    windows = occlusion_windows(Xs.shape[1:], cfg.occlusion_window)
    values = _group_values(o, Xs, c, windows, baseline)
    return _wrap(values, single, c, "fo", len(windows) + 1)


def feature_ablation(o: ModelOracle, X, c, cfg: EstimatorConfig | None = None, groups=None, baseline=None) -> RelevanceMap:
    """Group-wise replacement by the baseline; default groups are feature rows."""
    Xs, single = _batch(X)
    groups = row_groups(Xs.shape[1:]) if groups is None else normalize_groups(groups, Xs.shape[1:])
    values = _group_values(o, Xs, c, groups, baseline)
    return _wrap(values, single, c, "fa", len(groups) + 1)


def feature_permutation(o: ModelOracle, batch, c, cfg: EstimatorConfig | None = None, seed: int = 0) -> list[RelevanceMap]:
    Xs = np.asarray(batch)
    if Xs.ndim != 3:
        raise DimensionError(f"feature_permutation expects a batch [B, N, T], got {Xs.shape}")
    values = fp_values(o, Xs, c, seed)
    calls = int(np.prod(Xs.shape[1:])) + 1
    return [RelevanceMap(v, int(ci), "fp", calls) for v, ci in zip(values, _classes(c, len(Xs)))]


def shapley_value_sampling(o: ModelOracle, X, c, cfg: EstimatorConfig | None = None, baseline=None, seed: int = 0) -> RelevanceMap:
    cfg = cfg or EstimatorConfig()
    Xs, single = _batch(X)
    m = cfg.svs_permutations
    values = svs_values(o, Xs, c, m, baseline, seed)
    cells = int(np.prod(Xs.shape[1:]))
    return _wrap(values, single, c, "svs", m * cells + m)


def random_saliency(shape, seed: int = 0, source=None) -> RelevanceMap:
    """Uniform permutation of ``source`` values, or i.i.d. uniform values."""
    rng = np.random.default_rng(seed)
    if source is not None:
        vals = source.values if isinstance(source, RelevanceMap) else np.asarray(source)
        out = rng.permutation(vals.reshape(-1)).reshape(vals.shape)
        tag = source.method if isinstance(source, RelevanceMap) else "array"
        return RelevanceMap(out, getattr(source, "target_class", -1), "random", 0, {"source": tag})
    return RelevanceMap(rng.uniform(0.0, 1.0, size=tuple(shape)), -1, "random", 0, {"source": None})


# ---------------------------------------------------------------------------
# registry used by the wrappers and the command line


def calls_per_map(method: str, cfg: EstimatorConfig, shape: tuple, groups: int | None = None) -> int:
    cells = int(np.prod(shape))
    method = method.lower()
    if method == "grad":
        return 1
    if method == "ig":
        return cfg.ig_steps
    if method == "sg":
        return cfg.sg_samples
    if method == "gs":
        return cfg.gs_samples
    if method == "fo":
        return len(occlusion_windows(shape, cfg.occlusion_window)) + 1
    if method == "fa":
        return (shape[0] if groups is None else groups) + 1
    if method == "fp":
        return cells + 1
    if method == "svs":
        return cfg.svs_permutations * cells + cfg.svs_permutations
    if method == "random":
        return 0
    raise ParameterError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")


def batched(method: str, cfg: EstimatorConfig | None = None, seed: int = 0, baseline=None, baselines=None, groups=None):
    """Batched estimator ``f(oracle, Xs, c) -> values`` for a method name."""
    cfg = cfg or EstimatorConfig()
    method = method.lower()
    if method == "grad":
        return grad_values
    if method == "ig":
        return lambda o, Xs, c: ig_values(o, Xs, c, cfg.ig_steps, baseline)
    if method == "sg":
        return lambda o, Xs, c: sg_values(o, Xs, c, cfg.sg_samples, cfg.sg_noise, seed)
    if method == "gs":
        bls = [baseline] if baselines is None else list(baselines)
        return lambda o, Xs, c: gs_values(o, Xs, c, bls, cfg.gs_samples, cfg.gs_noise, seed)
    if method == "fo":
        return lambda o, Xs, c: fo_values(o, Xs, c, cfg.occlusion_window, baseline)
    if method == "fa":
        return lambda o, Xs, c: fa_values(o, Xs, c, groups, baseline)
    if method == "svs":
        return lambda o, Xs, c: svs_values(o, Xs, c, cfg.svs_permutations, baseline, seed)
    if method == "fp":
        return lambda o, Xs, c: fp_values(o, Xs, c, seed)
    if method == "random":
        def rand(o, Xs, c):
            rng = np.random.default_rng(seed)
            return np.broadcast_to(rng.uniform(size=Xs.shape[1:]), Xs.shape).copy()

        return rand
    raise ParameterError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")


def attribute(o: ModelOracle, method: str, Xs, c, cfg: EstimatorConfig | None = None, seed: int = 0, baseline=None, chunk_size: int = 32) -> np.ndarray:
    """Maps for a whole array of samples, each against its own class."""
    cfg = cfg or EstimatorConfig()
    Xs = np.asarray(Xs)
    cs = _classes(c, len(Xs))
    method = method.lower()
    if method == "fp":
        out = np.empty(Xs.shape, dtype=np.float64)
        size = cfg.permutation_batch_size
        starts = list(range(0, len(Xs), size))
        if len(starts) > 1 and len(Xs) - starts[-1] < 2:
            starts.pop()
        for k, lo in enumerate(starts):
            hi = starts[k + 1] if k + 1 < len(starts) else len(Xs)
            out[lo:hi] = fp_values(o, Xs[lo:hi], cs[lo:hi], seed + k)
        return out
    if method == "random":
        rng = np.random.default_rng(seed)
        return rng.uniform(size=Xs.shape)
    f = batched(method, cfg, seed, baseline)
    parts = [np.asarray(f(o, Xs[i : i + chunk_size], cs[i : i + chunk_size]), dtype=np.float64) for i in range(0, len(Xs), chunk_size)]
    return np.concatenate(parts) if parts else np.zeros(Xs.shape)


# ---------------------------------------------------------------------------
# persistence


def save_saliency(path, values: np.ndarray, meta: dict) -> Path:
    """``saliency.bin`` (f32 LE ``[S, N, T]``) plus ``saliency.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 3:
        raise DimensionError(f"saliency values must be [S, N, T], got {arr.shape}")
    (path / "saliency.bin").write_bytes(arr.tobytes())
    meta = dict(meta, format_version=SALIENCY_FORMAT_VERSION, shape=list(arr.shape))
    (path / "saliency.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable))
    return path


def load_saliency(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    try:
        meta = json.loads((path / "saliency.json").read_text())
        raw = (path / "saliency.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read saliency files in {path}: {exc}") from exc
    shape = tuple(meta.get("shape", ()))
    if len(shape) != 3 or len(raw) != 4 * math.prod(shape):
        raise FormatError(f"shape: {shape} inconsistent with {len(raw)} bytes in saliency.bin")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32), meta


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")
