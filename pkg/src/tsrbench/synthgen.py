"""Synthetic multivariate time-series benchmark.

A sample is an ``[N, T]`` matrix whose rows are drawn independently from a
base process. A ground-truth mask marks the informative cells; for
value-based shape families those cells get ``+mu`` (label 1) or ``-mu``
(label 0), for positional families they get ``+mu`` in both classes and the
class is carried by where the mask sits.

Everything is a pure function of ``(spec, seed)``. Per-sample seeds come from
:class:`numpy.random.SeedSequence` keyed by ``(master_seed, split, index)`` so
any single sample can be regenerated on its own.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

PROCESSES = ("GAUSSIAN", "HARMONIC", "PSEUDO_PERIOD", "AUTOREGRESSIVE", "CAR", "NARMA", "GP_MIXTURE")
FAMILIES = (
    "MIDDLE_BOX",
    "SMALL_MIDDLE_BOX",
    "MOVING_BOX",
    "SMALL_MOVING_BOX",
    "RARE_FEATURE",
    "MOVING_RARE_FEATURE",
    "RARE_TIME",
    "MOVING_RARE_TIME",
    "POSITIONAL_TIME",
    "POSITIONAL_FEATURE",
)
# informative-fraction bands per family kind
BANDS = {"normal": (0.35, 1.0), "small": (0.0, 0.10), "rare": (0.0, 0.05)}
DATASET_FORMAT_VERSION = 1
SPLITS = ("train", "test")


@dataclass
class ProcessParams:
    kind: str = "GAUSSIAN"
    ar_phi: float = 0.9
    car_phi: float = 0.9
    car_sigma: float = 0.1
    harmonic_freq: float = 2.0
    pseudo_amp_sd: float = 0.5
    pseudo_freq_mean: float = 2.0
    pseudo_freq_sd: float = 0.01
    narma_order: int = 10
    narma_coefs: tuple = (0.3, 0.05, 1.5, 0.1)
    narma_u_high: float = 0.5
    gp_length_scales: tuple = (2.0, 10.0)
    gp_weights: tuple = (0.5, 0.5)
    noise_sd: float = 1.0
    time_span: float = 20.0

    def __post_init__(self):
        self.kind = str(self.kind).upper()
        if self.kind not in PROCESSES:
            raise ParameterError(f"unknown process {self.kind!r}; expected one of {PROCESSES}")
        self.narma_coefs = tuple(float(c) for c in self.narma_coefs)
        self.gp_length_scales = tuple(float(c) for c in self.gp_length_scales)
        self.gp_weights = tuple(float(c) for c in self.gp_weights)
        if len(self.narma_coefs) != 4:
            raise ParameterError("narma_coefs needs 4 values")
        if self.narma_order < 1:
            raise ParameterError("narma_order must be at least 1")
        scales = [self.car_sigma, self.pseudo_amp_sd, self.pseudo_freq_sd, self.narma_u_high, self.noise_sd, self.time_span]
        if any(s <= 0 for s in scales) or any(s <= 0 for s in self.gp_length_scales):
            raise ParameterError("scale parameters must be positive")
        if len(self.gp_weights) != len(self.gp_length_scales) or any(w < 0 for w in self.gp_weights):
            raise ParameterError("gp_weights must be non-negative, one per length-scale")


def _sorted_times(rng, rows: int, steps: int, span: float) -> np.ndarray:
    return np.sort(rng.uniform(0.0, span, size=(rows, steps)), axis=1)


@lru_cache(maxsize=16)
def _gp_factor(steps: int, scales: tuple, weights: tuple) -> np.ndarray:
    t = np.arange(steps, dtype=np.float64)
    d2 = (t[:, None] - t[None, :]) ** 2
    k = sum(w * np.exp(-0.5 * d2 / (ls * ls)) for w, ls in zip(weights, scales))
    return np.linalg.cholesky(k + 1e-6 * np.eye(steps))


def sample_rows(p: ProcessParams, rows: int, steps: int, rng: np.random.Generator) -> np.ndarray:
    """``rows`` independent realizations of length ``steps``, float64."""
    eps = p.noise_sd * rng.standard_normal((rows, steps))
    kind = p.kind
    if kind == "GAUSSIAN":
        return eps
    if kind == "AUTOREGRESSIVE":
        x = np.empty_like(eps)
        prev = np.zeros(rows)
        for t in range(steps):
            prev = p.ar_phi * prev + eps[:, t]
            x[:, t] = prev
        return x
    if kind == "CAR":
        # printed recurrence: X_t = phi X_{t-1} + sigma (1 - phi)^2 eps + eps_t
        aux = rng.standard_normal((rows, steps))
        gain = p.car_sigma * (1.0 - p.car_phi) ** 2
        x = np.empty_like(eps)
        prev = np.zeros(rows)
        for t in range(steps):
            prev = p.car_phi * prev + gain * aux[:, t] + eps[:, t]
            x[:, t] = prev
        return x
    if kind == "NARMA":
        a0, a1, a2, a3 = p.narma_coefs
        n = p.narma_order
        u = rng.uniform(0.0, p.narma_u_high, size=(rows, steps))
        y = np.zeros((rows, steps))
        for t in range(steps):
            prev = y[:, t - 1] if t >= 1 else np.zeros(rows)
            window = y[:, max(t - n, 0) : t].sum(axis=1)
            lag = u[:, t - (n - 1)] if t - (n - 1) >= 0 else np.zeros(rows)
            y[:, t] = a0 * prev + a1 * prev * window + a2 * lag * u[:, t] + a3
        # noise is observational; fed back it makes the recurrence explode
        return y + eps
    if kind == "HARMONIC":
        times = _sorted_times(rng, rows, steps, p.time_span)
        return np.sin(2 * np.pi * p.harmonic_freq * times) + eps
    if kind == "PSEUDO_PERIOD":
        times = _sorted_times(rng, rows, steps, p.time_span)
        amp = rng.normal(0.0, p.pseudo_amp_sd, size=(rows, steps))
        freq = rng.normal(p.pseudo_freq_mean, p.pseudo_freq_sd, size=(rows, steps))
        return amp * np.sin(2 * np.pi * freq * times) + eps
    if kind == "GP_MIXTURE":
        chol = _gp_factor(steps, p.gp_length_scales, p.gp_weights)
        return eps @ chol.T
    raise ParameterError(f"unknown process {kind!r}")


def sample_base(p: ProcessParams, N: int, T: int, seed: int) -> np.ndarray:
    """One ``[N, T]`` draw of the base (non-informative) process."""
    if N < 1 or T < 1:
        raise ParameterError("N and T must be positive")
    return sample_rows(p, N, T, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# shapes and masks


def _kind(family: str) -> str:
    if family.startswith("SMALL"):
        return "small"
    if "RARE" in family:
        return "rare"
    if family.startswith("POSITIONAL"):
        return "positional"
    return "normal"


@dataclass
class ShapeSpec:
    """Where informative cells go.

    For box families ``feature_span`` x ``time_span`` is the box and
    ``feature_start``/``time_start`` its fixed corner (ignored when
    ``moving``). Positional families use ``class_starts``: the fixed start
    on the class-carrying axis for label 0 and label 1.
    """

    family: str = "MIDDLE_BOX"
    feature_span: int = 30
    time_span: int = 30
    feature_start: int = 10
    time_start: int = 10
    moving: bool = False
    positional: bool = False
    class_starts: tuple = (5, 30)
    mu: float = 1.0

    def __post_init__(self):
        self.family = str(self.family).upper()
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown shape family {self.family!r}; expected one of {FAMILIES}")
        self.class_starts = tuple(int(c) for c in self.class_starts)
        if self.feature_span < 1 or self.time_span < 1:
            raise ParameterError("box spans must be positive")

    @property
    def band(self) -> tuple | None:
        return BANDS.get(_kind(self.family))

    def value_based(self) -> bool:
        return not self.positional

    @classmethod
    def default(cls, family: str, N: int = 50, T: int = 50, mu: float = 1.0) -> "ShapeSpec":
        """Canonical geometry, e.g. a centred 30x30 box on a 50x50 grid."""
        family = str(family).upper()
        if family not in FAMILIES:
            raise ParameterError(f"unknown shape family {family!r}; expected one of {FAMILIES}")
        kind = _kind(family)
        moving = "MOVING" in family
        if kind == "positional":
            if family == "POSITIONAL_TIME":
                fs, ts = round(0.6 * N), max(1, round(0.3 * T))
                starts = (round(0.1 * T), round(0.6 * T))
            else:
                fs, ts = max(1, round(0.3 * N)), round(0.6 * T)
                starts = (round(0.1 * N), round(0.6 * N))
            return cls(family, fs, ts, 0, 0, False, True, starts, mu)
        if kind == "normal":
            fs, ts = round(0.6 * N), round(0.6 * T)
        elif kind == "small":
            fs, ts = round(0.3 * N), round(0.3 * T)
        elif family.endswith("RARE_FEATURE"):
            fs, ts = min(3, N), round(0.8 * T)
        else:
            fs, ts = round(0.8 * N), min(3, T)
        fs, ts = max(fs, 1), max(ts, 1)
        return cls(family, fs, ts, (N - fs) // 2, (T - ts) // 2, moving, False, (0, 0), mu)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_fits(shape: ShapeSpec, N: int, T: int) -> None:
    if shape.feature_span > N or shape.time_span > T:
        raise ParameterError(f"box {shape.feature_span}x{shape.time_span} does not fit a {N}x{T} grid")
    if shape.positional:
        fixed_len, fixed_axis = (shape.time_span, T) if shape.family == "POSITIONAL_TIME" else (shape.feature_span, N)
        if any(s < 0 or s + fixed_len > fixed_axis for s in shape.class_starts):
            raise ParameterError("positional class windows must lie inside the grid")
    elif not shape.moving:
        if not (0 <= shape.feature_start <= N - shape.feature_span and 0 <= shape.time_start <= T - shape.time_span):
            raise ParameterError("static box is out of bounds")


def build_mask(shape: ShapeSpec, N: int, T: int, label: int, seed) -> np.ndarray:
    """Boolean ``[N, T]`` ground-truth informative cells for one sample."""
    _check_fits(shape, N, T)
    rng = np.random.default_rng(seed)
    fs, ts = shape.feature_span, shape.time_span
    if shape.positional:
        if shape.family == "POSITIONAL_TIME":
            t0 = shape.class_starts[int(label)]
            f0 = int(rng.integers(0, N - fs + 1))
        else:
            f0 = shape.class_starts[int(label)]
            t0 = int(rng.integers(0, T - ts + 1))
    elif shape.moving:
        f0 = int(rng.integers(0, N - fs + 1))
        t0 = int(rng.integers(0, T - ts + 1))
    else:
        f0, t0 = shape.feature_start, shape.time_start
    mask = np.zeros((N, T), dtype=bool)
    mask[f0 : f0 + fs, t0 : t0 + ts] = True
    return mask


def embed_signal(base: np.ndarray, mask: np.ndarray, label: int, shape: ShapeSpec) -> np.ndarray:
    if base.shape != mask.shape:
        raise ParameterError(f"base {base.shape} and mask {mask.shape} differ")
    sign = 1.0 if (shape.positional or int(label) == 1) else -1.0
    return base + sign * shape.mu * mask


def reshape_series(X: np.ndarray, mode: str = "MULTIVARIATE", features: int | None = None) -> np.ndarray:
    """Row-major reshape into a 1-, 2- or ``features``-row series.

    ``MULTIVARIATE`` with ``features=None`` is the identity; pass the original
    ``N`` as ``features`` to invert a uni/bivariate reshape.
    """
    X = np.asarray(X)
    mode = str(mode).upper()
    if mode == "UNIVARIATE":
        rows = 1
    elif mode == "BIVARIATE":
        rows = 2
    elif mode == "MULTIVARIATE":
        rows = X.shape[0] if features is None else int(features)
    else:
        raise ParameterError(f"unknown reshape mode {mode!r}")
    if rows < 1 or X.size % rows:
        raise ParameterError(f"{X.size} cells cannot be split into {rows} equal rows")
    return X.reshape(rows, X.size // rows)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetSpec:
    process: ProcessParams = field(default_factory=ProcessParams)
    shape: ShapeSpec = field(default_factory=ShapeSpec)
    N: int = 50
    T: int = 50
    n_train: int = 1000
    n_test: int = 300
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.process, dict):
            self.process = ProcessParams(**self.process)
        if isinstance(self.shape, dict):
            self.shape = ShapeSpec(**self.shape)
        if self.N < 1 or self.T < 1:
            raise ParameterError("N and T must be positive")
        if self.n_train < 0 or self.n_test < 0:
            raise ParameterError("sample counts must be non-negative")
        _check_fits(self.shape, self.N, self.T)

    @classmethod
    def create(cls, family="MIDDLE_BOX", process="GAUSSIAN", N=50, T=50, mu=1.0, n_train=1000, n_test=300, seed=0, **process_kw) -> "DatasetSpec":
        return cls(ProcessParams(kind=process, **process_kw), ShapeSpec.default(family, N, T, mu), N, T, n_train, n_test, seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["process"]["narma_coefs"] = list(self.process.narma_coefs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass
class Sample:
    X: np.ndarray
    label: int
    mask: np.ndarray
    seed: int


def sample_seed(master_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(SPLITS.index(split), int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_sample(spec: DatasetSpec, label: int, seed: int) -> Sample:
    base = sample_base(spec.process, spec.N, spec.T, [seed, 0])
    mask = build_mask(spec.shape, spec.N, spec.T, label, [seed, 1])
    X = embed_signal(base, mask, label, spec.shape).astype(np.float32)
    return Sample(X, int(label), mask, int(seed))


@dataclass
class Dataset:
    """One split of a generated dataset, stored as stacked arrays."""

    spec: DatasetSpec
    split: str
    X: np.ndarray  # [S, N, T] float32
    labels: np.ndarray  # [S] uint8
    masks: np.ndarray  # [S, N, T] bool
    seeds: np.ndarray  # [S] uint64

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.X[i], int(self.labels[i]), self.masks[i], int(self.seeds[i]))

    @property
    def samples(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]

    def informative_fraction(self) -> float:
        return float(self.masks.mean()) if len(self) else 0.0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return Dataset(self.spec, self.split, self.X[idx], self.labels[idx], self.masks[idx], self.seeds[idx])

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.spec, self.split, self.X, np.asarray(labels, dtype=np.uint8), self.masks, self.seeds)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.split == other.split
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.masks, other.masks)
            and np.array_equal(self.seeds, other.seeds)
        )


def _balanced_labels(count: int, master_seed: int, split: str) -> np.ndarray:
    labels = np.zeros(count, dtype=np.uint8)
    labels[count // 2 :] = 1
    rng = np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(SPLITS.index(split), 2**31)))
    return labels[rng.permutation(count)]


def generate_split(spec: DatasetSpec, split: str) -> Dataset:
    count = spec.n_train if split == "train" else spec.n_test
    labels = _balanced_labels(count, spec.seed, split)
    X = np.empty((count, spec.N, spec.T), dtype=np.float32)
    masks = np.empty((count, spec.N, spec.T), dtype=bool)
    seeds = np.empty(count, dtype=np.uint64)
    for i in range(count):
        s = make_sample(spec, labels[i], sample_seed(spec.seed, split, i))
        X[i], masks[i], seeds[i] = s.X, s.mask, s.seed
    return Dataset(spec, split, X, labels, masks, seeds)


def generate_dataset(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Deterministic, label-balanced ``(train, test)`` splits."""
    return generate_split(spec, "train"), generate_split(spec, "test")


def resample_cells(d: Dataset, sample_idx: int, cells, seed: int) -> np.ndarray:
    """Copy of sample ``sample_idx`` with ``cells`` redrawn from the base process.

    ``cells`` is an iterable of ``(i, t)`` pairs or a boolean ``[N, T]`` mask.
    Replacement values carry no ``mu`` offset.
    """
    X = d.X[sample_idx].copy()
    sel = _cell_mask(cells, X.shape)
    if not sel.any():
        return X
    fresh = sample_base(d.spec.process, d.spec.N, d.spec.T, [int(d.seeds[sample_idx]), 2, int(seed)])
    X[sel] = fresh[sel]
    return X


def fresh_bases(d: Dataset, seed: int) -> np.ndarray:
    """Replacement draws ``[S, N, T]`` used by :func:`resample_cells` for ``seed``."""
    out = np.empty(d.X.shape, dtype=np.float32)
    for i in range(len(d)):
        out[i] = sample_base(d.spec.process, d.spec.N, d.spec.T, [int(d.seeds[i]), 2, int(seed)])
    return out


def resample_batch(d: Dataset, selection: np.ndarray, seed: int, fresh: np.ndarray | None = None) -> np.ndarray:
    """All samples at once: redraw cells where ``selection [S, N, T]`` is set.

    Row ``i`` equals ``resample_cells(d, i, selection[i], seed)``. Pass
    ``fresh = fresh_bases(d, seed)`` to reuse the draws across selections.
    """
    selection = np.asarray(selection, dtype=bool)
    if selection.shape != d.X.shape:
        raise ParameterError(f"selection shape {selection.shape} does not match data {d.X.shape}")
    if not selection.any():
        return d.X.copy()
    if fresh is None:
        fresh = fresh_bases(d, seed)
    return np.where(selection, fresh.astype(np.float32), d.X)


def _cell_mask(cells, shape) -> np.ndarray:
    arr = np.asarray(cells) if not isinstance(cells, (set, frozenset)) else np.asarray(sorted(cells))
    if arr.dtype == bool:
        if arr.shape != shape:
            raise ParameterError(f"cell mask shape {arr.shape} does not match {shape}")
        return arr
    sel = np.zeros(shape, dtype=bool)
    if arr.size == 0:
        return sel
    arr = arr.reshape(-1, 2).astype(np.int64)
    if np.any(arr < 0) or np.any(arr[:, 0] >= shape[0]) or np.any(arr[:, 1] >= shape[1]):
        raise ParameterError("cell coordinates out of bounds")
    sel[arr[:, 0], arr[:, 1]] = True
    return sel


# ---------------------------------------------------------------------------
# persistence


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def save_dataset(train: Dataset, test: Dataset, path) -> Path:
    """Write ``meta.json`` plus per-split ``.bin`` blobs under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for d in (train, test):
        for suffix, arr in (
            ("bin", np.ascontiguousarray(d.X, dtype="<f4")),
            ("labels.bin", np.ascontiguousarray(d.labels, dtype=np.uint8)),
            ("mask.bin", np.ascontiguousarray(d.masks, dtype=np.uint8)),
        ):
            name = f"{d.split}.{suffix}"
            raw = arr.tobytes()
            (path / name).write_bytes(raw)
            blobs[name] = {"bytes": len(raw), "sha256": _sha(raw)}
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "spec": train.spec.to_dict(),
        "counts": {"train": len(train), "test": len(test)},
        "seeds": {"master": int(train.spec.seed), "train": [int(s) for s in train.seeds], "test": [int(s) for s in test.seeds]},
        "informative_fraction": {"train": train.informative_fraction(), "test": test.informative_fraction()},
        "blobs": blobs,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_dataset(path) -> tuple[Dataset, Dataset]:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except OSError as exc:
        raise FormatError(f"meta.json: cannot read ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"meta.json: invalid JSON ({exc})") from exc
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise FormatError(f"format_version: unsupported value {meta.get('format_version')!r}")
    for key in ("spec", "counts", "seeds", "blobs"):
        if key not in meta:
            raise FormatError(f"{key}: missing from meta.json")
    try:
        spec = DatasetSpec.from_dict(meta["spec"])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"spec: {exc}") from exc
    cells = spec.N * spec.T
    out = []
    for split in SPLITS:
        count = int(meta["counts"][split])
        arrays = {}
        for suffix, itemsize, per in (("bin", 4, cells), ("labels.bin", 1, 1), ("mask.bin", 1, cells)):
            name = f"{split}.{suffix}"
            info = meta["blobs"].get(name)
            if info is None:
                raise FormatError(f"blobs.{name}: missing entry")
            try:
                raw = (path / name).read_bytes()
            except OSError as exc:
                raise FormatError(f"{name}: cannot read ({exc})") from exc
            expected = count * per * itemsize
            if len(raw) != expected:
                raise FormatError(f"{name}: expected {expected} bytes for {count} samples, found {len(raw)}")
            if info.get("bytes") != len(raw):
                raise FormatError(f"blobs.{name}.bytes: metadata says {info.get('bytes')}, file has {len(raw)}")
            if info.get("sha256") != _sha(raw):
                raise FormatError(f"blobs.{name}.sha256: content hash mismatch")
            arrays[suffix] = raw
        X = np.frombuffer(arrays["bin"], dtype="<f4").reshape(count, spec.N, spec.T).astype(np.float32)
        labels = np.frombuffer(arrays["labels.bin"], dtype=np.uint8).copy()
        masks = np.frombuffer(arrays["mask.bin"], dtype=np.uint8).reshape(count, spec.N, spec.T).astype(bool)
        seeds = np.asarray(meta["seeds"][split], dtype=np.uint64)
        if len(seeds) != count:
            raise FormatError(f"seeds.{split}: expected {count} entries, found {len(seeds)}")
        if np.any(labels > 1):
            raise FormatError(f"{split}.labels.bin: labels must be 0 or 1")
        out.append(Dataset(spec, split, X, labels, masks, seeds))
    return out[0], out[1]
