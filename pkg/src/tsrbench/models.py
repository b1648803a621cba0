"""Small time-series classifiers built on :mod:`tsrbench.tensor`.

All models take ``X`` shaped ``[N, T]`` (features by time) or a batch
``[B, N, T]`` and return class scores ``[C]`` / ``[B, C]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .errors import DimensionError, FormatError, ParameterError, TrainingError
from .tensor import Graph, Tensor

ARCHITECTURES = ("LSTM", "TCN", "TRANSFORMER")
MODEL_FORMAT_VERSION = 1


@dataclass
class ModelSpec:
    architecture: str
    input_features: int
    time_steps: int
    num_classes: int = 2
    hidden_size: int = 64
    layers: int | None = None
    heads: int = 4
    kernel_size: int = 7
    dilations: Sequence[int] | None = None
    ff_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.architecture = str(self.architecture).upper()
        if self.architecture not in ARCHITECTURES:
            raise ParameterError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.num_classes < 2:
            raise ParameterError("num_classes must be at least 2")
        if self.input_features < 1 or self.time_steps < 1:
            raise ParameterError("input_features and time_steps must be positive")
        if self.hidden_size < 1:
            raise ParameterError("hidden_size must be positive")
        if self.layers is None:
            self.layers = len(self.dilations) if self.dilations is not None else (3 if self.architecture == "TCN" else 1)
        if self.layers < 1:
            raise ParameterError("layers must be positive")
        if self.architecture == "TCN":
            if self.dilations is None:
                self.dilations = [2**i for i in range(self.layers)]
            self.dilations = [int(d) for d in self.dilations]
            if len(self.dilations) != self.layers:
                raise ParameterError("dilation schedule length must equal layers")
            if any(d < 1 or d & (d - 1) for d in self.dilations):
                raise ParameterError("dilations must be powers of 2")
            if any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
                raise ParameterError("dilations must be strictly increasing")
            if self.kernel_size < 1:
                raise ParameterError("kernel_size must be positive")
        elif self.dilations is not None:
            self.dilations = [int(d) for d in self.dilations]
        if self.architecture == "TRANSFORMER":
            if self.heads < 1 or self.hidden_size % self.heads:
                raise ParameterError("hidden_size must be divisible by heads")
            if self.ff_size is None:
                self.ff_size = 2 * self.hidden_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    optimizer: str = "ADAM"
    seed: int = 0
    early_stop_accuracy: float = 0.99

    def __post_init__(self):
        self.optimizer = str(self.optimizer).upper()
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ParameterError("learning_rate must be a non-negative finite number")
        if self.epochs < 1:
            raise ParameterError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be at least 1")
        if self.optimizer not in ("SGD", "ADAM"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")


class Model:
    """Base class: owns named parameters and the training history."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor] | None = None):
        self.spec = spec
        self.history: list[dict] = []
        if params is None:
            rng = np.random.default_rng(spec.seed)
            params = {}
            for name, shape, fan_in in self._layout():
                bound = 1.0 / math.sqrt(fan_in) if fan_in else 0.0
                if fan_in == 0:
                    data = np.ones(shape) if name.endswith("gamma") else np.zeros(shape)
                else:
                    data = rng.uniform(-bound, bound, size=shape)
                params[name] = Tensor(data, requires_grad=True, name=name)
        self.params = params

    # subclasses provide (name, shape, fan_in); fan_in 0 marks norm params
    def _layout(self) -> list[tuple[str, tuple, int]]:
        raise NotImplementedError

    def _forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "Model":
        """Copy of the model with parameters cast to ``dtype``."""
        params = {k: Tensor(v.data, requires_grad=True, dtype=dtype, name=k) for k, v in self.params.items()}
        out = type(self)(self.spec, params)
        out.history = [dict(h) for h in self.history]
        return out

    def forward(self, X) -> Tensor:
        x = X if isinstance(X, Tensor) else Tensor(X, dtype=self.dtype)
        n, t = self.spec.input_features, self.spec.time_steps
        if x.shape[-2:] != (n, t) or x.ndim not in (2, 3):
            raise DimensionError(f"expected input [N={n}, T={t}] or [B, {n}, {t}], got {x.shape}")
        single = x.ndim == 2
        if single:
            x = tn.reshape(x, (1, n, t))
        out = self._forward(x)
        return tn.reshape(out, (self.spec.num_classes,)) if single else out

    __call__ = forward

    def logits(self, X, chunk_size: int = 512) -> np.ndarray:
        """Forward pass without recording, as a plain array."""
        X = np.asarray(X, dtype=self.dtype)
        with _no_graph():
            if X.ndim == 2:
                return self.forward(X).data
            parts = [self.forward(X[i : i + chunk_size]).data for i in range(0, len(X), chunk_size)]
        return np.concatenate(parts) if parts else np.zeros((0, self.spec.num_classes), self.dtype)


class _no_graph:
    """Suspend recording on the calling thread."""

    def __enter__(self):
        self._saved = list(tn._stack())
        tn._stack().clear()

    def __exit__(self, *exc):
        tn._stack().extend(self._saved)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


class TCNClassifier(Model):
    """Stack of dilated causal convolutions; classifies from the last step."""

    def _layout(self):
        s = self.spec
        out = []
        c_in = s.input_features
        for i, _ in enumerate(s.dilations):
            out.append((f"tcn{i}.w", (s.hidden_size, c_in, s.kernel_size), c_in * s.kernel_size))
            out.append((f"tcn{i}.b", (s.hidden_size, 1), c_in * s.kernel_size))
            if c_in != s.hidden_size:
                out.append((f"tcn{i}.res_w", (s.hidden_size, c_in, 1), c_in))
                out.append((f"tcn{i}.res_b", (s.hidden_size, 1), c_in))
            c_in = s.hidden_size
        out.append(("head.w", (s.hidden_size, s.num_classes), s.hidden_size))
        out.append(("head.b", (s.num_classes,), s.hidden_size))
        return out

    def _forward(self, x):
        p = self.params
        h = x
        for i, d in enumerate(self.spec.dilations):
            y = tn.relu(tn.conv1d_dilated_causal(h, p[f"tcn{i}.w"], d) + p[f"tcn{i}.b"])
            if f"tcn{i}.res_w" in p:
                res = tn.conv1d_dilated_causal(h, p[f"tcn{i}.res_w"], 1) + p[f"tcn{i}.res_b"]
            else:
                res = h
            h = tn.relu(y + res)
        last = h[:, :, -1]
        return _linear(last, p["head.w"], p["head.b"])


class LSTMClassifier(Model):
    """LSTM over the time axis; classifies from the final hidden state."""

    def _layout(self):
        s = self.spec
        hid = s.hidden_size
        out = []
        n_in = s.input_features
        for layer in range(s.layers):
            fan = n_in + hid
            out.append((f"lstm{layer}.w_x", (n_in, 4 * hid), fan))
            out.append((f"lstm{layer}.w_h", (hid, 4 * hid), fan))
            out.append((f"lstm{layer}.b", (4 * hid,), fan))
            n_in = hid
        out.append(("head.w", (hid, s.num_classes), hid))
        out.append(("head.b", (s.num_classes,), hid))
        return out

    def _forward(self, x):
        p = self.params
        hid = self.spec.hidden_size
        seq = tn.transpose(x, (0, 2, 1))  # [B, T, N]
        steps = seq.shape[1]
        for layer in range(self.spec.layers):
            # gate pre-activations from the input for all steps at once
            xw = seq @ p[f"lstm{layer}.w_x"] + p[f"lstm{layer}.b"]
            h = c = None
            outs = []
            for t in range(steps):
                z = xw[:, t, :]
                if h is not None:
                    z = z + h @ p[f"lstm{layer}.w_h"]
                i = tn.sigmoid(z[:, :hid])
                f = tn.sigmoid(z[:, hid : 2 * hid])
                g = tn.tanh(z[:, 2 * hid : 3 * hid])
                o = tn.sigmoid(z[:, 3 * hid :])
                c = i * g if c is None else f * c + i * g
                h = o * tn.tanh(c)
                outs.append(h)
            if layer + 1 < self.spec.layers:
                seq = tn.stack(outs, axis=1)
        return _linear(h, p["head.w"], p["head.b"])


def positional_encoding(steps: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding ``[T, D]``."""
    pos = np.arange(steps)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((steps, dim))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: dim // 2])
    return pe


class TransformerClassifier(Model):
    """Post-norm self-attention encoder with time-mean pooling."""

    def _layout(self):
        s = self.spec
        dm, ff = s.hidden_size, s.ff_size
        out = [("embed.w", (s.input_features, dm), s.input_features), ("embed.b", (dm,), s.input_features)]
        for layer in range(s.layers):
            pre = f"enc{layer}"
            for name in ("q", "k", "v", "o"):
                out.append((f"{pre}.{name}_w", (dm, dm), dm))
                out.append((f"{pre}.{name}_b", (dm,), dm))
            out.append((f"{pre}.ln1_gamma", (dm,), 0))
            out.append((f"{pre}.ln1_beta", (dm,), 0))
            out.append((f"{pre}.ff1_w", (dm, ff), dm))
            out.append((f"{pre}.ff1_b", (ff,), dm))
            out.append((f"{pre}.ff2_w", (ff, dm), ff))
            out.append((f"{pre}.ff2_b", (dm,), ff))
            out.append((f"{pre}.ln2_gamma", (dm,), 0))
            out.append((f"{pre}.ln2_beta", (dm,), 0))
        out.append(("head.w", (dm, s.num_classes), dm))
        out.append(("head.b", (s.num_classes,), dm))
        return out

    def _forward(self, x):
        p, s = self.params, self.spec
        dm, heads = s.hidden_size, s.heads
        dh = dm // heads
        bsz, _, steps = x.shape
        pe = positional_encoding(steps, dm).astype(self.dtype)
        h = _linear(tn.transpose(x, (0, 2, 1)), p["embed.w"], p["embed.b"]) + pe
        scale = 1.0 / math.sqrt(dh)

        def split(z):
            return tn.transpose(tn.reshape(z, (bsz, steps, heads, dh)), (0, 2, 1, 3))

        for layer in range(s.layers):
            pre = f"enc{layer}"
            q = split(_linear(h, p[f"{pre}.q_w"], p[f"{pre}.q_b"]))
            k = split(_linear(h, p[f"{pre}.k_w"], p[f"{pre}.k_b"]))
            v = split(_linear(h, p[f"{pre}.v_w"], p[f"{pre}.v_b"]))
            att = tn.softmax((q @ tn.transpose(k, (0, 1, 3, 2))) * scale, axis=-1)
            ctx = tn.reshape(tn.transpose(att @ v, (0, 2, 1, 3)), (bsz, steps, dm))
            h = tn.layer_norm(h + _linear(ctx, p[f"{pre}.o_w"], p[f"{pre}.o_b"]), p[f"{pre}.ln1_gamma"], p[f"{pre}.ln1_beta"])
            ff = _linear(tn.relu(_linear(h, p[f"{pre}.ff1_w"], p[f"{pre}.ff1_b"])), p[f"{pre}.ff2_w"], p[f"{pre}.ff2_b"])
            h = tn.layer_norm(h + ff, p[f"{pre}.ln2_gamma"], p[f"{pre}.ln2_beta"])
        pooled = tn.mean(h, axis=1)
        return _linear(pooled, p["head.w"], p["head.b"])


_CLASSES = {"LSTM": LSTMClassifier, "TCN": TCNClassifier, "TRANSFORMER": TransformerClassifier}


def build_model(spec: ModelSpec) -> Model:
    """Instantiate and deterministically initialize a model from its spec."""
    if not isinstance(spec, ModelSpec):
        spec = ModelSpec(**spec)
    return _CLASSES[spec.architecture](spec)


def forward(model: Model, X) -> Tensor:
    return model.forward(X)


# ---------------------------------------------------------------------------
# optimization


class SGD:
    def __init__(self, params: list[Tensor], lr: float):
        self.params, self.lr = params, lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam(SGD):
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def _xy(data):
    return np.asarray(data.X), np.asarray(data.labels)


def accuracy(model: Model, data) -> float:
    """Fraction of samples whose argmax score equals the label."""
    X, y = _xy(data)
    if len(y) == 0:
        raise ParameterError("accuracy of an empty dataset is undefined")
    pred = model.logits(X).argmax(axis=1)
    return float(np.mean(pred == y))


def train(model: Model, train_data, test_data, cfg: TrainConfig | None = None, log=None) -> Model:
    """Minimize mean cross-entropy; history gets one row per epoch.

    Stops as soon as test accuracy reaches ``cfg.early_stop_accuracy``.
    """
    cfg = cfg or TrainConfig()
    X, y = _xy(train_data)
    if len(y) == 0 or len(test_data.labels) == 0:
        raise ParameterError("train and test datasets must be non-empty")
    X = X.astype(model.dtype)
    params = model.parameters()
    opt = SGD(params, cfg.learning_rate) if cfg.optimizer == "SGD" else Adam(params, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    start = len(model.history)
    for epoch in range(start, start + cfg.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for lo in range(0, len(y), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            opt.zero_grad()
            with Graph() as g:
                loss = tn.softmax_cross_entropy(model.forward(X[idx]), y[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError("non-finite training loss", epoch)
            g.backward(loss)
            opt.step()
            total += value * len(idx)
        acc = accuracy(model, test_data)
        row = {"epoch": epoch, "loss": total / len(y), "accuracy": acc}
        model.history.append(row)
        if log is not None:
            log(row)
        if acc >= cfg.early_stop_accuracy:
            break
    return model


def input_gradient(model: Model, X, c) -> np.ndarray:
    """dS_c(X)/dX for one sample ``[N, T]`` or a batch ``[B, N, T]``.

    ``c`` may be an int or one class per batch row. Parameter gradients are
    not touched.
    """
    xs = np.asarray(X, dtype=model.dtype)
    single = xs.ndim == 2
    xb = xs[None] if single else xs
    classes = np.broadcast_to(np.asarray(c, dtype=np.int64), (len(xb),))
    if np.any(classes < 0) or np.any(classes >= model.spec.num_classes):
        raise IndexError(f"class index out of range [0, {model.spec.num_classes})")
    x = Tensor(xb, dtype=model.dtype)
    pick = np.zeros((len(xb), model.spec.num_classes), dtype=model.dtype)
    pick[np.arange(len(xb)), classes] = 1
    with Graph(wrt=[x]) as g:
        score = tn.sum(model.forward(x) * pick)
    g.backward(score)
    grad = x.grad
    return grad[0] if single else grad


# ---------------------------------------------------------------------------
# persistence


def save_model(model: Model, path) -> Path:
    """Write ``model.json`` and ``weights.bin`` (little-endian f32) under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest, blobs, offset = [], [], 0
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "parameters": manifest,
        "weights_bytes": offset,
        "history": model.history,
    }
    (path / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    (path / "weights.bin").write_bytes(b"".join(blobs))
    return path


def load_model(path) -> Model:
    path = Path(path)
    try:
        meta = json.loads((path / "model.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read model.json: {exc}") from exc
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise FormatError(f"format_version: unsupported value {meta.get('format_version')!r}")
    try:
        blob = (path / "weights.bin").read_bytes()
    except OSError as exc:
        raise FormatError(f"weights.bin: cannot read ({exc})") from exc
    if len(blob) != meta.get("weights_bytes"):
        raise FormatError(f"weights_bytes: expected {meta.get('weights_bytes')}, file has {len(blob)}")
    try:
        spec = ModelSpec(**meta["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"spec: {exc}") from exc
    params = {}
    for entry in meta["parameters"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        lo = entry["offset"]
        if lo + 4 * count > len(blob):
            raise FormatError(f"parameters.{entry['name']}: offset beyond end of weights.bin")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=lo).reshape(shape)
        params[entry["name"]] = Tensor(arr.astype(np.float32), requires_grad=True, name=entry["name"])
    model = _CLASSES[spec.architecture](spec, params)
    expected = [name for name, _, _ in model._layout()]
    if list(params) != expected:
        raise FormatError("parameters: manifest does not match the architecture layout")
    model.history = list(meta.get("history", []))
    return model
