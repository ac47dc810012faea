"""Small MLP velocity field v(x_t, t, y) with hand-written reverse mode.

Input to the MLP is the concatenation of the state, Fourier features of the
time and a learned class embedding. The table has ``num_classes + 1`` rows;
the last row is the null (unconditional) label used by guidance.

Parameters live in one flat float64 vector. Each weight matrix is a view into
it, so optimizers update ``model.params`` in place.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DFM1"


class CheckpointError(ValueError):
    """File is not a readable checkpoint (bad magic, truncated, inconsistent)."""


@dataclass
class GradientTape:
    loss: float
    gradient: np.ndarray
    report: object = None


def time_frequencies(k: int) -> np.ndarray:
    return np.geomspace(1.0, 100.0, k) if k > 1 else np.ones(1)


def _silu(z):
    s = 0.5 + 0.5 * np.tanh(0.5 * z)
    return z * s, s


class VelocityField:
    def __init__(self, input_dim, hidden_dims, num_classes, time_features, class_embed_dim, params=None):
        dims = [input_dim, num_classes, time_features, class_embed_dim, *hidden_dims]
        if len(hidden_dims) == 0 or any(int(v) < 1 for v in dims):
            raise ValueError(f"all model dimensions must be >= 1, got {dims}")
        self.input_dim = int(input_dim)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.num_classes = int(num_classes)
        self.time_features = int(time_features)
        self.class_embed_dim = int(class_embed_dim)
        self.freqs = time_frequencies(self.time_features)

        self.shapes = [("embed", (self.num_classes + 1, self.class_embed_dim))]
        widths = [self.feature_dim, *self.hidden_dims, self.input_dim]
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            self.shapes.append((f"W{i}", (fan_in, fan_out)))
            self.shapes.append((f"b{i}", (fan_out,)))
        n = sum(int(np.prod(s)) for _, s in self.shapes)
        if params is None:
            params = np.zeros(n)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {params.shape}")
        self.params = params
        self._bind()

    @property
    def feature_dim(self):
        return self.input_dim + 2 * self.time_features + self.class_embed_dim

    @property
    def null_class(self):
        return self.num_classes

    @property
    def num_layers(self):
        return len(self.hidden_dims) + 1

    def _bind(self):
        self.tensors = self.views(self.params)

    def views(self, flat):
        """Named tensor views into a flat vector laid out like ``params``."""
        out = {}
        offset = 0
        for name, shape in self.shapes:
            size = int(np.prod(shape))
            out[name] = flat[offset:offset + size].reshape(shape)
            offset += size
        return out

    def config(self):
        return dict(input_dim=self.input_dim, hidden_dims=list(self.hidden_dims),
                    num_classes=self.num_classes, time_features=self.time_features,
                    class_embed_dim=self.class_embed_dim)

    def copy(self):
        return VelocityField(**self.config(), params=self.params.copy())

    def with_params(self, params):
        return VelocityField(**self.config(), params=params)

    # -- forward / backward -------------------------------------------------

    def _inputs(self, x_t, t, y):
        x = np.asarray(x_t, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        n, d = x.shape
        if d != self.input_dim:
            raise ValueError(f"state has dimension {d}, model expects {self.input_dim}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        if y is None:
            y = self.null_class
        y = np.broadcast_to(np.asarray(y), (n,))
        if not np.issubdtype(y.dtype, np.integer):
            if np.any(y != np.round(y)):
                raise ValueError("class labels must be integers")
            y = y.astype(np.int64)
        if np.any(y < 0) or np.any(y > self.null_class):
            raise ValueError(f"label out of range [0, {self.null_class}]: {np.unique(y)}")
        return x, t, y, single

    def _forward(self, x, t, y, keep):
        p = self.tensors
        phase = t[:, None] * self.freqs[None, :]
        h = np.concatenate([x, np.sin(phase), np.cos(phase), p["embed"][y]], axis=1)
        cache = []
        for i in range(self.num_layers - 1):
            z = h @ p[f"W{i}"] + p[f"b{i}"]
            a, s = _silu(z)
            if keep:
                cache.append((h, z, s))
            h = a
        out = h @ p[f"W{self.num_layers - 1}"] + p[f"b{self.num_layers - 1}"]
        if keep:
            cache.append((h, None, None))
        return out, cache

    def forward(self, x_t, t, y):
        """Velocity estimate at state(s) ``x_t``; ``y=None`` means the null label."""
        x, t, y, single = self._inputs(x_t, t, y)
        out, _ = self._forward(x, t, y, keep=False)
        return out[0] if single else out

    __call__ = forward

    def backward(self, cache, y, d_out):
        """Gradient of a scalar with respect to all parameters, given dL/d(output)."""
        p = self.tensors
        grad = np.zeros_like(self.params)
        g = self.views(grad)
        delta = d_out
        for i in reversed(range(self.num_layers)):
            h, _, _ = cache[i]
            g[f"W{i}"][...] = h.T @ delta
            g[f"b{i}"][...] = delta.sum(axis=0)
            dh = delta @ p[f"W{i}"].T
            if i > 0:
                _, z, s = cache[i - 1]
                delta = dh * (s * (1.0 + z * (1.0 - s)))
        e0 = self.input_dim + 2 * self.time_features
        onehot = np.zeros((self.num_classes + 1, y.shape[0]))
        onehot[y, np.arange(y.shape[0])] = 1.0
        g["embed"][...] = onehot @ dh[:, e0:]
        return grad


def init(input_dim, hidden_dims, num_classes, time_features, class_embed_dim, seed) -> VelocityField:
    """Fan-in scaled uniform weights, zero biases, unit-uniform embeddings."""
    model = VelocityField(input_dim, hidden_dims, num_classes, time_features, class_embed_dim)
    rng = np.random.default_rng(seed)
    for name, shape in model.shapes:
        if name == "embed":
            model.tensors[name][...] = rng.uniform(-1.0, 1.0, size=shape)
        elif name.startswith("W"):
            bound = 1.0 / np.sqrt(shape[0])
            model.tensors[name][...] = rng.uniform(-bound, bound, size=shape)
    return model


def loss_and_gradient(model: VelocityField, objective) -> GradientTape:
    """Loss and exact parameter gradient for a batch objective.

    ``objective`` exposes the batch inputs ``x_t``, ``t``, ``y`` and a method
    ``value_and_grad(v_hat) -> (report, dloss_dvhat)`` where ``report.total``
    is the scalar loss.
    """
    x, t, y, _ = model._inputs(objective.x_t, objective.t, objective.y)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    out, cache = model._forward(x, t, y, keep=True)
    report, d_out = objective.value_and_grad(out)
    return GradientTape(loss=float(report.total), gradient=model.backward(cache, y, d_out), report=report)


def loss_value(model: VelocityField, objective):
    out = model.forward(objective.x_t, objective.t, objective.y)
    report, _ = objective.value_and_grad(out)
    return report


# -- checkpoints ---------------------------------------------------------------

def dumps(model: VelocityField) -> bytes:
    header = [model.input_dim, len(model.hidden_dims), *model.hidden_dims,
              model.num_classes, model.time_features, model.class_embed_dim]
    return b"".join([
        MAGIC,
        struct.pack(f"<{len(header)}I", *header),
        struct.pack("<Q", model.params.size),
        model.params.astype("<f8").tobytes(),
    ])


def loads(blob: bytes) -> VelocityField:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError("truncated checkpoint header")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    input_dim, num_hidden = take("<2I")
    hidden = take(f"<{num_hidden}I")
    num_classes, time_features, embed = take("<3I")
    (count,) = take("<Q")
    if len(blob) - pos != 8 * count:
        raise CheckpointError(f"truncated checkpoint: expected {count} parameters")
    params = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
    try:
        return VelocityField(input_dim, hidden, num_classes, time_features, embed, params=params)
    except ValueError as exc:
        raise CheckpointError(f"inconsistent checkpoint: {exc}") from exc


def save(model: VelocityField, path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path) -> VelocityField:
    return loads(Path(path).read_bytes())
