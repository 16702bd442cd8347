"""A small dense/convolutional network engine in numpy (float64).

Tensors are plain numpy arrays: dense layers take ``(N, d)``, spatial layers
take channels-last ``(N, H, W, C)``. ``Network.forward`` is pure and returns an output plus
a cache; ``Network.backward`` turns that cache and the loss gradient into
parameter gradients without touching the parameters. Batch-norm running
statistics are only folded in by ``Network.commit_batch_stats``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit


class CacheError(RuntimeError):
    pass


class Layer:
    kind = "layer"
    param_names: tuple[str, ...] = ()
    buffer_names: tuple[str, ...] = ()

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x: np.ndarray, train: bool):
        raise NotImplementedError

    def backward(self, cache, dout: np.ndarray) -> tuple[np.ndarray, dict]:
        raise NotImplementedError

    def init(self, rng: np.random.Generator, scheme: str) -> None:
        pass

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.param_names}

    def buffers(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.buffer_names}

    def describe(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.describe().items() if k != "kind")
        return f"{type(self).__name__}({args})"


def _uniform_init(rng, shape, fan_in, fan_out, scheme):
    if scheme == "glorot":
        limit = np.sqrt(6.0 / (fan_in + fan_out))
    elif scheme == "he":
        limit = np.sqrt(6.0 / fan_in)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return rng.uniform(-limit, limit, size=shape)


class Dense(Layer):
    kind = "dense"
    param_names = ("W", "b")

    def __init__(self, d_in: int, d_out: int):
        self.d_in, self.d_out = int(d_in), int(d_out)
        self.W = np.zeros((self.d_out, self.d_in))
        self.b = np.zeros(self.d_out)

    def output_shape(self, in_shape):
        if in_shape != (self.d_in,):
            raise ValueError(f"expects input ({self.d_in},), got {in_shape}")
        return (self.d_out,)

    def init(self, rng, scheme):
        self.W = _uniform_init(rng, self.W.shape, self.d_in, self.d_out, scheme)
        self.b = np.zeros(self.d_out)

    def forward(self, x, train):
        return x @ self.W.T + self.b, x

    def backward(self, cache, dout):
        x = cache
        return dout @ self.W, {"W": dout.T @ x, "b": dout.sum(axis=0)}

    def describe(self):
        return {"kind": self.kind, "d_in": self.d_in, "d_out": self.d_out}


class Conv2d(Layer):
    """3x3 convolution, stride 1, zero 'same' padding. Weights are (out, in, 3, 3)."""

    kind = "conv2d"
    param_names = ("W", "b")

    def __init__(self, c_in: int, c_out: int):
        self.c_in, self.c_out = int(c_in), int(c_out)
        self.W = np.zeros((self.c_out, self.c_in, 3, 3))
        self.b = np.zeros(self.c_out)

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.c_in:
            raise ValueError(f"expects input (H, W, {self.c_in}), got {in_shape}")
        return tuple(in_shape[:2]) + (self.c_out,)

    def init(self, rng, scheme):
        self.W = _uniform_init(rng, self.W.shape, self.c_in * 9, self.c_out * 9, scheme)
        self.b = np.zeros(self.c_out)

    @staticmethod
    def _im2col(x: np.ndarray) -> np.ndarray:
        """(N, H, W, C) -> (N*H*W, 9*C), patch order (ki, kj, c)."""
        n, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.concatenate([xp[:, i:i + h, j:j + w, :] for i in range(3) for j in range(3)], axis=-1)
        return cols.reshape(n * h * w, 9 * c)

    def _wmat(self) -> np.ndarray:
        return self.W.transpose(0, 2, 3, 1).reshape(self.c_out, -1)

    def forward(self, x, train):
        n, h, w, _ = x.shape
        cols = self._im2col(x)
        out = cols @ self._wmat().T + self.b
        return out.reshape(n, h, w, self.c_out), (cols, x.shape)

    def backward(self, cache, dout, need_dx=True):
        cols, (n, h, w, c) = cache
        d2 = dout.reshape(-1, self.c_out)
        dw = (d2.T @ cols).reshape(self.c_out, 3, 3, c).transpose(0, 3, 1, 2)
        grads = {"W": dw, "b": d2.sum(axis=0)}
        if not need_dx:
            return None, grads
        # input gradient = 'same' correlation of dout with the flipped, transposed kernel
        w_flip = self.W[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
        dx = self._im2col(dout) @ w_flip.T
        return dx.reshape(n, h, w, c), grads

    def describe(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out}


def _blocks(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c)


class MaxPool2x2(Layer):
    """2x2 max pooling; odd sizes are padded so output dims are ceil(H/2), ceil(W/2)."""

    kind = "maxpool2x2"

    def output_shape(self, in_shape):
        h, w, c = in_shape
        return (-(-h // 2), -(-w // 2), c)

    def forward(self, x, train):
        n, h, w, c = x.shape
        h2, w2 = -(-h // 2), -(-w // 2)
        if (h, w) != (2 * h2, 2 * w2):
            x = np.pad(x, ((0, 0), (0, 2 * h2 - h), (0, 2 * w2 - w), (0, 0)), constant_values=-np.inf)
        b = _blocks(x)
        out = b.max(axis=(2, 4))
        # route the gradient to the first maximal entry of each window
        hit = b == out[:, :, None, :, None, :]
        first = np.zeros_like(hit)
        taken = np.zeros_like(out, dtype=bool)
        for di in (0, 1):
            for dj in (0, 1):
                pick = hit[:, :, di, :, dj] & ~taken
                first[:, :, di, :, dj] = pick
                taken |= pick
        return out, (first, (h, w))

    def backward(self, cache, dout):
        first, (h, w) = cache
        dx = first * dout[:, :, None, :, None, :]
        n, h2, _, w2, _, c = dx.shape
        return dx.reshape(n, 2 * h2, 2 * w2, c)[:, :h, :w], {}


class AvgPool2x2(Layer):
    """2x2 average pooling on even spatial sizes."""

    kind = "avgpool2x2"

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if h % 2 or w % 2:
            raise ValueError(f"average pooling needs even spatial dims, got {in_shape}")
        return (h // 2, w // 2, c)

    def forward(self, x, train):
        return _blocks(x).mean(axis=(2, 4)), None

    def backward(self, cache, dout):
        return dout.repeat(2, axis=1).repeat(2, axis=2) / 4.0, {}


class Upsample2x2(Layer):
    """Nearest-neighbour upsampling by 2 in both spatial dims."""

    kind = "upsample2x2"

    def output_shape(self, in_shape):
        h, w, c = in_shape
        return (2 * h, 2 * w, c)

    def forward(self, x, train):
        return x.repeat(2, axis=1).repeat(2, axis=2), None

    def backward(self, cache, dout):
        return _blocks(dout).sum(axis=(2, 4)), {}


class BatchNorm(Layer):
    """Batch normalization per feature (dense) or per channel (spatial, last axis)."""

    kind = "batchnorm"
    param_names = ("gamma", "beta")
    buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.9):
        self.num_features = int(num_features)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = np.ones(self.num_features)
        self.beta = np.zeros(self.num_features)
        self.running_mean = np.zeros(self.num_features)
        self.running_var = np.ones(self.num_features)

    def output_shape(self, in_shape):
        if in_shape[-1] != self.num_features:
            raise ValueError(f"expects {self.num_features} features/channels on the last axis, got {in_shape}")
        return in_shape

    def init(self, rng, scheme):
        self.gamma = np.ones(self.num_features)
        self.beta = np.zeros(self.num_features)

    def forward(self, x, train):
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        m = x.size // self.num_features
        return xhat * self.gamma + self.beta, (xhat, inv_std, train, mean, var, m)

    def backward(self, cache, dout):
        xhat, inv_std, train, _, _, m = cache
        axes = tuple(range(dout.ndim - 1))
        grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
        dxhat = dout * self.gamma
        if not train:
            return dxhat * inv_std, grads
        s1 = dxhat.sum(axis=axes)
        s2 = (dxhat * xhat).sum(axis=axes)
        return inv_std / m * (m * dxhat - s1 - xhat * s2), grads

    def commit(self, cache) -> None:
        _, _, train, mean, var, m = cache
        if not train:
            return
        unbiased = var * m / max(m - 1, 1)
        self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
        self.running_var = self.momentum * self.running_var + (1 - self.momentum) * unbiased

    def describe(self):
        return {"kind": self.kind, "num_features": self.num_features, "eps": self.eps,
                "momentum": self.momentum}


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn: str):
        if fn not in ("relu", "sigmoid"):
            raise ValueError(f"unknown activation {fn!r}")
        self.fn = fn

    def forward(self, x, train):
        if self.fn == "relu":
            return np.maximum(x, 0.0), x > 0
        y = expit(x)
        return y, y

    def backward(self, cache, dout):
        if self.fn == "relu":
            return dout * cache, {}
        return dout * cache * (1.0 - cache), {}

    def describe(self):
        return {"kind": self.kind, "fn": self.fn}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train):
        return x.reshape(len(x), -1), x.shape

    def backward(self, cache, dout):
        return dout.reshape(cache), {}


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape: Sequence[int]):
        self.shape = tuple(int(s) for s in shape)

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ValueError(f"cannot reshape {in_shape} to {self.shape}")
        return self.shape

    def forward(self, x, train):
        return x.reshape((len(x),) + self.shape), x.shape

    def backward(self, cache, dout):
        return dout.reshape(cache), {}

    def describe(self):
        return {"kind": self.kind, "shape": list(self.shape)}


LAYER_TYPES = {
    "dense": lambda d: Dense(d["d_in"], d["d_out"]),
    "conv2d": lambda d: Conv2d(d["c_in"], d["c_out"]),
    "maxpool2x2": lambda d: MaxPool2x2(),
    "avgpool2x2": lambda d: AvgPool2x2(),
    "upsample2x2": lambda d: Upsample2x2(),
    "batchnorm": lambda d: BatchNorm(d["num_features"], d.get("eps", 1e-5), d.get("momentum", 0.9)),
    "activation": lambda d: Activation(d["fn"]),
    "flatten": lambda d: Flatten(),
    "reshape": lambda d: Reshape(d["shape"]),
}


@dataclass
class ForwardCache:
    version: int
    train: bool
    layers: list


class Network:
    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int]):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.version = 0
        shape = self.input_shape
        self.shapes = [shape]
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ValueError as exc:
                raise ValueError(f"layer {i} ({layer!r}): {exc}") from None
            self.shapes.append(shape)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def initialize(self, rng: np.random.Generator) -> Network:
        """He-uniform init, Glorot-uniform for layers feeding a sigmoid."""
        for i, layer in enumerate(self.layers):
            nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
            scheme = "glorot" if isinstance(nxt, Activation) and nxt.fn == "sigmoid" else "he"
            layer.init(rng, scheme)
        self.version += 1
        return self

    @property
    def n_params(self) -> int:
        return sum(p.size for _, _, p in self.parameters())

    def parameters(self) -> list[tuple[int, str, np.ndarray]]:
        return [(i, k, v) for i, layer in enumerate(self.layers) for k, v in layer.params().items()]

    def forward(self, x: np.ndarray, train: bool = False) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"layer 0 ({self.layers[0]!r}): input shape {x.shape[1:]} != {self.input_shape}")
        caches = []
        for i, layer in enumerate(self.layers):
            x, c = layer.forward(x, train)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite activations after layer {i} ({layer!r})")
            caches.append(c)
        return x, ForwardCache(self.version, train, caches)

    def predict(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        outs = [self.forward(x[i:i + batch_size], train=False)[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0,) + self.output_shape)

    def backward(self, cache: ForwardCache | None, dout: np.ndarray) -> list[dict[str, np.ndarray]]:
        """Gradients for every layer's parameters, in layer order."""
        if cache is None or not isinstance(cache, ForwardCache):
            raise CacheError("backward needs the cache returned by forward")
        if cache.version != self.version:
            raise CacheError("stale cache: parameters changed since the forward pass")
        grads: list[dict] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and isinstance(layer, Conv2d):
                dout, g = layer.backward(cache.layers[i], dout, need_dx=False)
            else:
                dout, g = layer.backward(cache.layers[i], dout)
            grads[i] = g
        return grads

    def commit_batch_stats(self, cache: ForwardCache) -> None:
        for layer, c in zip(self.layers, cache.layers):
            if isinstance(layer, BatchNorm):
                layer.commit(c)
        self.version += 1

    def apply_update(self, optimizer: Adam, grads: list[dict[str, np.ndarray]]) -> None:
        params = [v for _, _, v in self.parameters()]
        flat = [grads[i][k] for i, k, _ in self.parameters()]
        optimizer.step(params, flat)
        self.version += 1

    def describe(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [l.describe() for l in self.layers]}

    @classmethod
    def from_description(cls, desc: dict) -> Network:
        layers = [LAYER_TYPES[d["kind"]](d) for d in desc["layers"]]
        return cls(layers, desc["input_shape"])

    def arrays(self) -> list[tuple[int, str, np.ndarray]]:
        """Parameters then buffers, per layer, in declaration order."""
        out = []
        for i, layer in enumerate(self.layers):
            for k in layer.param_names + layer.buffer_names:
                out.append((i, k, getattr(layer, k)))
        return out


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float((diff ** 2).mean()), 2.0 * diff / diff.size


class Adam:
    """Adam with bias correction; lr is multiplied by (1 - decay) every epoch."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, decay: float = 0.0):
        if not 0.0 <= decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")
        self.base_lr = float(lr)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.decay = float(decay)
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def set_epoch(self, epoch: int) -> None:
        self.lr = self.base_lr * (1.0 - self.decay) ** epoch

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """Update ``params`` in place."""
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ValueError("parameter list does not match optimizer state")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + flat little-endian float64 blob
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "yieldpaint-network/1"


def save_checkpoint(net: Network, path, meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.json`` and ``<path>.bin``; returns both paths."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path, blob_path = path.with_suffix(".json"), path.with_suffix(".bin")
    entries, chunks, offset = [], [], 0
    for i, name, arr in net.arrays():
        entries.append({"layer": i, "name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").ravel())
        offset += arr.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "network": net.describe(),
        "arrays": entries,
        "n_values": offset,
        "blob": blob_path.name,
        "meta": meta or {},
    }
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    blob_path.write_bytes(blob.astype("<f8").tobytes())
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path, blob_path


def load_checkpoint(path) -> tuple[Network, dict]:
    path = Path(path)
    manifest_path = path if path.suffix == ".json" else path.with_suffix(".json")
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{manifest_path}: unsupported checkpoint format {manifest.get('format')!r}")
    blob_path = manifest_path.parent / manifest["blob"]
    if not blob_path.exists():
        raise FileNotFoundError(f"checkpoint parameters not found: {blob_path}")
    blob = np.frombuffer(blob_path.read_bytes(), dtype="<f8")
    if blob.size != manifest["n_values"]:
        raise ValueError(f"{blob_path}: expected {manifest['n_values']} values, found {blob.size}")
    net = Network.from_description(manifest["network"])
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = blob[e["offset"]:e["offset"] + n].astype(np.float64).reshape(e["shape"])
        setattr(net.layers[e["layer"]], e["name"], arr)
    net.version += 1
    return net, manifest["meta"]
