"""Minimal dense-network substrate with hand-rolled backpropagation.

Layers are fully connected with optional batch normalization and one of
three activations (linear, relu, leaky-relu). The per-layer compute order
is linear -> batchnorm -> activation. Everything is float64 numpy; training
is single-threaded and bit-reproducible for a fixed seed.

Checkpoint layout (format version 1)
------------------------------------
A single self-describing binary file:

    bytes 0..7    magic ``b"DNETCKPT"``
    bytes 8..11   uint32 little-endian header length H
    bytes 12..    UTF-8 JSON header of length H::

        {"format_version": 1,
         "mode": "train" | "infer",
         "layers": [{"in": int, "out": int, "activation": str,
                     "slope": float,
                     "batchnorm": null | {"momentum": float, "epsilon": float}}],
         "adam": null | {"lr": float, "beta1": float, "beta2": float,
                         "epsilon": float, "t": int}}

followed by raw little-endian float64 arrays, row-major, in order: for each
layer ``weight (out*in)``, ``bias (out)``, then when batchnorm is present
``gamma, beta, running_mean, running_var`` (``out`` values each). When Adam
state is present the first-moment arrays follow in the same parameter order,
then the second-moment arrays.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError

ACTIVATIONS = ("linear", "relu", "leaky-relu")

_MAGIC = b"DNETCKPT"
_FORMAT_VERSION = 1

# Rows with Euclidean norm below this are mapped to the zero row by
# l2_normalize_rows; their similarity with anything is then 0.
ZERO_NORM_EPS = 1e-12


@dataclass
class BatchNorm:
    """Per-unit affine batch normalization state."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def identity(cls, width: int, momentum: float = 0.9, epsilon: float = 1e-5) -> "BatchNorm":
        return cls(
            gamma=np.ones(width),
            beta=np.zeros(width),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            momentum=momentum,
            epsilon=epsilon,
        )


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"
    slope: float = 0.01  # leaky-relu negative slope
    batchnorm: BatchNorm | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigError("weight must be (out, in) with bias of length out")

    @property
    def in_size(self) -> int:
        return self.weight.shape[1]

    @property
    def out_size(self) -> int:
        return self.weight.shape[0]


class DenseNet:
    """A stack of DenseLayer objects with a train/infer mode switch."""

    def __init__(self, layers: list[DenseLayer], mode: str = "train"):
        if mode not in ("train", "infer"):
            raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
        for a, b in zip(layers, layers[1:]):
            if a.out_size != b.in_size:
                raise ConfigError(
                    f"layer dimensions do not chain: {a.out_size} -> {b.in_size}"
                )
        self.layers = layers
        self.mode = mode

    @property
    def in_size(self) -> int:
        return self.layers[0].in_size

    @property
    def out_size(self) -> int:
        return self.layers[-1].out_size

    def parameters(self) -> list[np.ndarray]:
        """Live parameter arrays, ordered per layer as W, b[, gamma, beta]."""
        params = []
        for layer in self.layers:
            params.append(layer.weight)
            params.append(layer.bias)
            if layer.batchnorm is not None:
                params.append(layer.batchnorm.gamma)
                params.append(layer.batchnorm.beta)
        return params

    def forward(self, batch: np.ndarray, update_running: bool = True):
        """Run the net in its current mode.

        Returns ``(output, cache)``; cache is None in infer mode. In train
        mode batchnorm uses batch statistics (population variance) and, when
        ``update_running`` is set, folds them into the running statistics.
        """
        X = np.asarray(batch, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.in_size:
            raise ConfigError(
                f"batch has shape {X.shape}, expected (n, {self.in_size})"
            )
        if X.shape[0] < 1:
            raise UsageError("batch must contain at least one row")
        train = self.mode == "train"
        if train and X.shape[0] < 2 and any(l.batchnorm is not None for l in self.layers):
            raise UsageError("train-mode batchnorm needs a batch of at least 2 rows")

        cache = [] if train else None
        out = X
        for layer in self.layers:
            x_in = out
            lin = x_in @ layer.weight.T + layer.bias
            bn = layer.batchnorm
            if bn is not None:
                if train:
                    mean = lin.mean(axis=0)
                    var = lin.var(axis=0)  # population variance
                    std = np.sqrt(var + bn.epsilon)
                    xhat = (lin - mean) / std
                    if update_running:
                        m = bn.momentum
                        bn.running_mean[:] = m * bn.running_mean + (1.0 - m) * mean
                        bn.running_var[:] = m * bn.running_var + (1.0 - m) * var
                else:
                    std = np.sqrt(bn.running_var + bn.epsilon)
                    xhat = (lin - bn.running_mean) / std
                act_in = bn.gamma * xhat + bn.beta
            else:
                std = xhat = None
                act_in = lin
            out = _activate(act_in, layer.activation, layer.slope)
            if train:
                cache.append((x_in, xhat, std, act_in))
        return out, cache

    def infer(self, batch: np.ndarray) -> np.ndarray:
        """Pure infer-mode forward, independent of the net's mode switch."""
        X = np.asarray(batch, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.in_size:
            raise ConfigError(
                f"batch has shape {X.shape}, expected (n, {self.in_size})"
            )
        out = X
        for layer in self.layers:
            lin = out @ layer.weight.T + layer.bias
            bn = layer.batchnorm
            if bn is not None:
                xhat = (lin - bn.running_mean) / np.sqrt(bn.running_var + bn.epsilon)
                lin = bn.gamma * xhat + bn.beta
            out = _activate(lin, layer.activation, layer.slope)
        return out

    def backward(self, cache, grad_output: np.ndarray) -> list[np.ndarray]:
        """Gradients for every parameter, aligned with :meth:`parameters`.

        Requires the cache from a train-mode forward; parameters are left
        untouched.
        """
        if cache is None:
            raise UsageError("backward needs the cache from a train-mode forward")
        if len(cache) != len(self.layers):
            raise UsageError("cache does not match this net")
        g = np.asarray(grad_output, dtype=float)
        per_layer: list[list[np.ndarray]] = []
        for layer, (x_in, xhat, std, act_in) in zip(
            reversed(self.layers), reversed(cache)
        ):
            g = g * _activation_grad(act_in, layer.activation, layer.slope)
            bn = layer.batchnorm
            entry = []
            if bn is not None:
                n = g.shape[0]
                dgamma = (g * xhat).sum(axis=0)
                dbeta = g.sum(axis=0)
                dxhat = g * bn.gamma
                # standard batchnorm backward through batch statistics
                g = (
                    dxhat * n
                    - dxhat.sum(axis=0)
                    - xhat * (dxhat * xhat).sum(axis=0)
                ) / (n * std)
                entry = [dgamma, dbeta]
            dW = g.T @ x_in
            db = g.sum(axis=0)
            g = g @ layer.weight
            per_layer.append([dW, db] + entry)
        grads: list[np.ndarray] = []
        for entry in reversed(per_layer):
            grads.extend(entry)
        return grads

    def check_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())


def _activate(x: np.ndarray, kind: str, slope: float) -> np.ndarray:
    if kind == "linear":
        return x
    if kind == "relu":
        return np.maximum(x, 0.0)
    return np.where(x > 0.0, x, slope * x)


def _activation_grad(act_in: np.ndarray, kind: str, slope: float) -> np.ndarray:
    if kind == "linear":
        return np.ones_like(act_in)
    if kind == "relu":
        return (act_in > 0.0).astype(float)
    return np.where(act_in > 0.0, 1.0, slope)


def build_mlp(
    sizes: list[int],
    activations: list[str],
    batchnorm: list[bool] | None = None,
    slope: float = 0.01,
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> DenseNet:
    """Build a DenseNet with fan-in scaled uniform init (seeded)."""
    if len(sizes) < 2:
        raise ConfigError("need at least input and output sizes")
    if len(activations) != len(sizes) - 1:
        raise ConfigError("one activation per layer required")
    if batchnorm is None:
        batchnorm = [False] * (len(sizes) - 1)
    if len(batchnorm) != len(sizes) - 1:
        raise ConfigError("one batchnorm flag per layer required")
    if rng is None:
        rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act, bn in zip(sizes, sizes[1:], activations, batchnorm):
        bound = np.sqrt(6.0 / fan_in)
        layers.append(
            DenseLayer(
                weight=rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                bias=np.zeros(fan_out),
                activation=act,
                slope=slope,
                batchnorm=BatchNorm.identity(fan_out) if bn else None,
            )
        )
    return DenseNet(layers)


@dataclass
class AdamState:
    """Adam moments and step counter for a fixed parameter list."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, in place. Returns (params, state)."""
    if len(params) != len(grads):
        raise UsageError("params and grads must have the same length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise UsageError("Adam state does not match the parameter list")
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise UsageError(
                f"shape mismatch in adam_step: param {p.shape}, grad {g.shape}"
            )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


def l2_normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Scale every row to unit Euclidean norm; near-zero rows map to zero."""
    X = np.asarray(matrix, dtype=float)
    norms = np.sqrt((X * X).sum(axis=-1, keepdims=True))
    safe = np.where(norms < ZERO_NORM_EPS, 1.0, norms)
    out = X / safe
    return np.where(norms < ZERO_NORM_EPS, 0.0, out)


def l2_normalize_rows_with_norms(matrix: np.ndarray):
    """Like l2_normalize_rows but also returns the row norms (n, 1)."""
    X = np.asarray(matrix, dtype=float)
    norms = np.sqrt((X * X).sum(axis=-1, keepdims=True))
    safe = np.where(norms < ZERO_NORM_EPS, 1.0, norms)
    out = np.where(norms < ZERO_NORM_EPS, 0.0, X / safe)
    return out, norms


def softmax(logits: np.ndarray) -> np.ndarray:
    Z = np.asarray(logits, dtype=float)
    shifted = Z - Z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient wrt logits.

    Gradient is (softmax - one_hot) / n. Labels must lie in [0, C).
    """
    Z = np.asarray(logits, dtype=float)
    y = np.asarray(labels)
    if Z.ndim != 2:
        raise UsageError("logits must be a 2-d matrix")
    n, C = Z.shape
    if y.shape != (n,):
        raise UsageError("labels must be a vector matching the batch size")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise UsageError(f"labels must lie in [0, {C})")
    mx = Z.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(Z - mx).sum(axis=1))
    loss = float(np.mean(lse - Z[np.arange(n), y]))
    grad = softmax(Z)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, grad


def save_net(net: DenseNet, path, adam: AdamState | None = None) -> None:
    """Write the checkpoint format documented in the module docstring."""
    header = {
        "format_version": _FORMAT_VERSION,
        "mode": net.mode,
        "layers": [
            {
                "in": layer.in_size,
                "out": layer.out_size,
                "activation": layer.activation,
                "slope": layer.slope,
                "batchnorm": None
                if layer.batchnorm is None
                else {
                    "momentum": layer.batchnorm.momentum,
                    "epsilon": layer.batchnorm.epsilon,
                },
            }
            for layer in net.layers
        ],
        "adam": None
        if adam is None
        else {
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "epsilon": adam.epsilon,
            "t": adam.t,
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays: list[np.ndarray] = []
    for layer in net.layers:
        arrays.append(layer.weight)
        arrays.append(layer.bias)
        if layer.batchnorm is not None:
            bn = layer.batchnorm
            arrays.extend([bn.gamma, bn.beta, bn.running_mean, bn.running_var])
    if adam is not None:
        if len(adam.m) != len(net.parameters()):
            raise UsageError("Adam state does not match the net")
        arrays.extend(adam.m)
        arrays.extend(adam.v)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_net(path):
    """Read a checkpoint; returns (net, adam_state_or_None)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ConfigError(f"{path}: not a dense-net checkpoint")
    (hlen,) = struct.unpack("<I", raw[len(_MAGIC) : len(_MAGIC) + 4])
    off = len(_MAGIC) + 4
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    if header.get("format_version") != _FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version")
    off += hlen
    buf = np.frombuffer(raw, dtype="<f8", offset=off)
    pos = 0

    def take(count, shape):
        nonlocal pos
        arr = np.array(buf[pos : pos + count], dtype=float).reshape(shape)
        if arr.size != count:
            raise ConfigError(f"{path}: truncated checkpoint")
        pos += count
        return arr

    layers = []
    for spec in header["layers"]:
        d_in, d_out = spec["in"], spec["out"]
        W = take(d_out * d_in, (d_out, d_in))
        b = take(d_out, (d_out,))
        bn = None
        if spec["batchnorm"] is not None:
            bn = BatchNorm(
                gamma=take(d_out, (d_out,)),
                beta=take(d_out, (d_out,)),
                running_mean=take(d_out, (d_out,)),
                running_var=take(d_out, (d_out,)),
                momentum=spec["batchnorm"]["momentum"],
                epsilon=spec["batchnorm"]["epsilon"],
            )
        layers.append(
            DenseLayer(
                weight=W,
                bias=b,
                activation=spec["activation"],
                slope=spec["slope"],
                batchnorm=bn,
            )
        )
    net = DenseNet(layers, mode=header["mode"])
    adam = None
    if header["adam"] is not None:
        meta = header["adam"]
        adam = AdamState(
            lr=meta["lr"],
            beta1=meta["beta1"],
            beta2=meta["beta2"],
            epsilon=meta["epsilon"],
            t=meta["t"],
        )
        shapes = [p.shape for p in net.parameters()]
        adam.m = [take(int(np.prod(s)), s) for s in shapes]
        adam.v = [take(int(np.prod(s)), s) for s in shapes]
    if pos != buf.size:
        raise ConfigError(f"{path}: trailing bytes in checkpoint")
    return net, adam
