"""Minimal dense-network substrate.

Fully-connected networks with rectified-linear hidden units and an
identity or sigmoid output head, plus reverse-mode gradients, Adam, soft
target blending, and a binary checkpoint format. Everything operates on
float64 numpy arrays; parameters of a network are the flat list
[W0, b0, W1, b1, ...] with W stored input-major (in, out).
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("identity", "sigmoid")

_MAGIC = b"RCNN"
_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or from an incompatible version."""


@dataclass
class Mlp:
    dims: tuple
    weights: list          # one (fan_in, fan_out) matrix per layer
    biases: list           # one (fan_out,) vector per layer
    output_activation: str = "identity"

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, arrays) -> None:
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.weights):
            raise ValueError("wrong number of parameter arrays")
        for i, (w, b) in enumerate(zip(arrays[0::2], arrays[1::2])):
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ValueError("parameter shape mismatch")
            self.weights[i] = w.astype(float).copy()
            self.biases[i] = b.astype(float).copy()

    def clone(self) -> "Mlp":
        return Mlp(self.dims, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], self.output_activation)


def init_params(dims, rng: np.random.Generator,
                output_activation: str = "identity") -> Mlp:
    """He-scaled hidden layers, small-uniform head, zero biases."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"bad layer dims {dims}")
    if output_activation not in ACTIVATIONS:
        raise ValueError(f"unknown output activation {output_activation!r}")
    weights, biases = [], []
    last = len(dims) - 2
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        if i == last:
            w = rng.uniform(-3e-3, 3e-3, size=(fan_in, fan_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return Mlp(dims, weights, biases, output_activation)


def _apply_head(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "sigmoid":
        return expit(z)
    return z


def _forward_cached(net: Mlp, x: np.ndarray):
    acts = [x]
    h = x
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        h = _apply_head(z, net.output_activation) if i == n_layers - 1 \
            else np.maximum(z, 0.0)
        acts.append(h)
    return h, acts


def forward(net: Mlp, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.dims[0]:
        raise ValueError(f"input width {x.shape[-1]} != {net.dims[0]}")
    out, _ = _forward_cached(net, np.atleast_2d(x))
    return out[0] if x.ndim == 1 else out


def backward(net: Mlp, x, upstream) -> list:
    """Gradients of sum(upstream * output) w.r.t. every parameter.

    ``upstream`` carries dLoss/dOutput per sample; the return value lines
    up with ``net.params()``. Gradients are summed over the batch.
    """
    x = np.asarray(x, dtype=float)
    x2 = np.atleast_2d(x)
    g = np.atleast_2d(np.asarray(upstream, dtype=float))
    out, acts = _forward_cached(net, x2)
    if g.shape != out.shape:
        raise ValueError(f"upstream shape {g.shape} != output shape {out.shape}")

    if net.output_activation == "sigmoid":
        delta = g * out * (1.0 - out)
    else:
        delta = g.copy()

    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * (acts[i] > 0)
    return grads


# ---------------------------------------------------------------------------
# Flat parameter views
# ---------------------------------------------------------------------------


@dataclass
class ParamVector:
    """Flat float64 array plus the shape manifest to rebuild the arrays."""

    flat: np.ndarray
    shapes: tuple

    @classmethod
    def from_arrays(cls, arrays) -> "ParamVector":
        arrays = [np.asarray(a, dtype=float) for a in arrays]
        flat = np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)
        return cls(flat, tuple(a.shape for a in arrays))

    def to_arrays(self) -> list:
        out, start = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape, dtype=int)) if shape else 1
            out.append(self.flat[start:start + size].reshape(shape).copy())
            start += size
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.flat.copy(), self.shapes)


def soft_update(target: ParamVector, online: ParamVector, rate: float) -> ParamVector:
    """Blend target toward online: rate * online + (1 - rate) * target."""
    if target.shapes != online.shapes:
        raise ValueError("parameter vectors have different shape manifests")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"blend rate {rate} outside [0, 1]")
    return ParamVector(rate * online.flat + (1.0 - rate) * target.flat, target.shapes)


def clip_global_norm(flats, max_norm: float):
    """Scale a group of flat gradients so their joint norm is <= max_norm."""
    norm = float(np.sqrt(sum(float(f @ f) for f in flats)))
    if norm > max_norm > 0:
        scale = max_norm / norm
        flats = [f * scale for f in flats]
    return flats, norm


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: np.ndarray = field(default_factory=lambda: np.zeros(0))
    second_moment: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def for_size(cls, n: int, learning_rate: float = 1e-3) -> "AdamState":
        return cls(learning_rate=learning_rate,
                   first_moment=np.zeros(n), second_moment=np.zeros(n))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state``, returns new params."""
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ValueError("params, grads, and moments must share one shape")
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradient passed to adam_step")
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1 - state.beta1) * grads
    state.second_moment = state.beta2 * state.second_moment + (1 - state.beta2) * grads ** 2
    m_hat = state.first_moment / (1 - state.beta1 ** t)
    v_hat = state.second_moment / (1 - state.beta2 ** t)
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, manifest: dict, flat: np.ndarray) -> None:
    """Versioned header, JSON manifest, little-endian float64 payload."""
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    data = np.ascontiguousarray(flat, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(data)


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (manifest, flat array)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (blob_len,) = struct.unpack_from("<Q", raw, 8)
    blob = raw[16:16 + blob_len]
    try:
        manifest = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad manifest ({exc})") from exc
    off = 16 + blob_len
    (count,) = struct.unpack_from("<Q", raw, off)
    payload = raw[off + 8:]
    if len(payload) != 8 * count:
        raise CheckpointError(f"{path}: truncated parameter payload")
    flat = np.frombuffer(payload, dtype="<f8").astype(float)
    return manifest, flat


def mlp_manifest(net: Mlp) -> dict:
    return {"dims": list(net.dims), "output_activation": net.output_activation,
            "shapes": [list(a.shape) for a in net.params()]}


def mlp_from_manifest(manifest: dict, flat: np.ndarray) -> Mlp:
    dims = tuple(manifest["dims"])
    shapes = tuple(tuple(s) for s in manifest["shapes"])
    net = init_params(dims, np.random.default_rng(0), manifest["output_activation"])
    expected = tuple(a.shape for a in net.params())
    if shapes != expected:
        raise CheckpointError(f"shape manifest {shapes} does not match dims {dims}")
    net.set_params(ParamVector(flat, shapes).to_arrays())
    return net
