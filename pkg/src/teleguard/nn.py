"""Minimal feed-forward substrate: MLPs, exact backprop, Adam, checkpoints.

Fixed-topology networks only; the backward pass is written out by hand so it
stays verifiable against finite differences.  Everything operates on batches
``(B, dim)`` of float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

CHECKPOINT_FORMAT = "teleguard-checkpoint"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("tanh", "relu", "identity")


class CheckpointError(ValueError):
    """Corrupt or wrong-version checkpoint file."""


@dataclass
class Mlp:
    """Dense network: weights[l] has shape (sizes[l], sizes[l+1])."""

    sizes: tuple[int, ...]
    activations: tuple[str, ...]
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("need one activation per layer")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[l], self.sizes[l + 1]) or b.shape != (
                self.sizes[l + 1],
            ):
                raise ValueError(f"layer {l} parameter shape mismatch")

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass
class Gradients:
    """Same shapes as the owning Mlp's parameters."""

    d_weights: list
    d_biases: list

    def as_list(self) -> list:
        out = []
        for dw, db in zip(self.d_weights, self.d_biases):
            out.extend((dw, db))
        return out


def init_mlp(sizes, activations, rng: np.random.Generator) -> Mlp:
    """Uniform fan-in init: W ~ U(+-1/sqrt(fan_in)), zero biases."""
    sizes = tuple(int(s) for s in sizes)
    weights, biases = [], []
    for l in range(len(sizes) - 1):
        bound = 1.0 / np.sqrt(sizes[l])
        weights.append(rng.uniform(-bound, bound, size=(sizes[l], sizes[l + 1])))
        biases.append(np.zeros(sizes[l + 1]))
    return Mlp(sizes=sizes, activations=tuple(activations), weights=weights, biases=biases)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(z: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - h * h
    if kind == "relu":
        return (z > 0.0).astype(float)
    return np.ones_like(z)


def forward(net: Mlp, x: np.ndarray):
    """Affine + activation composition; cache carries per-layer (input, z, h)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != net.in_dim:
        raise ValueError(f"input dim {x.shape[1]} != {net.in_dim}")
    h = x
    cache = []
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = h @ w + b
        out = _act(z, act)
        cache.append((h, z, out))
        h = out
    return h, cache


def backward(net: Mlp, cache, dy: np.ndarray):
    """Exact reverse-mode gradients; returns (Gradients, d_input)."""
    if len(cache) != len(net.weights):
        raise ValueError("stale or mismatched forward cache")
    dy = np.atleast_2d(np.asarray(dy, dtype=float))
    d_weights = [None] * len(net.weights)
    d_biases = [None] * len(net.biases)
    grad = dy
    for l in reversed(range(len(net.weights))):
        h_in, z, h_out = cache[l]
        dz = grad * _act_grad(z, h_out, net.activations[l])
        d_weights[l] = h_in.T @ dz
        d_biases[l] = dz.sum(axis=0)
        grad = dz @ net.weights[l].T
    return Gradients(d_weights=d_weights, d_biases=d_biases), grad


@dataclass
class AdamState:
    m: list
    v: list
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: list, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(params: list, grads: list, state: AdamState) -> None:
    """Bias-corrected Adam update, in place.

    Non-finite gradients abort before any parameter or moment is touched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient; parameters left untouched")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def accumulate(total: list, grads: list, scale: float = 1.0) -> None:
    """total += scale * grads, elementwise over parameter lists."""
    for t, g in zip(total, grads):
        t += scale * g


def zeros_like_params(params: list) -> list:
    return [np.zeros_like(p) for p in params]


def save_arrays(path, meta: dict, arrays: dict) -> None:
    """Versioned checkpoint: JSON header + raw little-endian blocks.

    Round-trips bit-exactly; array order in the manifest is the block order.
    """
    names = list(arrays.keys())
    manifest = [
        {"name": n, "shape": list(arrays[n].shape), "dtype": "<f8"} for n in names
    ]
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "arrays": manifest,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii"))
        f.write(b"\n")
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_arrays(path):
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    try:
        header = json.loads(header_line.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from e
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {header.get('version')!r}"
        )
    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointError("truncated checkpoint payload")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(shape).astype(float)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return header["meta"], arrays


def mlp_to_arrays(prefix: str, net: Mlp) -> dict:
    out = {}
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.w{l}"] = w
        out[f"{prefix}.b{l}"] = b
    return out


def mlp_meta(net: Mlp) -> dict:
    return {"sizes": list(net.sizes), "activations": list(net.activations)}


def mlp_from_arrays(prefix: str, meta: dict, arrays: dict) -> Mlp:
    sizes = tuple(meta["sizes"])
    activations = tuple(meta["activations"])
    weights, biases = [], []
    for l in range(len(sizes) - 1):
        weights.append(arrays[f"{prefix}.w{l}"].copy())
        biases.append(arrays[f"{prefix}.b{l}"].copy())
    return Mlp(sizes=sizes, activations=activations, weights=weights, biases=biases)


def clone_mlp(net: Mlp) -> Mlp:
    return Mlp(
        sizes=net.sizes,
        activations=net.activations,
        weights=[w.copy() for w in net.weights],
        biases=[b.copy() for b in net.biases],
    )


def params_hash(params: list) -> str:
    """Stable content hash used by freeze checks."""
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()
