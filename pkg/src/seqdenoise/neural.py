"""Minimal differentiable affine stack with exact manual gradients.

A network maps a batch of embedding vectors to one flat score vector per
named head (e.g. the transition scores of size L*L and the emission scores
of size L*L*K). Heads are independent affine stacks by default; an optional
shared trunk and an optional tanh hidden layer are config-selectable. No
external autodiff is involved; gradients are exact and finite-difference
checked in the tests.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NET_MAGIC = b"SDNET1"


class NeuralError(RuntimeError):
    """Shape mismatches, stale caches, or non-finite values."""


def softmax_label_axis(scores: np.ndarray) -> np.ndarray:
    """Softmax along the last (label) axis, stabilized by max subtraction."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_grad(prob: np.ndarray, grad_prob: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. scores given the softmax output and dL/dprob."""
    inner = (prob * grad_prob).sum(axis=-1, keepdims=True)
    return prob * (grad_prob - inner)


@dataclass
class GradientBuffer:
    """Parameter-shaped gradient accumulator."""

    grads: dict[str, np.ndarray]
    count: int = 0

    def add_(self, other: "GradientBuffer") -> None:
        if other.grads.keys() != self.grads.keys():
            raise NeuralError("gradient buffers have different parameter sets")
        for name, arr in other.grads.items():
            if arr.shape != self.grads[name].shape:
                raise NeuralError(f"gradient shape mismatch for {name}")
            self.grads[name] += arr
        self.count += other.count

    def scale_(self, factor: float) -> None:
        for arr in self.grads.values():
            arr *= factor


class AffineStack:
    """Affine layers (optionally one tanh hidden layer) with named heads.

    ``head_shapes`` maps a head name to its output tensor shape per input
    row; outputs are reshaped to (N, *shape). ``hidden`` is the hidden-layer
    width (0 means a single linear map). With ``shared_trunk`` the hidden
    layer is shared by all heads, otherwise each head owns its own stack.
    """

    def __init__(self, input_dim: int, head_shapes: dict[str, tuple[int, ...]],
                 hidden: int = 0, shared_trunk: bool = False,
                 rng: np.random.Generator | None = None):
        if input_dim < 1 or not head_shapes:
            raise NeuralError("need a positive input dim and at least one head")
        self.input_dim = input_dim
        self.head_shapes = {k: tuple(v) for k, v in head_shapes.items()}
        self.hidden = int(hidden)
        self.shared_trunk = bool(shared_trunk) and self.hidden > 0
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, np.ndarray] = {}
        self._cache_token = 0

        def uniform(fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        if self.shared_trunk:
            self.params["trunk.W"] = uniform(input_dim, (input_dim, self.hidden))
            self.params["trunk.b"] = np.zeros(self.hidden)
        for name in sorted(self.head_shapes):
            size = int(np.prod(self.head_shapes[name]))
            if self.hidden > 0 and not self.shared_trunk:
                self.params[f"{name}.W0"] = uniform(input_dim, (input_dim, self.hidden))
                self.params[f"{name}.b0"] = np.zeros(self.hidden)
            in_dim = self.hidden if self.hidden > 0 else input_dim
            self.params[f"{name}.W"] = uniform(in_dim, (in_dim, size))
            self.params[f"{name}.b"] = np.zeros(size)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> GradientBuffer:
        return GradientBuffer({k: np.zeros_like(v) for k, v in self.params.items()})

    def copy(self) -> "AffineStack":
        dup = AffineStack.__new__(AffineStack)
        dup.input_dim = self.input_dim
        dup.head_shapes = dict(self.head_shapes)
        dup.hidden = self.hidden
        dup.shared_trunk = self.shared_trunk
        dup.params = {k: v.copy() for k, v in self.params.items()}
        dup._cache_token = 0
        return dup

    def forward(self, inputs: np.ndarray) -> tuple[dict[str, np.ndarray], dict]:
        """Scores per head for a (N, input_dim) batch, plus the backprop cache."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        if inputs.shape[1] != self.input_dim:
            raise NeuralError(
                f"input dim {inputs.shape[1]} != expected {self.input_dim}")
        self._cache_token += 1
        cache: dict = {"inputs": inputs, "token": self._cache_token, "hid": {}}
        outs: dict[str, np.ndarray] = {}
        trunk_h = None
        if self.shared_trunk:
            trunk_h = np.tanh(inputs @ self.params["trunk.W"] + self.params["trunk.b"])
            cache["trunk_h"] = trunk_h
        for name, shape in self.head_shapes.items():
            feats = inputs
            if self.hidden > 0:
                if self.shared_trunk:
                    feats = trunk_h
                else:
                    feats = np.tanh(inputs @ self.params[f"{name}.W0"]
                                    + self.params[f"{name}.b0"])
                    cache["hid"][name] = feats
            flat = feats @ self.params[f"{name}.W"] + self.params[f"{name}.b"]
            outs[name] = flat.reshape((inputs.shape[0],) + shape)
        return outs, cache

    def backward(self, grad_outs: dict[str, np.ndarray], cache: dict) -> GradientBuffer:
        """Exact gradients for a scalar loss given dL/d(head outputs)."""
        if cache.get("token") != self._cache_token:
            raise NeuralError("stale forward cache")
        inputs = cache["inputs"]
        buf = self.zero_grads()
        d_trunk_h = None
        for name, grad in grad_outs.items():
            if name not in self.head_shapes:
                raise NeuralError(f"unknown head {name!r}")
            flat_grad = np.asarray(grad).reshape(inputs.shape[0], -1)
            if self.hidden > 0:
                feats = cache["trunk_h"] if self.shared_trunk else cache["hid"][name]
            else:
                feats = inputs
            buf.grads[f"{name}.W"] += feats.T @ flat_grad
            buf.grads[f"{name}.b"] += flat_grad.sum(axis=0)
            d_feats = flat_grad @ self.params[f"{name}.W"].T
            if self.hidden > 0:
                d_pre = (1.0 - feats ** 2) * d_feats
                if self.shared_trunk:
                    d_trunk_h = d_pre if d_trunk_h is None else d_trunk_h + d_pre
                else:
                    buf.grads[f"{name}.W0"] += inputs.T @ d_pre
                    buf.grads[f"{name}.b0"] += d_pre.sum(axis=0)
        if self.shared_trunk and d_trunk_h is not None:
            buf.grads["trunk.W"] += inputs.T @ d_trunk_h
            buf.grads["trunk.b"] += d_trunk_h.sum(axis=0)
        buf.count = 1
        return buf

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        header = {
            "input_dim": self.input_dim,
            "head_shapes": {k: list(v) for k, v in self.head_shapes.items()},
            "hidden": self.hidden,
            "shared_trunk": self.shared_trunk,
            "extra": extra or {},
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with Path(path).open("wb") as fh:
            fh.write(NET_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for name in sorted(self.params):
                fh.write(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> tuple["AffineStack", dict]:
        data = Path(path).read_bytes()
        if data[: len(NET_MAGIC)] != NET_MAGIC:
            raise NeuralError(f"{path}: bad network-file magic")
        off = len(NET_MAGIC)
        (blob_len,) = struct.unpack_from("<I", data, off)
        off += 4
        header = json.loads(data[off : off + blob_len].decode("utf-8"))
        off += blob_len
        net = cls(header["input_dim"],
                  {k: tuple(v) for k, v in header["head_shapes"].items()},
                  hidden=header["hidden"], shared_trunk=header["shared_trunk"])
        for name in sorted(net.params):
            count = net.params[name].size
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off)
            off += 8 * count
            net.params[name] = arr.reshape(net.params[name].shape).copy()
        return net, header["extra"]


def net_forward(net: AffineStack, embeddings: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray, dict]:
    """Transition scores S (N,L,L) and emission scores H (N,L,L,K) with cache."""
    outs, cache = net.forward(embeddings)
    return outs["trans"], outs["emit"], cache


def backprop(net: AffineStack, grad_s: np.ndarray, grad_h: np.ndarray,
             cache: dict) -> GradientBuffer:
    return net.backward({"trans": grad_s, "emit": grad_h}, cache)


def sgd_step(net: AffineStack, grads: GradientBuffer, lr: float) -> None:
    """In-place ascent step: theta <- theta + lr * grad."""
    if lr < 0:
        raise NeuralError("learning rate must be >= 0")
    for name, grad in grads.grads.items():
        if not np.all(np.isfinite(grad)):
            raise NeuralError(f"non-finite gradient for parameter {name!r}")
        net.params[name] += lr * grad
