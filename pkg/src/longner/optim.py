"""AdamW, finite-difference gradient checking, and flat-file checkpoints."""

from __future__ import annotations

import json
import os

import numpy as np

from .tensor import Tensor, no_grad


class AdamW:
    """Decoupled-weight-decay Adam over a name -> Tensor parameter dict.

    The decay term multiplies parameters directly (it is not folded into the
    gradient), and the moment estimates are bias-corrected. Only parameters
    with ``requires_grad`` are touched; the rest stay bitwise identical.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 1e-2):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise ValueError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)


def finite_diff_check(f, x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps the tensor to a scalar Tensor and must be deterministic.
    ``x.data`` is perturbed in place and restored. Relative error uses
    max(|ad|, |fd|, 1e-6) as the denominator so near-zero gradients compare
    on an absolute scale.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    out.backward()
    ad = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    x.requires_grad = was
    x.grad = None

    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x).data)
            flat[i] = orig - eps
            lo = float(f(x).data)
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * eps)
    adf = ad.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(adf), np.abs(fd)), 1e-6)
    return float(np.max(np.abs(adf - fd) / denom)) if flat.size else 0.0


def save_params(dirpath: str, params: dict[str, Tensor]) -> None:
    """Write a manifest (names, shapes, byte offsets) plus flat little-endian
    64-bit floats; round-trips bit-exactly."""
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    offset = 0
    with open(os.path.join(dirpath, "params.bin"), "wb") as fh:
        for name, p in params.items():
            arr = np.ascontiguousarray(p.data, dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(p.shape), "offset": offset,
                            "numel": int(arr.size)})
            offset += arr.nbytes
    manifest = {"format": "flat-f8-le", "total_bytes": offset, "params": entries}
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_params(dirpath: str) -> dict[str, np.ndarray]:
    with open(os.path.join(dirpath, "manifest.json")) as fh:
        manifest = json.load(fh)
    raw = np.fromfile(os.path.join(dirpath, "params.bin"), dtype="<f8")
    out = {}
    for ent in manifest["params"]:
        start = ent["offset"] // 8
        arr = raw[start:start + ent["numel"]].reshape(ent["shape"])
        out[ent["name"]] = np.ascontiguousarray(arr)
    return out


def load_into(params: dict[str, Tensor], dirpath: str) -> None:
    """Load a checkpoint into existing tensors, casting to their dtype."""
    loaded = load_params(dirpath)
    missing = set(params) - set(loaded)
    extra = set(loaded) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, p in params.items():
        arr = loaded[name]
        if tuple(arr.shape) != p.shape:
            raise ValueError(f"checkpoint shape mismatch for {name!r}: {arr.shape} vs {p.shape}")
        p.data = arr.astype(p.data.dtype)
