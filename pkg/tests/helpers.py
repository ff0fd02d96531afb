"""Shared test utilities: finite differences and small builders."""

import numpy as np
import torch


def central_diff(fn, tensor: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar fn() w.r.t. tensor entries.

    Mutates tensor entries in place under no_grad; fn must recompute the
    scalar from the tensor's current values on every call.
    """
    grad = torch.zeros_like(tensor)
    flat = tensor.detach().reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.abs().max()), float(b.abs().max()), 1e-12)
    return float((a - b).abs().max()) / denom


def unit_rows(x: torch.Tensor) -> torch.Tensor:
    return x / torch.linalg.vector_norm(x, dim=1, keepdim=True)


def vector_with_cosine(s: float, dim: int = 2) -> np.ndarray:
    """A unit vector whose dot with e1 equals s."""
    v = np.zeros(dim)
    v[0] = s
    v[1] = np.sqrt(max(0.0, 1.0 - s * s))
    return v
