"""Central finite-difference helpers for gradient-fidelity checks.

Losses with stop-gradient structure are checked against the function they
actually define: quantities under a stop-gradient are computed once at the
base point and held fixed while a coordinate is perturbed.  All checks run
at double precision.
"""

from __future__ import annotations

import torch

EPS = 1e-5


def central_diff(fn, tensor: torch.Tensor, coords=None, eps: float = EPS) -> torch.Tensor:
    """Central differences of scalar fn() w.r.t. selected flat coordinates of
    ``tensor`` (mutated in place during probing, restored after).  Returns a
    dense gradient with zeros at unprobed coordinates."""
    flat = tensor.reshape(-1)
    grad = torch.zeros_like(flat)
    if coords is None:
        coords = range(flat.numel())
    with torch.no_grad():
        for i in coords:
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn())
            flat[i] = orig - eps
            lo = float(fn())
            flat[i] = orig
            grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(tensor.shape)


def sample_coords(tensor: torch.Tensor, k: int, seed: int = 0) -> list[int]:
    n = tensor.numel()
    if n <= k:
        return list(range(n))
    g = torch.Generator().manual_seed(seed)
    return torch.randperm(n, generator=g)[:k].tolist()


def max_rel_err(analytic: torch.Tensor, numeric: torch.Tensor, coords=None) -> float:
    a = analytic.reshape(-1)
    b = numeric.reshape(-1)
    if coords is not None:
        idx = torch.as_tensor(list(coords), dtype=torch.long)
        a, b = a[idx], b[idx]
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, 1e-4))
    return ((a - b).abs() / denom).max().item()


def check_grad(fn, tensor: torch.Tensor, analytic: torch.Tensor, k: int = 24,
               seed: int = 0, tol: float = 1e-4) -> float:
    """FD-check up to k sampled coordinates; returns the max relative error."""
    coords = sample_coords(tensor, k, seed)
    numeric = central_diff(fn, tensor, coords)
    err = max_rel_err(analytic, numeric, coords)
    assert err < tol, f"gradient mismatch: max relative error {err:.3e} >= {tol}"
    return err
