"""Normalized feature correlation volumes with bounded search radius.

A volume slot at channel k = (dy + R) * (2R + 1) + (dx + R) holds the cosine
similarity between the reference feature at (y, x) and the target feature at
(y + dy, x + dx); displacements leaving the frame are exactly 0. A radius of
at least max(H, W) makes the search global.
"""

from __future__ import annotations

import torch

from .errors import ShapeMismatch

# module-wide allocation bookkeeping, reset explicitly by callers that meter it
_COUNTERS = {"total_cells": 0, "peak_cells": 0, "calls": 0}

_NORM_EPS = 1e-8

_global_index_cache: dict = {}


def memory_cells(width: int, height: int, radius: int) -> int:
    """Number of cells a correlation volume occupies: w * h * (2r + 1)^2."""
    k = 2 * int(radius) + 1
    return int(width) * int(height) * k * k


def reset_correlation_counters() -> None:
    _COUNTERS["total_cells"] = 0
    _COUNTERS["peak_cells"] = 0
    _COUNTERS["calls"] = 0


def correlation_counters() -> dict:
    """Cells allocated by correlate() since the last reset (per-sample units)."""
    return dict(_COUNTERS)


def _record(cells: int) -> None:
    _COUNTERS["total_cells"] += cells
    _COUNTERS["peak_cells"] = max(_COUNTERS["peak_cells"], cells)
    _COUNTERS["calls"] += 1


def _normalize(feat: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(feat, dim=1, keepdim=True)
    return feat / norm.clamp_min(_NORM_EPS)


def _global_index(h: int, w: int, radius: int, device) -> torch.Tensor:
    key = (h, w, radius, str(device))
    idx = _global_index_cache.get(key)
    if idx is None:
        k = 2 * radius + 1
        ys = torch.arange(h, device=device).repeat_interleave(w)
        xs = torch.arange(w, device=device).repeat(h)
        dy = ys.view(-1, 1) - ys.view(1, -1)  # (M, N): y_b - y_a
        dx = xs.view(-1, 1) - xs.view(1, -1)
        idx = (dy + radius) * k + (dx + radius)
        _global_index_cache[key] = idx
    return idx


def correlate(feat_a: torch.Tensor, feat_b: torch.Tensor, radius: int) -> torch.Tensor:
    """Correlation volume between two (B, C, H, W) feature maps.

    Features are L2-normalized per location (zero vectors stay zero via an
    epsilon clamp), so each slot is a cosine similarity in [-1, 1]. Returns
    (B, (2R+1)^2, H, W) in the input dtype. Differentiable.
    """
    if not (torch.is_tensor(feat_a) and torch.is_tensor(feat_b)):
        raise TypeError("correlate expects torch tensors")
    if feat_a.dim() != 4 or feat_b.dim() != 4:
        raise ShapeMismatch(f"expected 4D (B, C, H, W) features, got {feat_a.dim()}D and {feat_b.dim()}D")
    if feat_a.shape != feat_b.shape:
        raise ShapeMismatch(f"feature shapes differ: {tuple(feat_a.shape)} vs {tuple(feat_b.shape)}")
    radius = int(radius)
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")

    b, c, h, w = feat_a.shape
    _record(memory_cells(w, h, radius))
    fa = _normalize(feat_a)
    fb = _normalize(feat_b)

    if radius >= max(h, w):
        vol = _correlate_global(fa, fb, radius)
    else:
        vol = _correlate_local(fa, fb, radius)
    # cosine values can overshoot 1 by a few ulps; keep the invariant exact
    return vol.clamp(-1.0, 1.0)


def _correlate_global(fa: torch.Tensor, fb: torch.Tensor, radius: int) -> torch.Tensor:
    b, c, h, w = fa.shape
    n = h * w
    k = 2 * radius + 1
    cos = torch.einsum("bcm,bcn->bmn", fb.reshape(b, c, n), fa.reshape(b, c, n))  # (B, M, N)
    idx = _global_index(h, w, radius, fa.device).unsqueeze(0).expand(b, n, n)
    vol = torch.zeros(b, k * k, n, dtype=fa.dtype, device=fa.device)
    vol = vol.scatter(1, idx, cos)
    return vol.reshape(b, k * k, h, w)


def _correlate_local(fa: torch.Tensor, fb: torch.Tensor, radius: int) -> torch.Tensor:
    b, c, h, w = fa.shape
    pad = torch.nn.functional.pad(fb, (radius, radius, radius, radius))
    slots = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = pad[:, :, radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            slots.append((fa * shifted).sum(dim=1))
    return torch.stack(slots, dim=1)
