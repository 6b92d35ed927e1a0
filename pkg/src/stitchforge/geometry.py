"""Projective geometry core: 4-point DLT, warping, offset rescaling, canvases.

Corner convention throughout the package: TL, TR, BL, BR order with
edge-based coordinates (0,0), (w,0), (0,h), (w,h). Offsets are stored as
(4, 2) arrays of per-corner (du, dv). Homographies are 3x3 with m22 == 1
and map source pixel coordinates to destination pixel coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateCorners, NonPositiveScale

# DLT systems with condition number beyond this are treated as degenerate
COND_LIMIT = 1e12


@dataclass(frozen=True)
class CanvasSpec:
    """Output canvas size plus the translation placing patch (0,0) inside it."""

    width: int
    height: int
    origin: tuple[int, int]  # (ox, oy)

    def translation(self, dtype=torch.float64) -> torch.Tensor:
        return translation(self.origin[0], self.origin[1], dtype=dtype)


def corners(width: float, height: float, dtype=torch.float64) -> torch.Tensor:
    """Corner quad of a width x height patch, TL/TR/BL/BR."""
    return torch.tensor(
        [[0.0, 0.0], [float(width), 0.0], [0.0, float(height)], [float(width), float(height)]],
        dtype=dtype,
    )


def translation(tx: float, ty: float, dtype=torch.float64) -> torch.Tensor:
    t = torch.eye(3, dtype=dtype)
    t[0, 2] = float(tx)
    t[1, 2] = float(ty)
    return t


def as_offsets(offsets) -> torch.Tensor:
    """Normalize an offsets argument to a (..., 4, 2) tensor."""
    t = offsets if torch.is_tensor(offsets) else torch.as_tensor(np.asarray(offsets))
    if t.is_floating_point() is False:
        t = t.double()
    if t.shape[-1] == 8:
        t = t.reshape(*t.shape[:-1], 4, 2)
    if t.shape[-2:] != (4, 2):
        raise ValueError(f"offsets must have shape (..., 4, 2) or (..., 8), got {tuple(t.shape)}")
    return t


def solve_dlt(src_corners, dst_corners) -> torch.Tensor:
    """Homography mapping four source corners onto four destination corners.

    Accepts (..., 4, 2) tensors or arrays, solves the inhomogeneous 8x8
    system in float64 with m22 fixed to 1, and returns (..., 3, 3) in the
    input floating dtype. Differentiable with respect to both inputs.

    Raises DegenerateCorners when the system's condition number exceeds
    COND_LIMIT (collinear or self-intersecting quads).
    """
    src = src_corners if torch.is_tensor(src_corners) else torch.as_tensor(np.asarray(src_corners))
    dst = dst_corners if torch.is_tensor(dst_corners) else torch.as_tensor(np.asarray(dst_corners))
    if src.shape[-2:] != (4, 2) or dst.shape[-2:] != (4, 2):
        raise ValueError("corner arrays must have shape (..., 4, 2)")
    out_dtype = src.dtype if src.dtype.is_floating_point else torch.float64
    src = src.double()
    dst = dst.double()
    batch_shape = torch.broadcast_shapes(src.shape[:-2], dst.shape[:-2])
    src = src.expand(*batch_shape, 4, 2)
    dst = dst.expand(*batch_shape, 4, 2)

    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    zero = torch.zeros_like(x)
    one = torch.ones_like(x)
    # rows (..., 4, 8) interleaved into (..., 8, 8)
    rows_u = torch.stack([x, y, one, zero, zero, zero, -x * u, -y * u], dim=-1)
    rows_v = torch.stack([zero, zero, zero, x, y, one, -x * v, -y * v], dim=-1)
    a = torch.stack([rows_u, rows_v], dim=-2).reshape(*batch_shape, 8, 8)
    b = torch.stack([u, v], dim=-1).reshape(*batch_shape, 8)

    with torch.no_grad():
        cond = torch.linalg.cond(a)
        if bool(torch.any(~torch.isfinite(cond)) | torch.any(cond > COND_LIMIT)):
            raise DegenerateCorners(
                f"DLT system condition number {float(cond.max()):.3e} exceeds {COND_LIMIT:.0e}"
            )

    h8 = torch.linalg.solve(a, b.unsqueeze(-1)).squeeze(-1)
    h9 = torch.cat([h8, torch.ones(*batch_shape, 1, dtype=h8.dtype)], dim=-1)
    return h9.reshape(*batch_shape, 3, 3).to(out_dtype)


def offsets_to_homography(offsets, patch_w: float, patch_h: float) -> torch.Tensor:
    """Homography sending the patch corner quad onto the quad displaced by offsets."""
    off = as_offsets(offsets)
    src = corners(patch_w, patch_h, dtype=torch.float64).to(off.device)
    dst = src + off.double()
    return solve_dlt(src.expand_as(dst), dst).to(off.dtype if off.dtype.is_floating_point else torch.float64)


def rescale_offsets(offsets, sigma_w: float, sigma_h: float):
    """Scale corner offsets to a resized frame: du *= sigma_w, dv *= sigma_h.

    Composing with solve_dlt commutes with similarity conjugation exactly:
    the homography of the rescaled offsets on the rescaled patch equals
    S H S^-1 with S = diag(sigma_w, sigma_h, 1).
    """
    if not (sigma_w > 0 and sigma_h > 0):
        raise NonPositiveScale(f"scale factors must be > 0, got ({sigma_w}, {sigma_h})")
    off = as_offsets(offsets)
    scale = off.new_tensor([float(sigma_w), float(sigma_h)])
    out = off * scale
    if torch.is_tensor(offsets):
        return out
    return out.numpy()


def apply_homography(h: torch.Tensor, pts) -> torch.Tensor:
    """Project (..., N, 2) points through a (..., 3, 3) homography."""
    p = pts if torch.is_tensor(pts) else torch.as_tensor(np.asarray(pts))
    p = p.to(h.dtype)
    ones = torch.ones(*p.shape[:-1], 1, dtype=p.dtype, device=p.device)
    homog = torch.cat([p, ones], dim=-1)
    proj = homog @ h.transpose(-1, -2)
    w = proj[..., 2:3]
    w = torch.where(w.abs() < 1e-12, torch.full_like(w, 1e-12), w)
    return proj[..., :2] / w


def warp_image(image, homography, canvas) -> torch.Tensor:
    """Warp an image onto a canvas by inverse bilinear sampling.

    `homography` maps source pixel coordinates to patch coordinates; the
    canvas origin translation is composed on top, so output pixel (x, y)
    samples the source at H^-1 (x - ox, y - oy), with zeros outside the
    source frame. `canvas` is a CanvasSpec or a plain (height, width) pair
    (origin (0, 0)). Accepts (C, H, W) or (B, C, H, W) tensors (numpy HWC
    arrays are converted and returned as HWC). Differentiable with respect
    to both the image and the homography.
    """
    if isinstance(canvas, CanvasSpec):
        out_size = (canvas.height, canvas.width)
        origin = canvas.origin
    else:
        out_size = (int(canvas[0]), int(canvas[1]))
        origin = (0, 0)
    is_numpy = isinstance(image, np.ndarray)
    if is_numpy:
        arr = np.asarray(image)
        squeeze_channel = arr.ndim == 2
        if squeeze_channel:
            arr = arr[:, :, None]
        img = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).double()
    else:
        img = image
    squeeze_batch = img.dim() == 3
    if squeeze_batch:
        img = img.unsqueeze(0)
    if img.dim() != 4:
        raise ValueError("image must be (C, H, W) or (B, C, H, W)")

    h = homography if torch.is_tensor(homography) else torch.as_tensor(np.asarray(homography))
    if h.dim() == 2:
        h = h.unsqueeze(0).expand(img.shape[0], 3, 3)
    h = h.to(img.dtype)
    if origin != (0, 0):
        h = translation(origin[0], origin[1], dtype=h.dtype).to(h.device) @ h

    out_h, out_w = int(out_size[0]), int(out_size[1])
    in_h, in_w = img.shape[-2], img.shape[-1]
    hinv = torch.linalg.inv(h)

    ys = torch.arange(out_h, dtype=img.dtype, device=img.device)
    xs = torch.arange(out_w, dtype=img.dtype, device=img.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    ones = torch.ones_like(gx)
    pts = torch.stack([gx, gy, ones], dim=0).reshape(3, -1)  # (3, N)
    mapped = hinv @ pts  # (B, 3, N)
    w = mapped[:, 2:3]
    w = torch.where(w.abs() < 1e-12, torch.full_like(w, 1e-12), w)
    xin = mapped[:, 0:1] / w
    yin = mapped[:, 1:2] / w
    # normalized coords for align_corners=True sampling
    gxn = 2.0 * xin / max(in_w - 1, 1) - 1.0
    gyn = 2.0 * yin / max(in_h - 1, 1) - 1.0
    grid = torch.cat([gxn, gyn], dim=1).permute(0, 2, 1).reshape(-1, out_h, out_w, 2)
    out = F.grid_sample(img, grid, mode="bilinear", padding_mode="zeros", align_corners=True)

    if squeeze_batch:
        out = out[0]
    if is_numpy:
        res = out.numpy().transpose(1, 2, 0)
        if squeeze_channel:
            res = res[:, :, 0]
        return np.ascontiguousarray(res.astype(np.asarray(image).dtype, copy=False))
    return out


def _round_up_8(value: float) -> int:
    return 8 * math.ceil(value / 8.0 - 1e-9)


def _as_pair(value) -> tuple[float, float]:
    if np.isscalar(value):
        return (float(value), float(value))
    return (float(value[0]), float(value[1]))


def compute_canvas(patch_w: int, patch_h: int, tau, rho) -> CanvasSpec:
    """Canvas holding a patch displaced by up to tau and perturbed by up to rho.

    tau and rho are per-axis (w, h) pairs (scalars broadcast). Each side
    grows by 2 * (tau + rho) and is rounded up to a multiple of 8 so three
    pooling halvings divide evenly; the origin centers the undisplaced patch.
    """
    tau_w, tau_h = _as_pair(tau)
    rho_w, rho_h = _as_pair(rho)
    if tau_w < 0 or tau_h < 0 or rho_w < 0 or rho_h < 0:
        raise ValueError("tau and rho must be non-negative")
    width = _round_up_8(patch_w + 2.0 * (tau_w + rho_w))
    height = _round_up_8(patch_h + 2.0 * (tau_h + rho_h))
    ox = (width - int(patch_w)) // 2
    oy = (height - int(patch_h)) // 2
    return CanvasSpec(width=width, height=height, origin=(ox, oy))


def canvas_for_pair(homography, ref_w: int, ref_h: int, tgt_w: int, tgt_h: int) -> CanvasSpec:
    """Canvas bounding the reference frame union the projected target frame.

    Used at inference where displacements are not bounded by a synthesis
    config. Sides are rounded up to multiples of 8 so network inputs stay
    divisible by 8.
    """
    h = homography if torch.is_tensor(homography) else torch.as_tensor(np.asarray(homography))
    quad = apply_homography(h.double(), corners(tgt_w, tgt_h))
    xs = torch.cat([quad[..., 0].reshape(-1), torch.tensor([0.0, float(ref_w)])])
    ys = torch.cat([quad[..., 1].reshape(-1), torch.tensor([0.0, float(ref_h)])])
    min_x, max_x = float(xs.min()), float(xs.max())
    min_y, max_y = float(ys.min()), float(ys.max())
    ox = int(math.ceil(max(0.0, -min_x)))
    oy = int(math.ceil(max(0.0, -min_y)))
    width = _round_up_8(ox + max(max_x, float(ref_w)))
    height = _round_up_8(oy + max(max_y, float(ref_h)))
    return CanvasSpec(width=width, height=height, origin=(ox, oy))
