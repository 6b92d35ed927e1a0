"""Synthetic stitching quadruples from an ordinary image corpus.

Each sample is (reference, target, offsets, label, canvas): two patch crops
of one source image related by a known homography, the ground-truth corner
offsets, and the exact stitched panorama on its canvas. Offsets combine a
shared uniform translation in [-tau, tau]^2 with independent per-corner
perturbations in [-rho, rho]^2; disabling translation reduces to the
perturbation-only variant.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import shapely
import torch
from shapely.geometry import Polygon, box

from . import images
from .errors import CorruptManifest, MissingImage, PatchOutOfBounds
from .geometry import CanvasSpec, compute_canvas, offsets_to_homography, warp_image

MAX_BRIGHTNESS_SHIFT = 0.3


@dataclass
class SynthesisConfig:
    """Generation knobs; tau and rho are fractions of the patch side."""

    patch_ratio: float = 2.4
    tau_frac: float = 0.5
    rho_frac: float = 0.2
    patch_out: tuple[int, int] = (128, 128)
    translation_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.patch_ratio > 1:
            raise ValueError("patch_ratio must exceed 1")
        if self.tau_frac < 0 or self.rho_frac < 0:
            raise ValueError("tau_frac and rho_frac must be non-negative")
        if not self.tau_frac + self.rho_frac < 1:
            raise ValueError("tau_frac + rho_frac must stay below 1")
        self.patch_out = (int(self.patch_out[0]), int(self.patch_out[1]))

    def tau_out(self) -> tuple[float, float]:
        """Max translation per axis, in output-patch pixels."""
        if not self.translation_enabled:
            return (0.0, 0.0)
        return (self.tau_frac * self.patch_out[0], self.tau_frac * self.patch_out[1])

    def rho_out(self) -> tuple[float, float]:
        """Max corner perturbation per axis, in output-patch pixels."""
        return (self.rho_frac * self.patch_out[0], self.rho_frac * self.patch_out[1])

    def canvas(self) -> CanvasSpec:
        return compute_canvas(self.patch_out[0], self.patch_out[1], self.tau_out(), self.rho_out())


@dataclass
class StitchQuadruple:
    reference: np.ndarray
    target: np.ndarray
    offsets: np.ndarray  # (4, 2) float64, TL/TR/BL/BR (du, dv)
    label: np.ndarray
    canvas: CanvasSpec
    record_id: str = field(default="", compare=False)


def _rng(rng_state) -> np.random.Generator:
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


def sample_offsets(cfg: SynthesisConfig, rng_state) -> np.ndarray:
    """Draw ground-truth corner offsets in output-patch pixel units.

    A single translation is shared by all four corners; perturbations are
    independent per corner and axis. Draw order is fixed for determinism.
    """
    rng = _rng(rng_state)
    tau_u, tau_v = cfg.tau_out()
    rho_u, rho_v = cfg.rho_out()
    if cfg.translation_enabled:
        t = np.array([rng.uniform(-tau_u, tau_u), rng.uniform(-tau_v, tau_v)])
    else:
        t = np.zeros(2)
    pert_u = rng.uniform(-rho_u, rho_u, 4)
    pert_v = rng.uniform(-rho_v, rho_v, 4)
    return t[None, :] + np.stack([pert_u, pert_v], axis=1)


def synthesize_quadruple(source: np.ndarray, cfg: SynthesisConfig, rng_state) -> StitchQuadruple:
    """One training sample from one source image.

    The patch is (W, H)/patch_ratio of the source, placed so the displaced
    target quad stays inside; both crops land on cfg.patch_out via a single
    bilinear resampling, so the target satisfies: warping it by
    offsets_to_homography(offsets) aligns it with the reference.
    """
    rng = _rng(rng_state)
    src = np.asarray(source, dtype=np.float32)
    if src.ndim == 2:
        src = src[:, :, None]
    src_h, src_w = src.shape[:2]
    out_w, out_h = cfg.patch_out

    patch_w = src_w / cfg.patch_ratio
    patch_h = src_h / cfg.patch_ratio
    tau_u, tau_v = cfg.tau_out()
    rho_u, rho_v = cfg.rho_out()
    # margins in source units; tau/rho scale with the patch, not the output
    margin_w = (tau_u + rho_u) * patch_w / out_w
    margin_h = (tau_v + rho_v) * patch_h / out_h
    lo_x, hi_x = margin_w, src_w - patch_w - margin_w
    lo_y, hi_y = margin_h, src_h - patch_h - margin_h
    if hi_x < lo_x - 1e-6 or hi_y < lo_y - 1e-6 or patch_w < 2 or patch_h < 2:
        raise PatchOutOfBounds(
            f"source {src_w}x{src_h} cannot host a {patch_w:.1f}x{patch_h:.1f} patch "
            f"with margins ({margin_w:.1f}, {margin_h:.1f})"
        )
    px = rng.uniform(lo_x, max(hi_x, lo_x))
    py = rng.uniform(lo_y, max(hi_y, lo_y))

    offsets = sample_offsets(cfg, rng)

    # source -> patch-output coordinates: x_out = (s - p) * out / patch
    a_ref = torch.tensor(
        [
            [out_w / patch_w, 0.0, -px * out_w / patch_w],
            [0.0, out_h / patch_h, -py * out_h / patch_h],
            [0.0, 0.0, 1.0],
        ],
        dtype=torch.float64,
    )
    h_out = offsets_to_homography(offsets, out_w, out_h)

    src_t = images.to_tensor(src).double()
    reference = warp_image(src_t, a_ref, (out_h, out_w))
    # target pixels sample the source through the offset homography, so that
    # warping the target by h_out reproduces the reference
    h_tgt = torch.linalg.inv(h_out) @ a_ref
    target = warp_image(src_t, h_tgt, (out_h, out_w))

    canvas = cfg.canvas()
    content = warp_image(src_t, a_ref, canvas)
    mask = _union_mask(offsets, out_w, out_h, canvas)
    label = content * torch.from_numpy(mask)[None, :, :]

    return StitchQuadruple(
        reference=images.from_tensor(reference.float()),
        target=images.from_tensor(target.float()),
        offsets=np.asarray(offsets, dtype=np.float64),
        label=images.from_tensor(label.float()),
        canvas=canvas,
    )


def _union_mask(offsets: np.ndarray, out_w: int, out_h: int, canvas: CanvasSpec) -> np.ndarray:
    """Float mask of the reference rect union the displaced quad, on the canvas grid."""
    quad_pts = np.array(
        [[0.0, 0.0], [out_w, 0.0], [0.0, out_h], [out_w, out_h]]
    ) + np.asarray(offsets)
    # polygon boundary order TL, TR, BR, BL
    quad = Polygon([quad_pts[0], quad_pts[1], quad_pts[3], quad_pts[2]])
    region = box(0.0, 0.0, float(out_w), float(out_h)).union(quad)
    ox, oy = canvas.origin
    xs = np.arange(canvas.width, dtype=np.float64) - ox
    ys = np.arange(canvas.height, dtype=np.float64) - oy
    gx, gy = np.meshgrid(xs, ys)
    inside = shapely.intersects_xy(region, gx.ravel(), gy.ravel())
    return inside.reshape(canvas.height, canvas.width).astype(np.float64)


def brightness_augment(img: np.ndarray, shift: float | None = None, rng_state=None) -> np.ndarray:
    """Add a constant brightness shift and clip to [0, 1].

    shift may be given explicitly (|shift| <= 0.3) or drawn uniformly from
    the allowed range using rng_state.
    """
    if shift is None:
        shift = float(_rng(rng_state).uniform(-MAX_BRIGHTNESS_SHIFT, MAX_BRIGHTNESS_SHIFT))
    if abs(shift) > MAX_BRIGHTNESS_SHIFT:
        raise ValueError(f"|shift| must be <= {MAX_BRIGHTNESS_SHIFT}, got {shift}")
    return np.clip(np.asarray(img) + shift, 0.0, 1.0)


def write_dataset(records, directory: str) -> str:
    """Write quadruples as 8-bit PNGs plus a text manifest; returns manifest path.

    Layout: <dir>/manifest, <dir>/imgs/<id>_{ref,tgt,label}.png. Offsets and
    canvas geometry live in the manifest at full decimal precision.
    """
    directory = str(directory)
    img_dir = os.path.join(directory, "imgs")
    os.makedirs(img_dir, exist_ok=True)
    lines = []
    count = 0
    for i, quad in enumerate(records):
        rid = quad.record_id or f"{i:06d}"
        rel = {kind: os.path.join("imgs", f"{rid}_{kind}.png") for kind in ("ref", "tgt", "label")}
        images.save_image(os.path.join(directory, rel["ref"]), quad.reference)
        images.save_image(os.path.join(directory, rel["tgt"]), quad.target)
        images.save_image(os.path.join(directory, rel["label"]), quad.label)
        off = " ".join(repr(float(v)) for v in np.asarray(quad.offsets).reshape(8))
        c = quad.canvas
        lines.append(
            f"{rid} {rel['ref']} {rel['tgt']} {rel['label']} {off} "
            f"{c.width} {c.height} {c.origin[0]} {c.origin[1]}"
        )
        count += 1
    manifest = os.path.join(directory, "manifest")
    tmp = manifest + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(f"count {count}\n")
        fh.writelines(line + "\n" for line in lines)
    os.replace(tmp, manifest)
    return manifest


def _parse_manifest(directory: str):
    manifest = os.path.join(str(directory), "manifest")
    if not os.path.isfile(manifest):
        raise CorruptManifest(f"no manifest in {directory}")
    with open(manifest) as fh:
        raw = fh.read().splitlines()
    if not raw or len(raw[0].split()) != 2 or raw[0].split()[0] != "count":
        raise CorruptManifest(f"{manifest}: missing count header")
    try:
        count = int(raw[0].split()[1])
    except ValueError as exc:
        raise CorruptManifest(f"{manifest}: bad count header") from exc
    body = [line for line in raw[1:] if line.strip()]
    if len(body) != count:
        raise CorruptManifest(f"{manifest}: header says {count} records, found {len(body)}")
    records = []
    for line in body:
        parts = line.split()
        if len(parts) != 16:
            raise CorruptManifest(f"{manifest}: malformed record line: {line!r}")
        rid, ref_p, tgt_p, label_p = parts[:4]
        try:
            offsets = np.array([float(v) for v in parts[4:12]], dtype=np.float64).reshape(4, 2)
            w, h, ox, oy = (int(v) for v in parts[12:16])
        except ValueError as exc:
            raise CorruptManifest(f"{manifest}: malformed record {rid}") from exc
        records.append((rid, ref_p, tgt_p, label_p, offsets, CanvasSpec(w, h, (ox, oy))))
    return records


def read_dataset(directory: str):
    """Iterate stored quadruples; validates the manifest and file presence up front."""
    directory = str(directory)
    records = _parse_manifest(directory)
    for rid, ref_p, tgt_p, label_p, _, _ in records:
        for rel in (ref_p, tgt_p, label_p):
            if not os.path.isfile(os.path.join(directory, rel)):
                raise MissingImage(f"record {rid}: missing {rel}")
    for rid, ref_p, tgt_p, label_p, offsets, canvas in records:
        yield StitchQuadruple(
            reference=images.load_image(os.path.join(directory, ref_p)),
            target=images.load_image(os.path.join(directory, tgt_p)),
            offsets=offsets,
            label=images.load_image(os.path.join(directory, label_p)),
            canvas=canvas,
            record_id=rid,
        )


def synthesize_dataset(sources, count: int, cfg: SynthesisConfig, directory: str) -> str:
    """Generate `count` quadruples cycling over source images; returns manifest path.

    Record i draws from an rng seeded by (cfg.seed, i), so generation is
    deterministic and shardable.
    """
    sources = list(sources)
    if not sources:
        raise PatchOutOfBounds("no source images supplied")

    def gen():
        for i in range(count):
            rng = np.random.default_rng([cfg.seed, i])
            quad = synthesize_quadruple(sources[i % len(sources)], cfg, rng)
            quad.record_id = f"{i:06d}"
            yield quad

    return write_dataset(gen(), directory)
