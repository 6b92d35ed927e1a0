"""Metrics and reports: 4pt RMSE, percentile splits, baselines, fidelity."""

from __future__ import annotations

import json
import math
import os

import numpy as np
from shapely.geometry import Polygon, box
from skimage.metrics import structural_similarity

from . import images
from .errors import DatasetEmpty
from .homography import infer_homography

PSNR_CAP = 99.0

EMPTY_SPLIT = "-"  # placeholder for splits with no samples


def rmse_4pt(pred, gt) -> float:
    """Root of the mean squared error over the eight offset coordinates."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    if p.shape != (8,) or g.shape != (8,):
        raise ValueError("corner offsets must hold exactly 8 scalars")
    return float(np.sqrt(np.mean((p - g) ** 2)))


def split_report(errors) -> dict:
    """Percentile-split means over ascending-sorted errors.

    Boundaries at floor(0.3 N) and floor(0.6 N); a single sample lands in
    the first split; empty splits report a placeholder.
    """
    errs = sorted(float(e) for e in errors)
    n = len(errs)
    if n == 1:
        groups = [errs, [], []]
    else:
        b1, b2 = math.floor(0.3 * n), math.floor(0.6 * n)
        groups = [errs[:b1], errs[b1:b2], errs[b2:]]
    means = [float(np.mean(g)) if g else None for g in groups]
    return {
        "top_0_30": means[0],
        "top_30_60": means[1],
        "top_60_100": means[2],
        "overall": float(np.mean(errs)) if errs else None,
        "count": n,
    }


def overlap_rate(offsets, patch_w: int, patch_h: int) -> float:
    """Fraction of the reference patch covered by the displaced target quad."""
    off = np.asarray(offsets, dtype=np.float64).reshape(4, 2)
    quad_pts = np.array(
        [[0.0, 0.0], [patch_w, 0.0], [0.0, patch_h], [patch_w, patch_h]]
    ) + off
    quad = Polygon([quad_pts[0], quad_pts[1], quad_pts[3], quad_pts[2]])
    ref = box(0.0, 0.0, float(patch_w), float(patch_h))
    if not quad.is_valid:
        quad = quad.buffer(0)
    return float(quad.intersection(ref).area / ref.area)


def evaluate_model(model, dataset, net_size: int | None = None) -> dict:
    """Per-sample RMSE against the identity baseline, plus split aggregation.

    `dataset` is a manifest directory or an iterable of quadruples; the
    model predicts at its configured network size regardless of patch size.
    """
    from .synthesis import read_dataset  # local import to avoid cycle

    if isinstance(dataset, (str, os.PathLike)):
        quads = list(read_dataset(dataset))
    else:
        quads = list(dataset)
    if not quads:
        raise DatasetEmpty("evaluation requires at least one quadruple")

    per_sample = []
    for i, q in enumerate(quads):
        h, w = q.reference.shape[:2]
        offs, hom = infer_homography(q.reference, q.target, model, net_size)
        gt = np.asarray(q.offsets, dtype=np.float64)
        per_sample.append(
            {
                "id": q.record_id or f"{i:06d}",
                "rmse": rmse_4pt(offs, gt),
                "rmse_identity": rmse_4pt(np.zeros((4, 2)), gt),
                "overlap_rate": overlap_rate(gt, w, h),
                "homography": [float(v) for v in np.asarray(hom).reshape(9)],
            }
        )
    rmses = [s["rmse"] for s in per_sample]
    identity = [s["rmse_identity"] for s in per_sample]
    return {
        "count": len(per_sample),
        "per_sample": per_sample,
        "splits": split_report(rmses),
        "splits_identity": split_report(identity),
        "mean_rmse": float(np.mean(rmses)),
        "mean_rmse_identity": float(np.mean(identity)),
    }


def image_fidelity(pred, label) -> tuple[float, float]:
    """(PSNR dB capped at 99, SSIM) over the label's non-zero canvas region."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(label, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, :, None]
    if g.ndim == 2:
        g = g[:, :, None]
    if p.shape != g.shape:
        raise ValueError(f"shapes differ: {p.shape} vs {g.shape}")
    mask = np.any(g > 0, axis=2)
    if not mask.any():
        mask = np.ones(g.shape[:2], dtype=bool)
    mse = float(np.mean((p[mask] - g[mask]) ** 2))
    psnr = PSNR_CAP if mse < 10 ** (-PSNR_CAP / 10.0) else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))
    kwargs = {"data_range": 1.0, "full": True}
    if p.shape[2] > 1:
        kwargs["channel_axis"] = 2
    _, ssim_map = structural_similarity(p.squeeze(), g.squeeze(), **kwargs)
    if ssim_map.ndim == 3:
        ssim = float(np.mean(ssim_map[mask]))
    else:
        ssim = float(np.mean(ssim_map[mask]))
    return psnr, ssim


def save_report(report: dict, path: str) -> None:
    path = str(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_report(path: str) -> dict:
    with open(str(path)) as fh:
        return json.load(fh)


def _fmt(value) -> str:
    return EMPTY_SPLIT if value is None else f"{value:.4f}"


def render_report(report: dict, include_splits: bool = True) -> str:
    """Human-readable table for a report produced by evaluate_model."""
    lines = [
        f"samples: {report['count']}",
        f"mean 4pt-RMSE: {_fmt(report['mean_rmse'])} (identity {_fmt(report['mean_rmse_identity'])})",
    ]
    if include_splits:
        header = f"{'':12s}{'top 0-30%':>12s}{'30-60%':>12s}{'60-100%':>12s}{'overall':>12s}"
        lines.append(header)
        for name, key in (("model", "splits"), ("identity", "splits_identity")):
            s = report[key]
            lines.append(
                f"{name:12s}{_fmt(s['top_0_30']):>12s}{_fmt(s['top_30_60']):>12s}"
                f"{_fmt(s['top_60_100']):>12s}{_fmt(s['overall']):>12s}"
            )
    return "\n".join(lines)


def overlap_curve(report: dict, out_path: str, bins: int = 5) -> str:
    """Plot mean RMSE bucketed by overlap rate; returns the image path."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rates = np.array([s["overlap_rate"] for s in report["per_sample"]])
    rmses = np.array([s["rmse"] for s in report["per_sample"]])
    idents = np.array([s["rmse_identity"] for s in report["per_sample"]])
    edges = np.linspace(rates.min(), rates.max() + 1e-9, bins + 1)
    centers, mean_m, mean_i = [], [], []
    for i in range(bins):
        sel = (rates >= edges[i]) & (rates < edges[i + 1])
        if sel.any():
            centers.append(0.5 * (edges[i] + edges[i + 1]))
            mean_m.append(rmses[sel].mean())
            mean_i.append(idents[sel].mean())
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(centers, mean_m, "o-", label="model")
    ax.plot(centers, mean_i, "s--", label="identity")
    ax.set_xlabel("overlap rate")
    ax.set_ylabel("mean 4pt-RMSE")
    ax.legend()
    fig.tight_layout()
    out_path = str(out_path)
    parent = os.path.dirname(out_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
