"""Image file I/O and array/tensor conversions.

Arrays at package boundaries are float32 HWC RGB in [0, 1]; tensors inside
the networks are CHW (batched: BCHW). cv2 stores BGR on disk, converted here.
"""

from __future__ import annotations

import os

import cv2
import numpy as np
import torch

# ITU-R BT.601 luma weights, same convention cv2 uses for RGB2GRAY
_LUMA = (0.299, 0.587, 0.114)


def load_image(path: str) -> np.ndarray:
    """Read an image file as float32 RGB HWC in [0, 1]."""
    data = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if data is None:
        raise FileNotFoundError(f"cannot read image: {path}")
    return cv2.cvtColor(data, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def save_image(path: str, img: np.ndarray) -> None:
    """Write a float HWC RGB image in [0, 1] (or a single-channel map) as 8-bit."""
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = cv2.cvtColor(clamp01(arr).astype(np.float32), cv2.COLOR_RGB2BGR)
    else:
        arr = clamp01(np.squeeze(arr)).astype(np.float32)
    out = np.round(arr * 255.0).astype(np.uint8)
    parent = os.path.dirname(str(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    if not cv2.imwrite(str(path), out):
        raise OSError(f"cannot write image: {path}")


def clamp01(img):
    return np.clip(img, 0.0, 1.0)


def to_gray(img: np.ndarray) -> np.ndarray:
    """Luma grayscale of an HWC RGB array; passthrough if already single-channel."""
    if img.ndim == 2:
        return img
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return _LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b


def tensor_gray(img: torch.Tensor) -> torch.Tensor:
    """Luma grayscale of a BCHW RGB tensor, keeping a channel dim of 1."""
    if img.shape[-3] == 1:
        return img
    w = img.new_tensor(_LUMA).view(1, 3, 1, 1)
    return (img * w).sum(dim=-3, keepdim=True)


def to_tensor(img: np.ndarray, device=None) -> torch.Tensor:
    """HWC (or HW) float array -> float32 CHW tensor."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(device or "cpu")


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """CHW (or BCHW with batch 1) tensor -> float32 HWC array."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ValueError("from_tensor expects batch size 1")
        t = t[0]
    arr = t.detach().cpu().numpy().transpose(1, 2, 0)
    return np.ascontiguousarray(arr.astype(np.float32))


def resize(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of an HWC (or HW) array to the given size."""
    out = cv2.resize(img, (int(width), int(height)), interpolation=cv2.INTER_LINEAR)
    return out
