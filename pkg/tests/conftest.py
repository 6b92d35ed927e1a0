import numpy as np
import pytest
import torch
from skimage import data


def _to_rgb(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=2)
    return (arr.astype(np.float32) / 255.0).clip(0.0, 1.0)


@pytest.fixture(scope="session")
def corpus_images():
    """Small bank of natural photos used as synthesis sources."""
    return [
        _to_rgb(data.astronaut()),
        _to_rgb(data.coffee()),
        _to_rgb(data.chelsea()),
        _to_rgb(data.cat()),
        _to_rgb(data.rocket()),
        _to_rgb(data.camera()),
        _to_rgb(data.moon()),
    ]


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory, corpus_images):
    """The same bank written to disk as PNG files."""
    import cv2

    root = tmp_path_factory.mktemp("corpus")
    for i, img in enumerate(corpus_images):
        bgr = cv2.cvtColor((img * 255.0).round().astype(np.uint8), cv2.COLOR_RGB2BGR)
        cv2.imwrite(str(root / f"src_{i:02d}.png"), bgr)
    return str(root)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
