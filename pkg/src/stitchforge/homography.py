"""Large-baseline deep homography estimator.

A siamese convolutional extractor builds a three-level feature pyramid;
each level correlates reference features against (re-warped) target
features and regresses a residual 4-point offset, coarse to fine: global
correlation at 1/8 resolution, then local windows at 1/4 and 1/2. The
final offsets are the sum of the per-level residuals, always expressed in
network-input pixel units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import images
from .correlation import correlate
from .errors import IndivisibleInput, ShapeMismatch
from .geometry import offsets_to_homography, rescale_offsets, warp_image

# extractor schedule: filters per conv layer, 2x max-pool after each pair
EXTRACTOR_FILTERS = (64, 64, 128, 128, 256, 256, 512, 512)

# pyramid levels coarse to fine: (downscale factor, conv layers needed,
# local correlation radius; None = global search)
LEVEL_SPECS = ((8, 8, None), (4, 6, 8), (2, 4, 4))

HEAD_CONV_FILTERS = (256, 128, 64)
HEAD_HIDDEN = 1024


def _scaled(base: int, mult: float) -> int:
    return max(4, int(round(base * mult)))


@dataclass
class HomographyNetConfig:
    """Architecture switches; defaults give the full-width layout."""

    net_size: int = 128
    width_mult: float = 1.0
    pyramid_levels: int = 3
    use_correlation: bool = True
    warp_features: bool = False

    def __post_init__(self):
        if self.net_size % 8 != 0:
            raise IndivisibleInput(f"net_size must be divisible by 8, got {self.net_size}")
        # the coarsest regression head downsamples its 1/8-scale map 3 more times
        if self.net_size < 64:
            raise ValueError(f"net_size must be at least 64, got {self.net_size}")
        if not 1 <= self.pyramid_levels <= 3:
            raise ValueError("pyramid_levels must be 1, 2 or 3")


@dataclass
class PyramidFeatures:
    """Feature maps at 1/8, 1/4 and 1/2 of the network input, coarse to fine."""

    levels: tuple

    def __post_init__(self):
        self.levels = tuple(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


@dataclass
class OffsetPrediction:
    """Per-level residual corner offsets and their sum (network-pixel units)."""

    deltas: tuple
    total: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.deltas = tuple(self.deltas)
        total = self.deltas[0]
        for d in self.deltas[1:]:
            total = total + d
        self.total = total

    @property
    def delta1(self):
        return self.deltas[0]

    @property
    def delta2(self):
        return self.deltas[1] if len(self.deltas) > 1 else None

    @property
    def delta3(self):
        return self.deltas[2] if len(self.deltas) > 2 else None


class FeatureExtractor(nn.Module):
    """8 conv layers (3x3, ReLU), 2x max-pool after each pair, shared weights."""

    def __init__(self, width_mult: float = 1.0, in_channels: int = 1):
        super().__init__()
        convs = []
        ch_in = in_channels
        for ch_out in EXTRACTOR_FILTERS:
            ch = _scaled(ch_out, width_mult)
            convs.append(nn.Conv2d(ch_in, ch, 3, padding=1))
            ch_in = ch
        self.convs = nn.ModuleList(convs)
        self.pool = nn.MaxPool2d(2)

    def run(self, x: torch.Tensor, n_convs: int = 8) -> torch.Tensor:
        """Run the first n_convs layers (pooling before each odd pair)."""
        if x.shape[-1] % 8 != 0 or x.shape[-2] % 8 != 0:
            raise IndivisibleInput(
                f"input {tuple(x.shape[-2:])} not divisible by 8"
            )
        for i, conv in enumerate(self.convs[:n_convs]):
            if i in (2, 4, 6):
                x = self.pool(x)
            x = F.relu(conv(x))
        return x

    def forward(self, x: torch.Tensor) -> PyramidFeatures:
        if x.shape[-1] % 8 != 0 or x.shape[-2] % 8 != 0:
            raise IndivisibleInput(
                f"input {tuple(x.shape[-2:])} not divisible by 8"
            )
        feats = {}
        for i, conv in enumerate(self.convs):
            if i in (2, 4, 6):
                x = self.pool(x)
            x = F.relu(conv(x))
            if i == 3:
                feats[2] = x
            elif i == 5:
                feats[4] = x
            elif i == 7:
                feats[8] = x
        return PyramidFeatures(levels=(feats[8], feats[4], feats[2]))


class RegressionHead(nn.Module):
    """3 stride-2 convs, flatten, 2 fully connected layers ending in 8 offsets.

    The final layer is zero-initialized so an untrained network predicts the
    identity homography.
    """

    def __init__(self, in_channels: int, in_size: int, width_mult: float = 1.0):
        super().__init__()
        self.in_channels = in_channels
        self.in_size = in_size
        chs = [_scaled(c, width_mult) for c in HEAD_CONV_FILTERS]
        self.conv1 = nn.Conv2d(in_channels, chs[0], 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(chs[0], chs[1], 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(chs[1], chs[2], 3, stride=2, padding=1)
        flat = chs[2] * (in_size // 8) ** 2
        self.fc1 = nn.Linear(flat, _scaled(HEAD_HIDDEN, width_mult))
        self.fc2 = nn.Linear(_scaled(HEAD_HIDDEN, width_mult), 8)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, vol: torch.Tensor) -> torch.Tensor:
        if vol.shape[1] != self.in_channels or vol.shape[-1] != self.in_size:
            raise ShapeMismatch(
                f"head expects ({self.in_channels}, {self.in_size}, {self.in_size}), "
                f"got {tuple(vol.shape[1:])}"
            )
        x = F.relu(self.conv1(vol))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        x = torch.flatten(x, 1)
        x = F.relu(self.fc1(x))
        return self.fc2(x).reshape(-1, 4, 2)


class HomographyNet(nn.Module):
    """Residual coarse-to-fine 4-point homography regressor."""

    def __init__(self, config: HomographyNetConfig | None = None):
        super().__init__()
        self.config = config or HomographyNetConfig()
        cfg = self.config
        self.extractor = FeatureExtractor(cfg.width_mult)
        heads = []
        for scale, n_convs, radius in LEVEL_SPECS[: cfg.pyramid_levels]:
            size = cfg.net_size // scale
            feat_ch = _scaled(EXTRACTOR_FILTERS[n_convs - 1], cfg.width_mult)
            if cfg.use_correlation:
                r = radius if radius is not None else max(size, 1)
                in_ch = (2 * r + 1) ** 2
            else:
                in_ch = 2 * feat_ch
            heads.append(RegressionHead(in_ch, size, cfg.width_mult))
        self.heads = nn.ModuleList(heads)

    def level_radius(self, level_index: int) -> int:
        scale, _, radius = LEVEL_SPECS[level_index]
        return radius if radius is not None else self.config.net_size // scale

    def extract_pyramid(self, img: torch.Tensor) -> PyramidFeatures:
        return self.extractor(img)

    def predict_offsets(self, ref_pyr: PyramidFeatures, tgt_img: torch.Tensor) -> OffsetPrediction:
        """Coarse-to-fine residual prediction against a target image.

        Level 1 correlates against the unwarped target features; later
        levels warp the target by the accumulated offsets' homography and
        re-extract (image-space warping by default; with warp_features the
        level's feature map is warped directly, offsets rescaled by
        level_size / net_size).
        """
        cfg = self.config
        s = cfg.net_size
        tgt_pyr = self.extract_pyramid(tgt_img) if cfg.warp_features else None
        deltas = []
        acc = None
        for i, (scale, n_convs, radius) in enumerate(LEVEL_SPECS[: cfg.pyramid_levels]):
            ref_feat = ref_pyr[i]
            if i == 0 or acc is None:
                tgt_feat = tgt_pyr[i] if cfg.warp_features else self.extractor.run(tgt_img, n_convs)
            elif cfg.warp_features:
                feat = tgt_pyr[i]
                fh, fw = feat.shape[-2:]
                h_lvl = offsets_to_homography(rescale_offsets(acc, fw / s, fh / s), fw, fh)
                tgt_feat = warp_image(feat, h_lvl.to(feat.dtype), (fh, fw))
            else:
                h_img = offsets_to_homography(acc, s, s)
                warped = warp_image(tgt_img, h_img.to(tgt_img.dtype), (s, s))
                tgt_feat = self.extractor.run(warped, n_convs)
            if cfg.use_correlation:
                r = radius if radius is not None else max(ref_feat.shape[-2:])
                vol = correlate(ref_feat, tgt_feat, r)
            else:
                vol = torch.cat([ref_feat, tgt_feat], dim=1)
            delta = self.heads[i](vol)
            deltas.append(delta)
            acc = delta if acc is None else acc + delta
        return OffsetPrediction(deltas=tuple(deltas))

    def forward(self, ref_img: torch.Tensor, tgt_img: torch.Tensor) -> OffsetPrediction:
        return self.predict_offsets(self.extract_pyramid(ref_img), tgt_img)


def homography_loss(
    pred: OffsetPrediction,
    gt,
    weights: tuple = (1.0, 0.25, 0.1),
    norm: str = "l2_vertex",
    return_terms: bool = False,
):
    """Weighted multi-level supervision on the partial offset sums.

    Each level contributes w_i * d(gt, delta_1 + ... + delta_i), where d is
    the mean Euclidean vertex distance (or mean absolute error with
    norm='l1'), averaged over the batch. With return_terms, also returns the
    unweighted per-level distances as floats.
    """
    gt_t = gt if torch.is_tensor(gt) else torch.as_tensor(np.asarray(gt))
    gt_t = gt_t.to(pred.deltas[0].dtype)
    if gt_t.dim() == 2:
        gt_t = gt_t.unsqueeze(0)
    loss = None
    partial = None
    terms = []
    for i, delta in enumerate(pred.deltas):
        partial = delta if partial is None else partial + delta
        err = partial - gt_t
        if norm == "l2_vertex":
            d = err.pow(2).sum(dim=-1).clamp_min(1e-16).sqrt().mean(dim=-1)
        elif norm == "l1":
            d = err.abs().mean(dim=(-1, -2))
        else:
            raise ValueError(f"unknown loss norm: {norm}")
        d = d.mean()
        terms.append(d)
        term = weights[i] * d
        loss = term if loss is None else loss + term
    if return_terms:
        return loss, [float(t.detach()) for t in terms]
    return loss


def infer_homography(ref, tgt, net: HomographyNet, net_size: int | None = None):
    """Size-free inference on two equal-size images of arbitrary resolution.

    Resizes both inputs to the network size, predicts offsets, rescales them
    by (W / net, H / net), and returns (full-resolution offsets (4, 2)
    float64, homography (3, 3) float64). Memory does not grow with W, H.
    """
    s = int(net_size or net.config.net_size)
    ref_a = np.asarray(ref, dtype=np.float32)
    tgt_a = np.asarray(tgt, dtype=np.float32)
    if ref_a.shape[:2] != tgt_a.shape[:2]:
        raise ShapeMismatch(f"inputs differ in size: {ref_a.shape[:2]} vs {tgt_a.shape[:2]}")
    h_img, w_img = ref_a.shape[:2]
    if min(h_img, w_img) < 32:
        raise ValueError("inputs must be at least 32 pixels on each side")

    def prep(arr):
        g = images.to_gray(arr)
        if (g.shape[1], g.shape[0]) != (s, s):
            g = images.resize(g, s, s)
        return torch.from_numpy(np.ascontiguousarray(g, dtype=np.float32))[None, None]

    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            pred = net(prep(ref_a), prep(tgt_a))
    finally:
        net.train(was_training)
    offsets = pred.total[0].double().numpy()
    full = rescale_offsets(offsets, w_img / s, h_img / s)
    h = offsets_to_homography(full, w_img, h_img)
    return np.asarray(full, dtype=np.float64), h.numpy()
