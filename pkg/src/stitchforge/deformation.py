"""Edge-preserved deformation network.

Two mirrored encoder-decoder branches reconstruct the stitched result from
the pair of canvas-warped inputs: an edge branch working on fixed-kernel
edge maps, and an image branch whose decoder stages receive the edge
decoder's deconvolution outputs as guidance; their final feature maps merge
in a small fusion block before the sigmoid output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import images
from .errors import ExtractorUnavailable, MultiChannelInput, ShapeMismatch
from .geometry import CanvasSpec

# kernel counts for the 15 conv layers of each branch (last is the 1x1 output)
BRANCH_FILTERS = (64, 64, 128, 128, 256, 256, 512, 512, 256, 256, 128, 128, 64, 64, 1)

_EDGE_KERNELS: dict = {}


def _scaled(base: int, mult: float) -> int:
    return max(4, int(round(base * mult)))


@dataclass
class DeformationNetConfig:
    width_mult: float = 1.0
    use_edge_branch: bool = True


@dataclass
class StitchInputs:
    """The two inputs re-projected onto a shared stitching canvas."""

    warped_ref: np.ndarray
    warped_tgt: np.ndarray
    canvas: CanvasSpec


def _edge_kernels(dtype, device):
    key = (dtype, str(device))
    if key not in _EDGE_KERNELS:
        kv = torch.tensor([[-1.0], [1.0]], dtype=dtype, device=device).reshape(1, 1, 2, 1)
        kh = torch.tensor([[-1.0, 1.0]], dtype=dtype, device=device).reshape(1, 1, 1, 2)
        _EDGE_KERNELS[key] = (kv, kh)
    return _EDGE_KERNELS[key]


def extract_edges(gray: torch.Tensor) -> torch.Tensor:
    """Fixed-kernel edge map: |G - G shifted down| + |G - G shifted right|.

    E[i][j] = |G[i][j] - G[i-1][j]| + |G[i][j] - G[i][j-1]| with zero-padded
    out-of-range neighbors, clipped to [0, 1]. Realized as two fixed
    (non-trainable) difference convolutions; not a learned layer.
    """
    squeeze = gray.dim() == 3
    g = gray.unsqueeze(0) if squeeze else gray
    if g.dim() != 4:
        raise ValueError("extract_edges expects (B, 1, H, W) or (1, H, W)")
    if g.shape[1] != 1:
        raise MultiChannelInput(f"edge extraction needs 1 channel, got {g.shape[1]}")
    kv, kh = _edge_kernels(g.dtype, g.device)
    dv = F.conv2d(F.pad(g, (0, 0, 1, 0)), kv)
    dh = F.conv2d(F.pad(g, (1, 0, 0, 0)), kh)
    e = torch.clamp(dv.abs() + dh.abs(), 0.0, 1.0)
    return e.squeeze(0) if squeeze else e


class _EncoderDecoder(nn.Module):
    """Shared 15-layer U-shaped trunk used by both branches.

    Encoder: conv pairs at 64, 128, 256, 512 filters with 2x pooling between
    pairs; decoder: 2x deconvolution then a conv pair per stage, with skip
    concatenation from the mirrored encoder stage; guide_channels reserves
    extra decoder input width for externally injected guidance maps.
    """

    def __init__(self, in_channels: int, width_mult: float = 1.0, guide_channels=(0, 0, 0)):
        super().__init__()
        m = width_mult
        c64, c128, c256, c512 = (_scaled(c, m) for c in (64, 128, 256, 512))
        self.enc1a = nn.Conv2d(in_channels, c64, 3, padding=1)
        self.enc1b = nn.Conv2d(c64, c64, 3, padding=1)
        self.enc2a = nn.Conv2d(c64, c128, 3, padding=1)
        self.enc2b = nn.Conv2d(c128, c128, 3, padding=1)
        self.enc3a = nn.Conv2d(c128, c256, 3, padding=1)
        self.enc3b = nn.Conv2d(c256, c256, 3, padding=1)
        self.enc4a = nn.Conv2d(c256, c512, 3, padding=1)
        self.enc4b = nn.Conv2d(c512, c512, 3, padding=1)
        self.pool = nn.MaxPool2d(2)
        self.up3 = nn.ConvTranspose2d(c512, c256, 2, stride=2)
        self.dec3a = nn.Conv2d(c256 + c256 + guide_channels[0], c256, 3, padding=1)
        self.dec3b = nn.Conv2d(c256, c256, 3, padding=1)
        self.up2 = nn.ConvTranspose2d(c256, c128, 2, stride=2)
        self.dec2a = nn.Conv2d(c128 + c128 + guide_channels[1], c128, 3, padding=1)
        self.dec2b = nn.Conv2d(c128, c128, 3, padding=1)
        self.up1 = nn.ConvTranspose2d(c128, c64, 2, stride=2)
        self.dec1a = nn.Conv2d(c64 + c64 + guide_channels[2], c64, 3, padding=1)
        self.dec1b = nn.Conv2d(c64, c64, 3, padding=1)
        self.feat_channels = c64

    def forward(self, x: torch.Tensor, guidance=None):
        """Returns (final 64-wide feature map, deconv outputs at 1/4, 1/2, 1/1)."""
        if x.shape[-1] % 8 != 0 or x.shape[-2] % 8 != 0:
            raise ShapeMismatch(f"canvas {tuple(x.shape[-2:])} not divisible by 8")
        s1 = F.relu(self.enc1b(F.relu(self.enc1a(x))))
        s2 = F.relu(self.enc2b(F.relu(self.enc2a(self.pool(s1)))))
        s3 = F.relu(self.enc3b(F.relu(self.enc3a(self.pool(s2)))))
        bottom = F.relu(self.enc4b(F.relu(self.enc4a(self.pool(s3)))))

        g3 = self.up3(bottom)
        cat3 = [g3, s3] if guidance is None else [g3, s3, guidance[0]]
        d3 = F.relu(self.dec3b(F.relu(self.dec3a(torch.cat(cat3, dim=1)))))
        g2 = self.up2(d3)
        cat2 = [g2, s2] if guidance is None else [g2, s2, guidance[1]]
        d2 = F.relu(self.dec2b(F.relu(self.dec2a(torch.cat(cat2, dim=1)))))
        g1 = self.up1(d2)
        cat1 = [g1, s1] if guidance is None else [g1, s1, guidance[2]]
        d1 = F.relu(self.dec1b(F.relu(self.dec1a(torch.cat(cat1, dim=1)))))
        return d1, (g3, g2, g1)


class EdgeBranch(nn.Module):
    """Stitches the two edge maps; also exposes decoder features for guidance."""

    # edge maps are sparse (most pixels near zero), so start the sigmoid at
    # that scale with a zeroed head: a centered init makes the first descent
    # slam the whole map toward the sigmoid's flat region where the
    # absolute-error gradient dies, while from the sparse prior the head
    # only grows along feature directions that separate edges from flats
    OUT_BIAS_PRIOR = -4.0

    def __init__(self, width_mult: float = 1.0):
        super().__init__()
        self.trunk = _EncoderDecoder(2, width_mult)
        self.out_conv = nn.Conv2d(self.trunk.feat_channels, 1, 1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.constant_(self.out_conv.bias, self.OUT_BIAS_PRIOR)

    def forward(self, ref_edge: torch.Tensor, tgt_edge: torch.Tensor):
        """Returns (stitched edge map, deconv guidance triple, final feature)."""
        if ref_edge.shape != tgt_edge.shape:
            raise ShapeMismatch(f"edge shapes differ: {tuple(ref_edge.shape)} vs {tuple(tgt_edge.shape)}")
        feat, guidance = self.trunk(torch.cat([ref_edge, tgt_edge], dim=1))
        return torch.sigmoid(self.out_conv(feat)), guidance, feat


class ImageBranch(nn.Module):
    """Mirror branch on the 6-channel image pair, optionally edge-guided."""

    # labels are black outside the stitched union, so start the sigmoid near
    # that dark average with a damped head; a full-scale head lets the border
    # majority drive every logit into saturation, where the chain rule's
    # sigmoid derivative factor silences the interior's pull back
    OUT_BIAS_PRIOR = -1.4
    HEAD_SCALE = 0.01

    def __init__(self, width_mult: float = 1.0, guided: bool = True):
        super().__init__()
        m = width_mult
        guide = (_scaled(256, m), _scaled(128, m), _scaled(64, m)) if guided else (0, 0, 0)
        self.guided = guided
        self.trunk = _EncoderDecoder(6, m, guide_channels=guide)
        c64 = self.trunk.feat_channels
        if guided:
            # fusion block: final edge + image features -> two 3x3 convs -> 1x1 output
            self.fuse1 = nn.Conv2d(2 * c64, c64, 3, padding=1)
            self.fuse2 = nn.Conv2d(c64, c64, 3, padding=1)
        self.out_conv = nn.Conv2d(c64, 3, 1)
        with torch.no_grad():
            self.out_conv.weight.mul_(self.HEAD_SCALE)
        nn.init.constant_(self.out_conv.bias, self.OUT_BIAS_PRIOR)

    def forward(self, pair: torch.Tensor, edge_guidance=None, edge_feat=None) -> torch.Tensor:
        feat, _ = self.trunk(pair, guidance=edge_guidance if self.guided else None)
        if self.guided:
            if edge_guidance is None or edge_feat is None:
                raise ShapeMismatch("guided image branch requires edge decoder features")
            x = F.relu(self.fuse1(torch.cat([feat, edge_feat], dim=1)))
            feat = F.relu(self.fuse2(x))
        return torch.sigmoid(self.out_conv(feat))


class DeformationNet(nn.Module):
    """Full deformation module: edges in, stitched image (and edge map) out.

    Fully convolutional: any canvas with sides divisible by 8 works without
    retraining.
    """

    def __init__(self, config: DeformationNetConfig | None = None):
        super().__init__()
        self.config = config or DeformationNetConfig()
        cfg = self.config
        self.edge_branch = EdgeBranch(cfg.width_mult) if cfg.use_edge_branch else None
        self.image_branch = ImageBranch(cfg.width_mult, guided=cfg.use_edge_branch)

    def forward(self, warped_ref: torch.Tensor, warped_tgt: torch.Tensor):
        """(B, 3, H, W) pair -> (stitched image, stitched edge map or None)."""
        if warped_ref.shape != warped_tgt.shape:
            raise ShapeMismatch(
                f"input shapes differ: {tuple(warped_ref.shape)} vs {tuple(warped_tgt.shape)}"
            )
        pair = torch.cat([warped_ref, warped_tgt], dim=1)
        if self.edge_branch is None:
            return self.image_branch(pair), None
        ref_e = extract_edges(images.tensor_gray(warped_ref))
        tgt_e = extract_edges(images.tensor_gray(warped_tgt))
        edge_out, guidance, edge_feat = self.edge_branch(ref_e, tgt_e)
        img_out = self.image_branch(pair, guidance, edge_feat)
        return img_out, edge_out


def stitch(inputs: StitchInputs, net: DeformationNet) -> np.ndarray:
    """Run the deformation network on canvas-warped images; returns HWC float32."""
    ref_t = images.to_tensor(inputs.warped_ref).unsqueeze(0)
    tgt_t = images.to_tensor(inputs.warped_tgt).unsqueeze(0)
    if ref_t.shape[-2:] != (inputs.canvas.height, inputs.canvas.width):
        raise ShapeMismatch(
            f"inputs sized {tuple(ref_t.shape[-2:])} but canvas is "
            f"{(inputs.canvas.height, inputs.canvas.width)}"
        )
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            out, _ = net(ref_t, tgt_t)
    finally:
        net.train(was_training)
    return images.from_tensor(out)


def edge_loss(pred: torch.Tensor, gt_edge: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between edge maps."""
    return (pred - gt_edge).abs().mean()


def content_loss(pred: torch.Tensor, gt: torch.Tensor, extractor) -> torch.Tensor:
    """Mean squared difference of frozen perceptual features."""
    return F.mse_loss(extractor(pred), extractor(gt))


def total_loss(edge_l, content_l, lambda_e: float = 1.0, lambda_c: float = 2e-6):
    return lambda_e * edge_l + lambda_c * content_l


class RandomConvExtractor(nn.Module):
    """Fixed-seed frozen linear conv features; offline perceptual fallback.

    Linear and (generically) injective, so the content loss stays an exact
    positive-definite quadratic in the pixel error. The fixed output gain
    puts feature magnitudes in the range of the pretrained activations the
    default content weight was balanced against; without it the content
    gradients sit at the optimizer's epsilon floor and the image branch,
    whose only gradient source is the content term, trains far too slowly.
    """

    GAIN = 100.0

    def __init__(self, seed: int = 0, out_channels: int = 27):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        weight = torch.randn(out_channels, 3, 3, 3, generator=gen) / 3.0
        self.register_buffer("weight", weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.GAIN * F.conv2d(x, self.weight, padding=1)


def _vgg19_extractor():
    try:
        from torchvision import models

        net = models.vgg19(weights=models.VGG19_Weights.IMAGENET1K_V1)
    except Exception as exc:  # noqa: BLE001 - any failure means unavailable
        raise ExtractorUnavailable(f"pretrained VGG-19 unavailable: {exc}") from exc
    # output of the 9th conv layer
    feats = net.features[:20]
    for p in feats.parameters():
        p.requires_grad_(False)
    feats.eval()
    return feats


def build_perceptual_extractor(kind: str = "auto", seed: int = 0):
    """'vgg19': pretrained 9th-conv features; 'random': seeded fallback;
    'auto': vgg19 when loadable, else the fallback."""
    if kind == "vgg19":
        return _vgg19_extractor()
    if kind == "random":
        return RandomConvExtractor(seed=seed)
    if kind == "auto":
        try:
            return _vgg19_extractor()
        except ExtractorUnavailable:
            return RandomConvExtractor(seed=seed)
    raise ExtractorUnavailable(f"unknown extractor kind: {kind}")
