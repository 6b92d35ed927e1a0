"""Shared exception types raised across the package."""


class StitchForgeError(Exception):
    """Base class for all package-specific errors."""


class DegenerateCorners(StitchForgeError):
    """Corner quad is collinear or the DLT system is ill-conditioned (cond > 1e12)."""


class NonPositiveScale(StitchForgeError):
    """Rescale factors must be strictly positive."""


class PatchOutOfBounds(StitchForgeError):
    """Source image too small for the requested patch plus perturbation margins."""


class CorruptManifest(StitchForgeError):
    """Dataset manifest is unreadable or fails validation."""


class MissingImage(StitchForgeError):
    """Manifest references an image file that does not exist."""


class ShapeMismatch(StitchForgeError):
    """Correlation inputs must share batch, channel and spatial dimensions."""


class IndivisibleInput(StitchForgeError):
    """Network input height and width must be divisible by 8."""


class MultiChannelInput(StitchForgeError):
    """Edge extraction is defined on single-channel images only."""


class ExtractorUnavailable(StitchForgeError):
    """Requested perceptual feature extractor cannot be constructed."""


class DatasetEmpty(StitchForgeError):
    """Training requires at least one sample."""


class CheckpointIncompatible(StitchForgeError):
    """Checkpoint cannot be loaded for the requested stage or architecture."""
