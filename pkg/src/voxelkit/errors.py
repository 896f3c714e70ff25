"""Exception hierarchy shared by all voxelkit modules."""


class VoxelkitError(Exception):
    """Base class for every error raised by voxelkit."""


# dispatch
class MixedBackends(VoxelkitError, ValueError):
    pass


class UnknownOperation(VoxelkitError, KeyError):
    pass


class BackendUnavailable(VoxelkitError, RuntimeError):
    pass


class RegistryFrozen(VoxelkitError, RuntimeError):
    pass


class ShapeMismatch(VoxelkitError, ValueError):
    pass


# io / synthesis
class BadMagic(VoxelkitError, ValueError):
    pass


class HeaderMismatch(VoxelkitError, ValueError):
    pass


class TruncatedPayload(VoxelkitError, ValueError):
    """Payload byte count disagrees with the header (short or long)."""


class PlacementFailure(VoxelkitError, RuntimeError):
    pass


class EvenExtent(VoxelkitError, ValueError):
    pass


# filters / transform
class KernelTooLarge(VoxelkitError, ValueError):
    pass


class BadOrder(VoxelkitError, ValueError):
    pass


class NonPositiveFactor(VoxelkitError, ValueError):
    pass


# thresholds / segmentation
class DegenerateImage(VoxelkitError, ValueError):
    pass


class SeedOutsideMask(VoxelkitError, ValueError):
    pass


# deconvolution
class NegativeInput(VoxelkitError, ValueError):
    pass


class UnnormalizedPsf(VoxelkitError, ValueError):
    pass


# metrics
class DegenerateReference(VoxelkitError, ValueError):
    pass


class TooSmall(VoxelkitError, ValueError):
    pass


class OddExtent(VoxelkitError, ValueError):
    pass
