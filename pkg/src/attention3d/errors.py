"""Exception hierarchy.

Every error carries a short machine-parsable ``category`` and the CLI exit
code it maps to (2 config, 3 input, 4 numerical failure).
"""


class Attention3DError(Exception):
    category = "numerical-failure"
    exit_code = 4


class ConfigError(Attention3DError):
    category = "config-invalid"
    exit_code = 2


class InputError(Attention3DError):
    category = "input-invalid"
    exit_code = 3


class NumericalError(Attention3DError):
    category = "numerical-failure"
    exit_code = 4


# core geometry
class BehindCamera(NumericalError):
    category = "behind-camera"


class NonPositiveDepth(InputError):
    category = "non-positive-depth"


# volumetric mapping
class EmptyDepthImage(InputError):
    category = "empty-depth-image"


class BackingStoreFailure(Attention3DError):
    category = "backing-store-failure"
    exit_code = 3


# surface extraction
class EmptyVolume(NumericalError):
    category = "empty-volume"


class NoFrames(InputError):
    category = "no-frames"


# sparse slam
class ImageTooSmall(InputError):
    category = "image-too-small"


class DegenerateConfiguration(NumericalError):
    category = "degenerate-configuration"


class NoConsensus(NumericalError):
    category = "no-consensus"


class SingularNormalEquations(NumericalError):
    category = "singular-normal-equations"


class LocalizationFailed(NumericalError):
    category = "localization-failed"

    def __init__(self, message="", reason="no-consensus"):
        super().__init__(message or reason)
        self.reason = reason


class InsufficientObservations(NumericalError):
    category = "insufficient-observations"


class CorpusTooSmall(InputError):
    category = "corpus-too-small"


class VocabularyMissing(InputError):
    category = "vocabulary-missing"


# gaze projection
class EmptyMesh(InputError):
    category = "empty-mesh"


class InvalidSample(InputError):
    category = "invalid-sample"


# roi pipeline
class NoLocalizedDetections(InputError):
    category = "no-localized-detections"


# metrics
class DegeneratePolygon(InputError):
    category = "degenerate-polygon"


class EmptyDenominator(InputError):
    category = "empty-denominator"


class EmptyGroundTruth(InputError):
    category = "empty-ground-truth"


class MeshMismatch(InputError):
    category = "mesh-mismatch"


class NonMonotoneTimestamps(InputError):
    category = "non-monotone-timestamps"


# synthetic harness
class CameraInsideGeometry(InputError):
    category = "camera-inside-geometry"


class TargetBehindCamera(InputError):
    category = "target-behind-camera"
