from enum import Enum


class Modality(str, Enum):
    """
    The two input modalities. The value doubles as the parameter namespace of the modality-specific
    parts of the model (e.g. "projections.rgb.weight").
    """
    RGB = "rgb"
    DEPTH = "depth"

    @property
    def channels(self) -> int:
        return 3 if self is Modality.RGB else 1


class Pipeline(str, Enum):
    VIDEO = "video"
    IMAGE = "image"


class EncoderMode(str, Enum):
    SPECIFIC = "specific"    # one encoder per modality
    SHARED = "shared"        # one encoder, learned modality embeddings added to its inputs


class MaskingStrategy(str, Enum):
    """
    The built-in masking strategies. Further strategies can be registered under any other name,
    see models.masking.register_masking_strategy.
    """
    RANDOM = "random"
    TUBE = "tube"
    FRAME = "frame"


class MaskPairing(str, Enum):
    INDEPENDENT = "independent"
    SHARED = "shared"


class DepthLossMode(str, Enum):
    IMAGE_L1 = "image_L1"
    VIDEO_MSE = "video_MSE"


class DepthNormalization(str, Enum):
    MINMAX = "minmax"    # per sample to [0, 1]
    SCALE = "scale"      # divide by the clamp max of the dataset
    NONE = "none"


class TrainingObjective(str, Enum):
    VIDEO = "video"      # alpha * rgb + beta * depth + gamma * contrastive + eta * matching
    STAGE1 = "stage1"    # contrastive only, full token grids
    STAGE2 = "stage2"    # alpha * rgb + beta * depth


class ProbeTask(str, Enum):
    CLASSIFICATION = "classification"
    SEGMENTATION = "segmentation"
    DEPTH = "depth"


class MotionDirection(int, Enum):
    """
    Dominant motion direction of a synthetic clip, counter-clockwise in 45 degree steps with north
    pointing to the top of the image.
    """
    EAST = 0
    NORTHEAST = 1
    NORTH = 2
    NORTHWEST = 3
    WEST = 4
    SOUTHWEST = 5
    SOUTH = 6
    SOUTHEAST = 7
