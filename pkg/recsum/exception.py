class RecsumError(Exception):
    """base of every domain failure"""


class ValidateFailed(RecsumError):
    """config value validation failed"""


class MissingFile(RecsumError):
    """a referenced file does not exist"""


class DimensionMismatch(RecsumError):
    """annotation length differs from the frame count"""


class CorruptEmbedding(RecsumError):
    """embedding file is malformed or holds non-finite values"""


class DuplicateVideoId(RecsumError):
    """video id listed twice in a manifest"""


class UnknownVideoId(RecsumError):
    """fold references a video absent from the manifest"""


class OverlappingFold(RecsumError):
    """video appears in both train and test of one fold"""


class IncompleteFold(RecsumError):
    """fold does not cover every video of the manifest"""


class IndexOutOfRange(RecsumError):
    """source index beyond the video length"""


class InsufficientMaskableFrames(RecsumError):
    """masking budget unreachable"""


class PlanMismatch(RecsumError):
    """mask plan built for another sub-sequence"""


class ShapeMismatch(RecsumError):
    """tensor shape differs from the model contract"""


class ConfigMismatch(RecsumError):
    """encoder configurations disagree"""


class VersionMismatch(RecsumError):
    """unsupported checkpoint version"""


class CorruptFile(RecsumError):
    """checkpoint is malformed"""


class ZeroNormVector(RecsumError):
    """cosine similarity of a zero vector"""


class EmptyTrainSet(RecsumError):
    """no training videos"""


class DivergenceDetected(RecsumError):
    """loss became NaN or infinite"""


class FrozenModelViolation(RecsumError):
    """frozen generator was modified"""


class LengthMismatch(RecsumError):
    """summaries of different lengths"""


class EmptyAnnotationSet(RecsumError):
    """no per-user scores to reduce"""


class DegenerateRanking(RecsumError):
    """rank correlation of a constant vector"""


class MissingOutput(RecsumError):
    """test video without model output"""


class MissingCheckpoint(RecsumError):
    """upstream checkpoint not found"""


class MissingScores(RecsumError):
    """score file not found for a video"""


class CorruptDocument(RecsumError):
    """JSON document is malformed or misses a required key"""
