from .config import InferenceConfig as InferenceConfig
from .config import RunConfig as RunConfig
from .config import load_config as load_config
from .core import Field as Field
from .core import ValidateResult as ValidateResult
from .dataio import Annotation as Annotation
from .dataio import Dataset as Dataset
from .dataio import FoldSpec as FoldSpec
from .dataio import FrameEmbeddingSequence as FrameEmbeddingSequence
from .dataio import Reduction as Reduction
from .dataio import Video as Video
from .dataio import load_dataset as load_dataset
from .dataio import load_folds as load_folds
from .dataio import read_embeddings as read_embeddings
from .dataio import validate_dataset as validate_dataset
from .evaluation import EvalReport as EvalReport
from .evaluation import evaluate_dataset as evaluate_dataset
from .evaluation import f_score as f_score
from .evaluation import kendall_tau as kendall_tau
from .evaluation import spearman_rho as spearman_rho
from .exception import RecsumError as RecsumError
from .i18n import lang as lang
from .masking import MaskPlan as MaskPlan
from .masking import MaskingMethod as MaskingMethod
from .masking import apply_mask as apply_mask
from .masking import plan_masking as plan_masking
from .model import EncoderConfig as EncoderConfig
from .model import GeneratorModel as GeneratorModel
from .model import SummarizerModel as SummarizerModel
from .model import load_checkpoint as load_checkpoint
from .model import save_checkpoint as save_checkpoint
from .pretrain import PretrainConfig as PretrainConfig
from .pretrain import pretrain as pretrain
from .rltrain import RLConfig as RLConfig
from .rltrain import train_summarizer as train_summarizer
from .segmentation import KTSConfig as KTSConfig
from .segmentation import ShotTable as ShotTable
from .segmentation import decompose as decompose
from .segmentation import kts_segment as kts_segment
from .summarize import knapsack_select as knapsack_select
from .summarize import score_video as score_video
from .summarize import summarize_video as summarize_video

__version__ = "0.1.0"
