"""Step-wise hierarchical alignment network (SHAN) for image-text matching."""

from .alignment import AlignmentTrace, Hyperparams, ScoreBreakdown, score_pairs, similarity
from .corpus import FeaturePack, Vocabulary, build_vocabulary, load_feature_pack, synth_corpus
from .evaluation import RetrievalReport, evaluate, recall_at_k
from .model import Model, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, fit, triplet_loss

__version__ = "0.1.0"
