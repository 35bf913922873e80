"""Cross-domain recommendation via two-level cross-domain contrastive pretraining.

Stage 1 aligns the same user's sequence representations across domains
(instance level) and against trainable interest prototypes from the other
domain (cluster level, with multi-view and multi-granularity interests).
Stage 2 fine-tunes the pretrained encoders with a target-attention CTR head.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, config_hash, load_config
from .contrast import GranularitySet, InterestSpace, i2c_loss, i2c_space_loss, i2i_loss, ssl_loss
from .datasets import SequenceDataset, batch_iterator, build_stage2_examples
from .encoder import DomainEncoder, scaled_dot_product_attention, target_attention
from .evaluation import MetricsReport, auc, cluster_correspondence, mean_logloss
from .ingest import ingest_amazon, ingest_amazon_files
from .records import CdrExample, ClickSequence, Domain, Interaction, SyntheticConfig, Vocabulary
from .synthetic import generate_synthetic
from .training import Checkpoint, CtrModel, bce_loss, finetune, load_checkpoint, predict_ctr, pretrain, save_checkpoint

__all__ = [
    "ExperimentConfig",
    "config_hash",
    "load_config",
    "GranularitySet",
    "InterestSpace",
    "i2c_loss",
    "i2c_space_loss",
    "i2i_loss",
    "ssl_loss",
    "SequenceDataset",
    "batch_iterator",
    "build_stage2_examples",
    "DomainEncoder",
    "scaled_dot_product_attention",
    "target_attention",
    "MetricsReport",
    "auc",
    "cluster_correspondence",
    "mean_logloss",
    "ingest_amazon",
    "ingest_amazon_files",
    "CdrExample",
    "ClickSequence",
    "Domain",
    "Interaction",
    "SyntheticConfig",
    "Vocabulary",
    "generate_synthetic",
    "Checkpoint",
    "CtrModel",
    "bce_loss",
    "finetune",
    "load_checkpoint",
    "predict_ctr",
    "pretrain",
    "save_checkpoint",
]
