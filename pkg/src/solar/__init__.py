"""Global image descriptors with second-order spatial attention and a
second-order similarity loss, at desk scale."""

from .attention import SecondOrderAttention, attention_map, soa_forward
from .backbones import (BackboneSpec, DescriptorModel, extract_descriptors, global_descriptor,
                        l2net_forward, multi_scale_descriptor, toy_fcn_forward)
from .errors import StoreFormatError, TrainingError, ValidationError
from .evaluation import (RetrievalGroundTruth, VerificationSet, average_precision, evaluate,
                         fpr_at_95, mean_ap, mp_at_k, p_sweep, protocol_split)
from .heatmap import HeatmapRequest, export_attention_heatmap
from .losses import LossConfig, Triplet, fos_loss, sos_loss, total_loss
from .mining import LabeledPool, MiningConfig, mine_hard_negatives
from .pooling import GeM, Whitening, gem_pool, l2_normalize
from .store import read_store, write_store
from .synthetic import generate_synthetic_benchmark
from .training import DESK_PROFILE, FULL_PROFILE, TrainConfig, train

__version__ = "0.1.0"
