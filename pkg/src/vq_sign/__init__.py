"""Vector-quantized pose autoencoders with articulator streams and phonological code forcing."""

__version__ = "0.1.0"

from .corpus import (PhonoFeatureSchema, SignRecord, SplitSpec, default_schema, generate_corpus, load_dataset,
                     read_dataset, write_dataset)
from .evaluate import (MetricsReport, ProbeConfig, ProbeKind, eval_reconstruction, evaluate_model, extract_codes,
                       run_oov_isr_protocol, score_ranking, train_probe)
from .model import CapacityPlan, ModelConfig, PssConfig, SignVQ, Variant, assign_feature_slots, build_model, pss_force
from .pose import PoseSequence, SkeletonLayout, StreamId, partition_pose, uniform_frame_sample
from .train import TrainConfig, load_checkpoint, save_checkpoint, train
from .vq import Codebook, GumbelSchedule, quantize_gumbel, quantize_hard, straight_through

__all__ = [
    "__version__",
    "CapacityPlan", "Codebook", "GumbelSchedule", "MetricsReport", "ModelConfig", "PhonoFeatureSchema",
    "PoseSequence", "ProbeConfig", "ProbeKind", "PssConfig", "SignRecord", "SignVQ", "SkeletonLayout",
    "SplitSpec", "StreamId", "TrainConfig", "Variant",
    "assign_feature_slots", "build_model", "default_schema", "eval_reconstruction", "evaluate_model",
    "extract_codes", "generate_corpus", "load_checkpoint", "load_dataset", "partition_pose", "pss_force",
    "quantize_gumbel", "quantize_hard", "read_dataset", "run_oov_isr_protocol", "save_checkpoint",
    "score_ranking", "straight_through", "train", "train_probe", "uniform_frame_sample", "write_dataset",
]
