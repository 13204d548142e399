"""Adaptive key-frame video lesion detection with learned feature warping, at toy scale."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, parse_config
from .detector import Detection, DetectorConfig, detect_frame, train_detector
from .evalbench import (
    EvalResult,
    ablate_scheduler,
    average_precision,
    benchmark_runtime,
    count_flops,
    evaluate_sequences,
    sweep_tau,
)
from .flops import FlopModel
from .scheduler import SchedulerState, scheduler_init, scheduler_step
from .synthgen import Frame, GenConfig, GroundTruthBox, VideoSequence, corrupt_frame, gen_sequence, gen_stills
from .temporal import TemporalConfig, correlation_score, decision_loss, feature_loss
from .training import TrainConfig, TrainingPair, lr_schedule, sample_pairs, train_stcd

__version__ = "0.1.0"
