"""Scene- and motion-conditional video diffusion at desk scale."""

from .conditions import ConditionSet, EncodedConditions, encode_conditions
from .denoiser import DenoiserConfig, SMCDenoiser, attention, build_denoiser, group_of
from .encoders import TextEmbedder, TextEmbedding, decode_frame, encode_frame
from .errors import ConfigError, ShapeError, SMCDError, ValidationError
from .evaluation import (FeatureExtractor, GroundingReport, first_frame_fidelity,
                         frechet_distance, grounding_metrics, iou, oracle_track)
from .image_cond import ImageCondition
from .motion import BoundingBox, ObjectTrajectory, fourier_embed
from .sampling import SamplerConfig, cfg_epsilon, generate
from .schedule import NoiseSchedule, ddpm_step, make_schedule, q_sample
from .training import (ParameterStore, TrainConfig, TrainingSet, compute_loss,
                       condition_dropout, freeze_policy, train_stage)

__version__ = "0.1.0"
