"""Center-based contrastive metric learning for imbalanced anomaly detection."""

from .errors import ConfigurationError, EmptyBatchError, SingularityError, TrainingAborted, UndefinedAUCError
from .losses import LossConfig, LossFamily, cdcm_loss, compute_loss, deep_sad_loss, euclidean_distances
from .models import ModelConfig, build_model

__version__ = "0.1.0"
