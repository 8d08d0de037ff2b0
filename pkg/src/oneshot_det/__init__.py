"""One-shot unsupervised cross-domain detection at desk scale."""
from .adapt import AdaptConfig, adapt_batch, adapt_one, predict
from .checkpoint import Checkpoint
from .detcore import Detection, DetectorArch
from .estimator import OneShotDetector
from .synthgen import DomainSpec, SceneSpec, generate_dataset, shift_dataset
from .train import TrainConfig, meta_pretrain, pretrain_multitask

__all__ = [
    "AdaptConfig", "Checkpoint", "Detection", "DetectorArch", "DomainSpec", "OneShotDetector", "SceneSpec",
    "TrainConfig", "adapt_batch", "adapt_one", "generate_dataset", "meta_pretrain", "predict",
    "pretrain_multitask", "shift_dataset",
]
__version__ = "0.1.0"
