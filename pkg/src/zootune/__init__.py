"""Transfer learning from a zoo of pretrained convolutional models, on a numpy autodiff core."""

__version__ = "0.1.0"

from .backbone import BackboneConfig, Model, build_plain_backbone, convert_to_zoo, model_forward
from .complexity import ComplexityReport, LayerDims, count_params, report
from .data import Dataset, TaskSpec, gen_synthetic_task, load_idx, train_test_split
from .errors import ZooTuneError
from .io import SourceCheckpoint, load_checkpoint, save_checkpoint
from .layers import AdaAggLayer, TEState, adaagg_forward, te_collapse
from .training import TrainConfig, collapse, fit, run_baseline, zoo_tune

__all__ = [
    "AdaAggLayer", "BackboneConfig", "ComplexityReport", "Dataset", "LayerDims", "Model",
    "SourceCheckpoint", "TEState", "TaskSpec", "TrainConfig", "ZooTuneError", "__version__",
    "adaagg_forward", "build_plain_backbone", "collapse", "convert_to_zoo", "count_params", "fit",
    "gen_synthetic_task", "load_checkpoint", "load_idx", "model_forward", "report", "run_baseline",
    "save_checkpoint", "te_collapse", "train_test_split", "zoo_tune",
]
