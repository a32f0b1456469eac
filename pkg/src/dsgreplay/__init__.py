"""Continual learning over 1-D multichannel task streams with diffusion-based
generative replay, where the generator is updated by distilling from its
previous version instead of retraining on its own samples."""

from .continual import ClMethod, DiffusionSettings, ReplayBuffer, TrainProtocol, run_stream
from .data import LabeledDataset, SynthSpec, TaskStream, load_dataset, make_synthetic, save_dataset, split_stream
from .diffusion import DiffusionModel, NoiseSchedule, ddpm_loss, diffuse, make_schedule, sample
from .dsg import DsgConfig, TeacherSnapshot, distill_loss, dsg_update_generator, task_loss
from .metrics import AccuracyMatrix, average_accuracy, evaluate, forgetting

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix", "ClMethod", "DiffusionModel", "DiffusionSettings", "DsgConfig", "LabeledDataset",
    "NoiseSchedule", "ReplayBuffer", "SynthSpec", "TaskStream", "TeacherSnapshot", "TrainProtocol",
    "average_accuracy", "ddpm_loss", "diffuse", "distill_loss", "dsg_update_generator", "evaluate", "forgetting",
    "load_dataset", "make_schedule", "make_synthetic", "run_stream", "sample", "save_dataset", "split_stream",
    "task_loss",
]
