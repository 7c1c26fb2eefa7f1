"""Knowledge-distillation loss laboratory: decomposed KD, NKD and teacher-free NKD."""
from .losses import (
    DistillConfig,
    LabelBatch,
    LossOutput,
    WeightStrategy,
    ce_loss,
    distributed_loss,
    kd_classical,
    kd_decomposed,
    label_smooth_ce,
    ls_decomposed,
    nkd_loss,
    smooth_weight,
    soft_loss,
    tfnkd_loss,
)
from .estimators import MLPStudentClassifier, NKDClassifier

__version__ = "0.1.0"
