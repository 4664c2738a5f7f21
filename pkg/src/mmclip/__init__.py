"""Max-margin activation clipping: learn per-neuron upper bounds that suppress
overfitting in a trained network (backdoors, class imbalance, over-training)."""
from .data import (CleanSet, Dataset, ImbalanceSpec, TriggerSpec, apply_imbalance, chessboard_trigger,
                   embed_trigger, patch_trigger, poison, split_clean_set, synth_classes)
from .estimators import CEClassifier, MaxMarginClipper, MMDFDetector
from .harness import AttackMetrics, ExperimentConfig, compute_attack_metrics, report, run_experiment
from .mitigation import MitigationConfig, loss_mmac, loss_mmom, run_mitigation
from .mmdf import DefendedModel, DefenseVerdict, NullModel, defend, fit_null, p_value
from .network import BoundVectors, Network, bounded_forward, cnn_s, forward, init_bounds, mlp, mlp3
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AttackMetrics", "BoundVectors", "CEClassifier", "CleanSet", "Dataset", "DefendedModel", "DefenseVerdict",
    "ExperimentConfig", "ImbalanceSpec", "MMDFDetector", "MaxMarginClipper", "MitigationConfig", "Network",
    "NullModel", "TrainConfig", "TriggerSpec", "apply_imbalance", "bounded_forward", "chessboard_trigger",
    "cnn_s", "compute_attack_metrics", "defend", "embed_trigger", "evaluate", "fit_null", "forward",
    "init_bounds", "loss_mmac", "loss_mmom", "mlp", "mlp3", "p_value", "patch_trigger", "poison", "report",
    "run_experiment", "run_mitigation", "split_clean_set", "synth_classes", "train",
]
