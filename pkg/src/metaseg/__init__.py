"""Gradient-based meta-learning for few-shot binary image segmentation."""

from .losses import (EvalReport, LossBreakdown, bce, composite_loss,
                     dice_from_iou, mean_iou_ci, soft_iou)
from .meta import (JointConfig, MetaConfig, UpdateHyperparams, adapt_and_eval,
                   evaluate_initialization, fomaml_meta_grad, inner_update,
                   joint_train, meta_train, reptile_meta_grad)
from .model import (ModelConfig, ParameterSet, build_model, forward,
                    param_count, predict_mask)
from .ops import ContractViolation, sgd_step
from .tasks import (Episode, Task, TaskSplit, augment, generate_task_library,
                    load_dataset, sample_episode, save_dataset, split_tasks)
from .uho import (GPModel, SearchSpace, UHOResult, early_stopping_adapt,
                  expected_improvement, gp_fit, uho_optimize)
from .analysis import (DistanceReport, KShotCurve, distance_study,
                       generalization_gap, kshot_curve, weight_distances)

__all__ = [
    "ContractViolation", "DistanceReport", "Episode", "EvalReport",
    "GPModel", "JointConfig", "KShotCurve", "LossBreakdown", "MetaConfig",
    "ModelConfig", "ParameterSet", "SearchSpace", "Task", "TaskSplit",
    "UHOResult", "UpdateHyperparams", "adapt_and_eval", "augment", "bce",
    "build_model", "composite_loss", "dice_from_iou", "distance_study",
    "early_stopping_adapt", "evaluate_initialization", "expected_improvement",
    "fomaml_meta_grad", "forward", "generalization_gap",
    "generate_task_library", "gp_fit", "inner_update", "joint_train",
    "kshot_curve", "load_dataset", "mean_iou_ci", "meta_train",
    "param_count", "predict_mask", "reptile_meta_grad", "sample_episode",
    "save_dataset", "sgd_step", "soft_iou", "split_tasks", "uho_optimize",
    "weight_distances",
]
