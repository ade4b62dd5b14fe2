from .model import (
    FLAVORS,
    FORMAT_VERSION,
    FlavorError,
    ModelError,
    RandomForest,
    TrainConfig,
    Tree,
    TreeNode,
    bootstrap_rows,
    evaluate,
    fit_forest,
    fit_tree,
    gini,
    metrics_from_confusion,
    predict_proba,
)

__all__ = [
    "FLAVORS",
    "FORMAT_VERSION",
    "FlavorError",
    "ModelError",
    "RandomForest",
    "TrainConfig",
    "Tree",
    "TreeNode",
    "bootstrap_rows",
    "evaluate",
    "fit_forest",
    "fit_tree",
    "gini",
    "metrics_from_confusion",
    "predict_proba",
]
