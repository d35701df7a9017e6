from typing import Sequence

import numpy as np


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    if predicted.shape != labels.shape:
        raise ValueError(f"prediction shape {predicted.shape} does not match labels {labels.shape}")
    if labels.size == 0:
        return 0.0
    return float(np.mean(predicted == labels))


def balanced_accuracy(predicted: np.ndarray, labels: np.ndarray, num_classes: int = 2) -> float:
    """Mean per-class recall over the classes present in `labels`."""

    predicted, labels = np.asarray(predicted), np.asarray(labels)
    recalls = []
    for cls in range(num_classes):
        members = labels == cls
        if members.any():
            recalls.append(np.mean(predicted[members] == cls))
    return float(np.mean(recalls)) if recalls else 0.0


def class_weights(labels: np.ndarray, num_classes: int = 2) -> np.ndarray:
    """Inverse-frequency class weights normalized to mean 1; absent classes get weight 1."""

    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(np.float64)
    weights = np.ones(num_classes)
    present = counts > 0
    weights[present] = counts.sum() / (present.sum() * counts[present])
    return weights / weights.mean()


def majority_rate(labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return 0.0
    return float(np.bincount(labels).max() / labels.size)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""

    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("mean_std needs at least one value")
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), std
