"""Linear camera probes on frozen features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .data import Dataset


@dataclass
class ProbeResult:
    accuracy: float
    chance: float  # majority-class rate of the held-out labels
    num_train: int
    num_test: int


def linear_probe(
    train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray, seed: int = 0
) -> ProbeResult:
    """Standardize, fit multinomial logistic regression, score on the held-out set."""
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000, random_state=seed))
    clf.fit(np.asarray(train_x, dtype=np.float64), train_y)
    acc = float(clf.score(np.asarray(test_x, dtype=np.float64), test_y))
    _, counts = np.unique(test_y, return_counts=True)
    return ProbeResult(acc, float(counts.max() / counts.sum()), len(train_y), len(test_y))


def camera_probe(model, train: Dataset, test: Dataset, feature_source: str = "fused", seed: int = 0) -> ProbeResult:
    """Fit on ``train`` features, score camera prediction on ``test`` (disjoint identities)."""
    return linear_probe(
        model.extract(train.images, feature_source),
        train.cams,
        model.extract(test.images, feature_source),
        test.cams,
        seed,
    )
