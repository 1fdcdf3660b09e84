"""
Multinomial logistic probes that read persona attributes straight from activation vectors.
"""

import warnings
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import precision_recall_fscore_support
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler

from evalstats import write_table
from model_core import ActivationVector, CheckpointError, read_blob_container, write_blob_container

PROBE_FORMAT = "labctl-probe"
PROBE_VERSION = 1


class ProbeConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    l1_weight: float = Field(0.5, ge=0.0)
    l2_weight: float = Field(0.5, ge=0.0)
    iterations: int = Field(5, ge=1)
    standardize: bool = True
    seed: int = Field(0, ge=0)


class Probe(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    # d_model x n_labels, standardization already folded in
    weights: np.ndarray
    bias: np.ndarray
    labels: List[str]
    layer: Optional[int] = None

    @field_validator("weights", "bias")
    @classmethod
    def _finite(cls, value) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise ValueError("probe parameters contain NaN or Inf")
        return value

    @model_validator(mode="after")
    def _check_shapes(self) -> "Probe":
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("probe labels must be duplicate-free")
        if self.weights.shape[1] != len(self.labels) or self.bias.shape != (len(self.labels),):
            raise ValueError(f"weights {self.weights.shape} / bias {self.bias.shape} do not fit {len(self.labels)} labels")
        return self

    @property
    def dim(self) -> int:
        return int(self.weights.shape[0])

    def scores(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.bias


def _features(acts: Sequence[Union[ActivationVector, np.ndarray]]) -> np.ndarray:
    rows = [a.values.numpy() if isinstance(a, ActivationVector) else np.asarray(a) for a in acts]
    features = np.stack(rows).astype(np.float64)
    if not np.isfinite(features).all():
        raise ValueError("activation features contain NaN or Inf")
    return features


def train_probe(
    acts: Sequence[Union[ActivationVector, np.ndarray]],
    labels: Sequence[str],
    cfg: Optional[ProbeConfig] = None,
    layer: Optional[int] = None,
) -> Probe:
    """
    Fit an elastic-net multinomial logistic probe (SAGA, ``cfg.iterations`` epochs).

    Args:
        acts: One activation vector per example.
        labels: Gold label per example.
        cfg: Regularization and solver budget.
        layer: Capture layer, stored with the probe.

    Returns:
        A probe whose weights apply to raw (unstandardized) activations.
    """
    cfg = cfg or ProbeConfig()
    if len(acts) != len(labels):
        raise ValueError(f"{len(acts)} activations but {len(labels)} labels")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("Probe training needs at least 2 distinct labels")
    x = _features(acts)
    y = np.asarray(labels)

    if cfg.standardize:
        scaler = StandardScaler().fit(x)
        mean, scale = scaler.mean_, scaler.scale_
    else:
        mean, scale = np.zeros(x.shape[1]), np.ones(x.shape[1])
    z = (x - mean) / scale

    strength = cfg.l1_weight + cfg.l2_weight
    if strength > 0:
        model = LogisticRegression(
            penalty="elasticnet", solver="saga", l1_ratio=cfg.l1_weight / strength, C=1.0 / strength,
            max_iter=cfg.iterations, random_state=cfg.seed % 2**32,
        )
    else:
        model = LogisticRegression(penalty=None, solver="saga", max_iter=cfg.iterations, random_state=cfg.seed % 2**32)
    with warnings.catch_warnings():
        # a handful of epochs never reaches the solver's tolerance
        warnings.simplefilter("ignore", ConvergenceWarning)
        model.fit(z, y)

    coef = model.coef_
    intercept = model.intercept_
    if coef.shape[0] == 1:
        coef = np.vstack([np.zeros_like(coef[0]), coef[0]])
        intercept = np.array([0.0, intercept[0]])
    weights = (coef / scale).T
    bias = intercept - coef @ (mean / scale)
    probe = Probe(weights=weights, bias=bias, labels=[str(c) for c in model.classes_], layer=layer)
    logger.info("trained probe on {} examples, {} labels, train accuracy {:.3f}", len(y), len(classes), probe_accuracy(probe, acts, labels))
    return probe


def probe_predict(probe: Probe, act: Union[ActivationVector, np.ndarray]) -> str:
    """Highest-scoring label; ties go to the lowest label index."""
    features = _features([act])[0]
    if features.shape[0] != probe.dim:
        raise ValueError(f"activation dimension {features.shape[0]} does not match probe dimension {probe.dim}")
    return probe.labels[int(np.argmax(probe.scores(features)))]


def probe_accuracy(probe: Probe, acts: Sequence, labels: Sequence[str]) -> float:
    if not len(acts):
        return 0.0
    predictions = [probe_predict(probe, a) for a in acts]
    return float(np.mean([p == g for p, g in zip(predictions, labels)]))


def stratified_split(labels: Sequence[str], test_fraction: float = 0.2, seed: int = 0) -> Tuple[List[int], List[int]]:
    """Index split stratified by label; falls back to a plain split when a label has a single example."""
    indices = np.arange(len(labels))
    try:
        train, test = train_test_split(indices, test_size=test_fraction, stratify=list(labels), random_state=seed % 2**32)
    except ValueError:
        logger.warning("stratified split impossible for these labels, using an unstratified split")
        train, test = train_test_split(indices, test_size=test_fraction, random_state=seed % 2**32)
    return sorted(int(i) for i in train), sorted(int(i) for i in test)


def classification_report(
    probe: Probe,
    acts: Sequence,
    labels: Sequence[str],
    path: Union[str, Path],
    fingerprint: str = "",
    seed: int = 0,
) -> Path:
    """Per-label precision/recall CSV."""
    predictions = [probe_predict(probe, a) for a in acts]
    precision, recall, _, support = precision_recall_fscore_support(
        list(labels), predictions, labels=probe.labels, zero_division=0
    )
    rows = [
        (label, float(p), float(r), int(s))
        for label, p, r, s in zip(probe.labels, precision, recall, support)
    ]
    return write_table(path, ["label", "precision", "recall", "support"], rows, fingerprint, seed)


def save_probe(probe: Probe, path: Union[str, Path]) -> None:
    header = {"format": PROBE_FORMAT, "version": PROBE_VERSION, "labels": probe.labels, "layer": probe.layer}
    write_blob_container(path, header, {"weights": probe.weights, "bias": probe.bias})


def load_probe(path: Union[str, Path]) -> Probe:
    header, arrays = read_blob_container(path)
    if header.get("format") != PROBE_FORMAT or header.get("version") != PROBE_VERSION:
        raise CheckpointError(f"{path} is not a {PROBE_FORMAT} v{PROBE_VERSION} file")
    return Probe(weights=arrays["weights"], bias=arrays["bias"], labels=header["labels"], layer=header.get("layer"))
