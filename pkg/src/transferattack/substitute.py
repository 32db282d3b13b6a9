"""Substitute training: label images once with the oracle, fit a head on a frozen backbone."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .datasets import LabeledDataset
from .models import Classifier, TrainingConfig, build_substitute_arch, fit, predict
from .oracle import Oracle, OracleError

log = logging.getLogger(__name__)


class DegenerateLabelSetError(ValueError):
    pass


@dataclass
class SubstituteSpec:
    backbone: str
    training: TrainingConfig = field(default_factory=lambda: TrainingConfig(epochs=100, batch_size=32, learning_rate=1e-2))
    image_set_id: str = ""


def label_with_oracle(oracle: Oracle, images, ids: Optional[Sequence[str]] = None, workers: int = 1) -> LabeledDataset:
    """One ``classify`` call per image; labels become indices into the sorted label set.

    Images the oracle failed on are left out and listed in
    ``provenance["failures"]`` as ``{"id", "error"}`` records.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("no images to label")
    ids = [f"img-{i:05d}" for i in range(len(images))] if ids is None else [str(i) for i in ids]
    if len(set(ids)) != len(ids) or len(ids) != len(images):
        raise ValueError("need one unique id per image")

    def one(i):
        try:
            return oracle.classify(images[i], ids[i]).label, None
        except OracleError as exc:
            return None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outcomes = list(pool.map(one, range(len(images))))

    keep = [i for i, (lab, _) in enumerate(outcomes) if lab is not None]
    failures = [{"id": ids[i], "error": err} for i, (_, err) in enumerate(outcomes) if err is not None]
    if failures:
        log.warning("oracle failed on %d of %d images", len(failures), len(images))
    names = sorted({outcomes[i][0] for i in keep})
    index = {n: k for k, n in enumerate(names)}
    return LabeledDataset(
        images[keep].astype(np.uint8),
        np.array([index[outcomes[i][0]] for i in keep], dtype=np.int64),
        names,
        [ids[i] for i in keep],
        provenance={"source": "oracle", "failures": failures},
    )


def train_substitute(spec: SubstituteSpec, labeled: LabeledDataset, backbone: Classifier) -> Classifier:
    """Frozen ``backbone`` features under a head sized to the observed labels."""
    if len(labeled.class_names) < 2 or len(np.unique(labeled.labels)) < 2:
        raise DegenerateLabelSetError("degenerate label set: the oracle returned fewer than two distinct labels")
    sub = build_substitute_arch(backbone, len(labeled.class_names), seed=spec.training.seed, class_names=labeled.class_names)
    return fit(sub, labeled, spec.training)


def agreement(model: Classifier, labeled: LabeledDataset) -> float:
    """Fraction of images on which ``model`` reproduces the oracle's label."""
    return float(np.mean(predict(model, labeled.images) == labeled.labels))
