"""Defenses: preprocessing in front of an oracle, and adversarial training."""

from __future__ import annotations

import io
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from . import attacks
from .datasets import LabeledDataset
from .images import as_uint8, check_image
from .models import Classifier, TrainingConfig, fit, new_classifier, to_tensor

DEFAULT_JPEG_QUALITY = 75
DEFAULT_RESIZE_FRACTION = 0.85


def jpeg_defense(x, quality: int = DEFAULT_JPEG_QUALITY) -> np.ndarray:
    """JPEG encode then decode at ``quality`` (1-100)."""
    if not isinstance(quality, (int, np.integer)) or not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be an integer in 1..100, got {quality!r}")
    x = as_uint8(x)
    if x.shape[2] != 3:
        raise ValueError("JPEG defense expects a 3-channel image")
    buf = io.BytesIO()
    PILImage.fromarray(x, mode="RGB").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with PILImage.open(buf) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def _nearest_resize(x: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = np.minimum((np.arange(h) * x.shape[0]) // h, x.shape[0] - 1)
    cols = np.minimum((np.arange(w) * x.shape[1]) // w, x.shape[1] - 1)
    return x[rows][:, cols]


def randomization_defense(
    x,
    resize_range: Tuple[int, int],
    seed,
    out_size: Optional[Tuple[int, int]] = None,
    zero_offset: bool = False,
) -> np.ndarray:
    """Resize to a random square side in ``resize_range`` (nearest neighbour),
    then zero-pad at a random offset back to ``out_size`` (default: input size).
    """
    x = check_image(np.asarray(x))
    lo, hi = int(resize_range[0]), int(resize_range[1])
    out_h, out_w = out_size or x.shape[:2]
    if lo < 1 or hi < lo:
        raise ValueError(f"bad resize range {resize_range}")
    if hi > min(out_h, out_w):
        raise ValueError(f"resize range {resize_range} exceeds the oracle input size {(out_h, out_w)}")
    rng = np.random.default_rng(seed)
    side = int(rng.integers(lo, hi + 1))
    small = _nearest_resize(x, side, side)
    if zero_offset:
        top = left = 0
    else:
        top = int(rng.integers(0, out_h - side + 1))
        left = int(rng.integers(0, out_w - side + 1))
    out = np.zeros((out_h, out_w, x.shape[2]), dtype=x.dtype)
    out[top : top + side, left : left + side] = small
    return out


STAGE_KINDS = ("jpeg", "randomize")


@dataclass
class DefenseChain:
    """Ordered preprocessing stages applied in front of an oracle.

    Stages are dicts: ``{"kind": "jpeg", "quality": 75}`` or
    ``{"kind": "randomize", "min": 27, "max": 32}``. Randomized stages draw
    from a generator seeded by ``seed``, the stage index and the image bytes,
    so the chain is a pure function of its input.
    """

    stages: List[Dict] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        for st in self.stages:
            if st.get("kind") not in STAGE_KINDS:
                raise ValueError(f"unknown defense stage {st!r}")

    def __call__(self, x) -> np.ndarray:
        x = as_uint8(x)
        for i, st in enumerate(self.stages):
            if st["kind"] == "jpeg":
                x = jpeg_defense(x, int(st.get("quality", DEFAULT_JPEG_QUALITY)))
            else:
                size = min(x.shape[:2])
                lo = int(st.get("min", round(DEFAULT_RESIZE_FRACTION * size)))
                hi = int(st.get("max", size))
                seed = [self.seed, i, zlib.crc32(x.tobytes())]
                x = randomization_defense(x, (lo, hi), seed)
        return x

    def to_dict(self):
        return {"stages": [dict(s) for s in self.stages], "seed": self.seed}

    @classmethod
    def from_dict(cls, d) -> "DefenseChain":
        return cls([dict(s) for s in d.get("stages", [])], int(d.get("seed", 0)))


# ---------------------------------------------------------------- adversarial training


def adversarial_training(
    arch: str,
    data: LabeledDataset,
    attack_config: attacks.AttackConfig,
    hyper: TrainingConfig,
    widths=None,
) -> Classifier:
    """Train with every batch split 50/50 between clean images and adversarial
    versions crafted against the current parameters.
    """
    if attack_config.kind not in ("fgsm", "pgd"):
        raise ValueError("adversarial training crafts with fgsm or pgd")
    model = new_classifier(arch, data.class_names, data.image_shape, hyper.seed, widths)

    def step_loss(m, xb, yb):
        adv = torch.as_tensor(attacks.craft(m, xb.numpy(), yb.numpy(), attack_config), dtype=xb.dtype)
        return 0.5 * F.cross_entropy(m.logits(xb), yb) + 0.5 * F.cross_entropy(m.logits(adv), yb)

    return fit(model, data, hyper, step_loss=step_loss)


def expand_with_adversarial(model: Classifier, data: LabeledDataset, config: attacks.AttackConfig) -> LabeledDataset:
    """Offline variant: the dataset plus one quantized adversarial copy of each image."""
    adv = attacks.craft(model, data.images, data.labels, config)
    q = np.stack([attacks.quantize_into_ball(a, o, config.epsilon) for a, o in zip(adv, data.images)])
    return LabeledDataset(
        np.concatenate([data.images, q]),
        np.concatenate([data.labels, data.labels]),
        data.class_names,
        list(data.ids) + [f"{i}-adv" for i in data.ids],
        dict(data.provenance, adversarial=config.to_dict()),
    )
