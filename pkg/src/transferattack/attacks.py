"""White-box crafting against substitute models: FGSM, PGD, FFL-PGD, ensemble PGD.

All budgets are in pixel units (0-255). Iterates live in continuous space;
:func:`quantize_into_ball` turns the final iterate into the uint8 image that
is actually sent to an oracle, without leaving the budget.

This module never talks to an oracle. It only differentiates local models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, replace
from typing import List, Optional, Sequence, Union

import numpy as np
import torch

from . import losses
from .images import quantize
from .metrics import MetricReport, metric_report
from .models import Classifier, to_tensor

ATTACK_KINDS = ("fgsm", "pgd", "ffl-pgd", "ensemble")
PGD_LOSSES = ("ce", "class")
DEFAULT_STEPS = 20


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyperparameters.

    ``step_size`` defaults to ``max(1, epsilon / 4)``. FGSM is forced to a
    single step of size ``epsilon``. ``loss`` selects what plain PGD and the
    ensemble ascend (``"ce"`` or the clamped ``"class"`` margin);
    ``saturating_margin`` moves the margin clamp to ``+kappa``.

    ``refine`` switches the iterative attacks to distortion-minimising mode:
    once an iterate fools the attacked model(s) it is pulled back toward the
    original, and the least-distorted fooling iterate seen is returned. More
    steps then buy lower distortion instead of a larger perturbation.
    """

    kind: str = "pgd"
    epsilon: float = 8.0
    steps: int = DEFAULT_STEPS
    step_size: Optional[float] = None
    beta: float = losses.DEFAULT_BETA
    kappa: float = losses.DEFAULT_KAPPA
    seed: int = 0
    loss: str = "ce"
    saturating_margin: bool = False
    refine: bool = False

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; choose from {ATTACK_KINDS}")
        if self.loss not in PGD_LOSSES:
            raise ValueError(f"unknown PGD loss {self.loss!r}")
        if not self.epsilon >= 0 or not math.isfinite(self.epsilon):
            raise ValueError("epsilon must be a finite number >= 0")
        if self.kind == "fgsm":
            if self.refine:
                raise ValueError("refine needs an iterative attack")
            object.__setattr__(self, "steps", 1)
            object.__setattr__(self, "step_size", float(self.epsilon))
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is None:
            object.__setattr__(self, "step_size", max(1.0, self.epsilon / 4.0))
        if self.step_size < 0 or (self.step_size == 0 and self.epsilon > 0):
            raise ValueError("step_size must be > 0")
        if self.beta < 0 or self.kappa < 0:
            raise ValueError("beta and kappa must be >= 0")

    @property
    def alpha(self) -> float:
        return float(self.step_size)

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        step = None if self.kind != "fgsm" else epsilon
        return replace(self, epsilon=float(epsilon), step_size=step)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "AttackConfig":
        return cls(**d)


@dataclass(frozen=True)
class LinfBall:
    """Intersection of the l-inf ball around ``center`` with the pixel box."""

    center: np.ndarray
    radius: float

    def project(self, x) -> np.ndarray:
        return project_linf(x, self)


@dataclass
class AttackResult:
    adversarial: np.ndarray  # uint8, what an oracle would receive
    success: bool
    queries_used: int
    metrics: MetricReport
    config: AttackConfig
    target: int = -1
    continuous: Optional[np.ndarray] = None


# ---------------------------------------------------------------- losses


def class_loss(logits, t: int, kappa: float = losses.DEFAULT_KAPPA, saturating: bool = False) -> float:
    """``max(max_{i != t} Z_i - Z_t, -kappa)`` for a single logit vector."""
    z = torch.as_tensor(np.asarray(logits, dtype=np.float64))[None]
    if not 0 <= t < z.shape[1]:
        raise IndexError(f"label {t} out of range for {z.shape[1]} logits")
    target = torch.tensor([int(t)])
    return float(losses.class_margin(z, target, kappa, saturating)[0])


def featuremap_loss(model: Classifier, adv, orig) -> float:
    with torch.no_grad():
        fa = model.features(to_tensor(adv, model.dtype))
        fo = model.features(to_tensor(orig, model.dtype))
        return float(losses.featuremap_distance(fa, fo)[0])


def composite_loss(model: Classifier, adv, orig, t: int, beta: float = losses.DEFAULT_BETA,
                   kappa: float = losses.DEFAULT_KAPPA, saturating: bool = False) -> float:
    with torch.no_grad():
        z, fa = model.logits_and_features(to_tensor(adv, model.dtype))
        fo = model.features(to_tensor(orig, model.dtype))
        target = torch.tensor([int(t)])
        val = losses.class_margin(z, target, kappa, saturating) + beta * losses.featuremap_distance(fa, fo)
    return float(val[0])


# ---------------------------------------------------------------- projection


def project_linf(x, ball: LinfBall) -> np.ndarray:
    c = np.asarray(ball.center, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != c.shape:
        raise ValueError(f"shape {x.shape} does not match ball center {c.shape}")
    lo = np.maximum(c - ball.radius, 0.0)
    hi = np.minimum(c + ball.radius, 255.0)
    return np.minimum(np.maximum(x, lo), hi)


def quantize_into_ball(x, center, epsilon: float) -> np.ndarray:
    """uint8 image nearest to ``x`` that stays inside the budget around ``center``."""
    c = np.asarray(center, dtype=np.float64)
    q = quantize(x).astype(np.float64)
    lo = np.maximum(np.ceil(c - epsilon), 0.0)
    hi = np.minimum(np.floor(c + epsilon), 255.0)
    return np.clip(q, lo, hi).astype(np.uint8)


def _bounds(x0: torch.Tensor, eps: float):
    return torch.clamp(x0 - eps, min=0.0), torch.clamp(x0 + eps, max=255.0)


# ---------------------------------------------------------------- crafting


def _check_models(models: Sequence[Classifier]):
    if not models:
        raise ValueError("need at least one model")
    first = models[0]
    for m in models[1:]:
        if m.class_names != first.class_names:
            raise ValueError("ensemble members disagree on the label space")
        if m.input_shape != first.input_shape:
            raise ValueError("ensemble members disagree on the input shape")


def _targets(t, n: int) -> torch.Tensor:
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t.size == 1 and n > 1:
        t = np.repeat(t, n)
    if t.shape != (n,):
        raise ValueError(f"need one label per image, got {t.shape} for {n} images")
    return torch.as_tensor(t)


def _objective(models: Sequence[Classifier], x0: torch.Tensor, target: torch.Tensor, config: AttackConfig):
    kind = config.kind
    if config.loss == "ce":
        per_model = lambda m, x: losses.cross_entropy(m.logits(x), target)
    else:
        per_model = lambda m, x: losses.class_margin(m.logits(x), target, config.kappa, config.saturating_margin)

    if kind == "ensemble":
        return lambda x: torch.stack([per_model(m, x) for m in models]).mean(dim=0)

    model = models[0]
    if kind != "ffl-pgd":
        return lambda x: per_model(model, x)

    with torch.no_grad():
        ref = model.features(x0)

    def composite(x):
        z, feat = model.logits_and_features(x)
        margin = losses.class_margin(z, target, config.kappa, config.saturating_margin)
        return margin + config.beta * losses.featuremap_distance(feat, ref)

    return composite


def _grad(objective, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    (g,) = torch.autograd.grad(objective(x).sum(), x)
    if not torch.all(torch.isfinite(g)):
        raise NonFiniteGradientError("input gradient is not finite")
    return g


def craft(models: Union[Classifier, Sequence[Classifier]], originals, targets, config: AttackConfig) -> np.ndarray:
    """Continuous adversarial iterates for a batch (``N x H x W x C``)."""
    if isinstance(models, Classifier):
        models = [models]
    models = list(models)
    _check_models(models)
    if config.kind != "ensemble" and len(models) != 1:
        raise ValueError(f"{config.kind} attacks a single model")
    dtype = models[0].dtype
    x0 = models[0].check_batch(to_tensor(originals, dtype))
    target = _targets(targets, x0.shape[0])
    objective = _objective(models, x0, target, config)

    if config.kind == "fgsm":
        g = _grad(objective, x0)
        return torch.clamp(x0 + config.epsilon * torch.sign(g), 0.0, 255.0).numpy()

    lo, hi = _bounds(x0, config.epsilon)
    if config.refine:
        return _refine(models, objective, x0, target, lo, hi, config).numpy()
    x = x0.clone()
    for _ in range(config.steps):
        g = _grad(objective, x)
        x = torch.minimum(torch.maximum(x + config.alpha * torch.sign(g), lo), hi)
    return x.numpy()


def _fooled(models, x, lo, hi, target) -> torch.Tensor:
    # judged on the image that will actually be sent: rounded and clipped to the budget
    q = torch.minimum(torch.maximum(torch.sign(x) * torch.floor(torch.abs(x) + 0.5), torch.ceil(lo)), torch.floor(hi))
    with torch.no_grad():
        z = torch.stack([m.logits(q) for m in models]).mean(dim=0)
    return z.argmax(dim=1) != target


def _refine(models, objective, x0, target, lo, hi, config: AttackConfig) -> torch.Tensor:
    # boundary walk: fooling iterates step back toward x0, the rest ascend the loss
    a = config.alpha
    x = x0.clone()
    best = x0.clone()
    best_d = torch.full((x0.shape[0],), float("inf"), dtype=x0.dtype)
    found = torch.zeros(x0.shape[0], dtype=torch.bool)

    def keep(x):
        nonlocal best_d, found
        fooled = _fooled(models, x, lo, hi, target)
        d = (x - x0).flatten(1).pow(2).sum(dim=1)
        better = fooled & (d < best_d)
        best[better] = x[better]
        best_d = torch.where(better, d, best_d)
        found = found | fooled
        return fooled

    for _ in range(config.steps):
        fooled = keep(x)
        g = _grad(objective, x)
        ascended = torch.minimum(torch.maximum(x + a * torch.sign(g), lo), hi)
        delta = x - x0
        shrunk = x0 + torch.sign(delta) * torch.clamp(delta.abs() - a, min=0.0)
        x = torch.where(fooled[:, None, None, None], shrunk, ascended)
    keep(x)
    return torch.where(found[:, None, None, None], best, x)


def _results(models, originals, targets, adv_cont, config, single) -> Union[AttackResult, List[AttackResult]]:
    originals = np.asarray(originals)
    if single:
        originals, adv_cont = originals[None], adv_cont.reshape((1,) + adv_cont.shape[-3:])
    n = len(originals)
    t = _targets(targets, n).numpy()
    adv = np.stack([quantize_into_ball(a, o, config.epsilon) for a, o in zip(adv_cont, originals)])
    with torch.no_grad():
        z = torch.stack([m.logits(to_tensor(adv, m.dtype)) for m in models]).mean(dim=0)
    pred = z.argmax(dim=1).numpy()
    out = [
        AttackResult(
            adversarial=adv[i],
            success=bool(pred[i] != t[i]),
            queries_used=0,
            metrics=metric_report(adv[i], originals[i]),
            config=config,
            target=int(t[i]),
            continuous=adv_cont[i],
        )
        for i in range(n)
    ]
    return out[0] if single else out


def run_attack(models, originals, targets, config: AttackConfig):
    """Craft, quantize and score. One image in gives one result; a batch gives a list.

    ``success`` here is white-box success on the attacked model(s); callers
    that verify against an oracle overwrite it.
    """
    if isinstance(models, Classifier):
        models = [models]
    single = np.asarray(originals).ndim == 3
    batch = np.asarray(originals)[None] if single else np.asarray(originals)
    adv = craft(models, batch, targets, config)
    return _results(list(models), originals, targets, adv, config, single)


def fgsm(model: Classifier, orig, t, epsilon: float):
    return run_attack(model, orig, t, AttackConfig(kind="fgsm", epsilon=epsilon))


def pgd(model: Classifier, orig, t, config: AttackConfig):
    if config.kind != "pgd":
        raise ValueError("pgd() needs a config of kind 'pgd'")
    return run_attack(model, orig, t, config)


def ffl_pgd(model: Classifier, orig, t, config: AttackConfig):
    if config.kind != "ffl-pgd":
        raise ValueError("ffl_pgd() needs a config of kind 'ffl-pgd'")
    return run_attack(model, orig, t, config)


def ensemble_attack(models: Sequence[Classifier], orig, t, config: AttackConfig):
    if config.kind != "ensemble":
        raise ValueError("ensemble_attack() needs a config of kind 'ensemble'")
    return run_attack(list(models), orig, t, config)
