"""Desk-scale differentiable classifiers.

Three architectures are provided. Each network splits into ``features`` (the
convolutional trunk, whose output is the feature tap) and ``head`` (global
average pooling followed by one linear layer):

* ``cnn-a``: 3 conv blocks, widths 32/64/128, tap is ``128 x H/4 x W/4``
* ``cnn-b``: 4 conv blocks, widths 24/48/96/160, tap is ``160 x H/8 x W/8``
* ``mini-resnet``: stem plus 3 residual stages, widths 16/32/64, tap is
  ``64 x H/4 x W/4``

Images enter as ``H x W x C`` arrays in ``[0, 255]`` and are divided by 255
inside the model, so input gradients are in pixel units.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses
from .datasets import LabeledDataset

log = logging.getLogger(__name__)

ARCHITECTURES = ("cnn-a", "cnn-b", "mini-resnet")
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


class NoFeatureTapError(ValueError):
    pass


def _conv_block(cin, cout, pool):
    layers = [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU()]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class PooledHead(nn.Module):
    def __init__(self, in_features: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_features, num_classes)

    def forward(self, feat):
        return self.fc(feat.mean(dim=(2, 3)))


class ConvNet(nn.Module):
    def __init__(self, widths: Sequence[int], num_classes: int, in_channels: int = 3, pools: Optional[Sequence[bool]] = None):
        super().__init__()
        if pools is None:
            pools = [True] * (len(widths) - 1) + [False]
        blocks, cin = [], in_channels
        for w, p in zip(widths, pools):
            blocks.append(_conv_block(cin, w, p))
            cin = w
        self.features = nn.Sequential(*blocks)
        self.head = PooledHead(cin, num_classes)

    def forward(self, x):
        return self.head(self.features(x))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        out = self.conv2(F.relu(self.conv1(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class MiniResNet(nn.Module):
    def __init__(self, widths: Sequence[int], num_classes: int, in_channels: int = 3):
        super().__init__()
        stem = nn.Sequential(nn.Conv2d(in_channels, widths[0], 3, padding=1), nn.ReLU())
        stages, cin = [stem], widths[0]
        for i, w in enumerate(widths):
            stages.append(BasicBlock(cin, w, 1 if i == 0 else 2))
            cin = w
        self.features = nn.Sequential(*stages)
        self.head = PooledHead(cin, num_classes)

    def forward(self, x):
        return self.head(self.features(x))


class SubstituteNet(nn.Module):
    """A frozen feature trunk with a trainable head."""

    def __init__(self, features: nn.Module, head: nn.Module):
        super().__init__()
        self.features = features
        self.head = head
        for p in self.features.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        return self.head(self.features(x))


DEFAULT_WIDTHS = {
    "cnn-a": (32, 64, 128),
    "cnn-b": (24, 48, 96, 160),
    "mini-resnet": (16, 32, 64),
}


def build_network(arch: str, num_classes: int, in_channels: int = 3, widths=None) -> nn.Module:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    widths = tuple(widths or DEFAULT_WIDTHS[arch])
    if arch == "mini-resnet":
        return MiniResNet(widths, num_classes, in_channels)
    if arch == "cnn-b":
        return ConvNet(widths, num_classes, in_channels, pools=[True, True, True, False])
    return ConvNet(widths, num_classes, in_channels)


class Classifier:
    """A network plus the bookkeeping needed to use it on pixel images.

    ``arch`` names the architecture of the feature trunk; ``frozen`` marks a
    substitute whose trunk came from another (backbone) model.
    """

    def __init__(
        self,
        arch: str,
        net: nn.Module,
        class_names: Sequence[str],
        input_shape: Tuple[int, int, int],
        widths: Optional[Sequence[int]] = None,
        frozen: bool = False,
    ):
        self.arch = arch
        self.net = net
        self.class_names = [str(c) for c in class_names]
        self.input_shape = tuple(int(s) for s in input_shape)
        self.widths = tuple(widths or DEFAULT_WIDTHS.get(arch, ()))
        self.frozen = frozen
        net.eval()

    def __repr__(self):
        return f"Classifier({self.arch!r}, classes={len(self.class_names)}, input={self.input_shape})"

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def astype(self, dtype: torch.dtype) -> "Classifier":
        """Copy with parameters cast to ``dtype`` (e.g. float64 for gradient checks)."""
        net = copy.deepcopy(self.net).to(dtype)
        return Classifier(self.arch, net, self.class_names, self.input_shape, self.widths, self.frozen)

    def has_feature_tap(self) -> bool:
        return isinstance(getattr(self.net, "features", None), nn.Module)

    def head_parameters(self) -> List[torch.Tensor]:
        return list(self.net.head.parameters())

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    # -- tensor-level API; x is N x H x W x C in pixel units

    def check_batch(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x[None]
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match model input {self.input_shape}")
        return x

    def _prep(self, x: torch.Tensor) -> torch.Tensor:
        return x.permute(0, 3, 1, 2) / 255.0

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(self._prep(self.check_batch(x)))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if not self.has_feature_tap():
            raise NoFeatureTapError(f"{self.arch} model has no feature tap")
        return self.net.features(self._prep(self.check_batch(x)))

    def logits_and_features(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if not self.has_feature_tap():
            raise NoFeatureTapError(f"{self.arch} model has no feature tap")
        feat = self.net.features(self._prep(self.check_batch(x)))
        return self.net.head(feat), feat


def to_tensor(x, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64)).to(dtype)


def forward_logits(model: Classifier, x, batch_size: int = 256) -> np.ndarray:
    """Logits for one image (``H x W x C``) or a batch (``N x H x W x C``)."""
    arr = np.asarray(x)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    out = []
    with torch.no_grad():
        for i in range(0, len(arr), batch_size):
            out.append(model.logits(to_tensor(arr[i : i + batch_size], model.dtype)).numpy())
    res = np.concatenate(out) if out else np.empty((0, model.num_classes))
    return res[0] if single else res


def predict(model: Classifier, x, batch_size: int = 256) -> np.ndarray:
    return np.argmax(forward_logits(model, x, batch_size), axis=-1)


def featuremap(model: Classifier, x) -> np.ndarray:
    """Activations at the feature tap, before pooling and the head."""
    arr = np.asarray(x)
    single = arr.ndim == 3
    with torch.no_grad():
        feat = model.features(to_tensor(arr, model.dtype)).numpy()
    return feat[0] if single else feat


@dataclass(frozen=True)
class LossSpec:
    """Which scalar to differentiate in :func:`input_gradient`.

    ``kind`` is one of ``"ce"``, ``"class"``, ``"featuremap"`` or
    ``"composite"``. ``reference`` is the original image for the featuremap
    term.
    """

    kind: str
    label: Optional[int] = None
    kappa: float = losses.DEFAULT_KAPPA
    beta: float = losses.DEFAULT_BETA
    reference: Optional[np.ndarray] = None
    saturating: bool = False


def loss_value(model: Classifier, x: torch.Tensor, spec: LossSpec) -> torch.Tensor:
    """Per-sample loss on a pixel-unit batch ``x``."""
    kind = spec.kind
    if kind not in ("ce", "class", "featuremap", "composite"):
        raise ValueError(f"unknown loss kind {kind!r}")
    needs_feat = kind in ("featuremap", "composite")
    if needs_feat:
        if spec.reference is None:
            raise ValueError(f"{kind} loss needs a reference image")
        ref = to_tensor(spec.reference, x.dtype)
        with torch.no_grad():
            ref_feat = model.features(ref)
        z, feat = model.logits_and_features(x)
    else:
        z = model.logits(x)
    if kind != "featuremap":
        if spec.label is None:
            raise ValueError(f"{kind} loss needs a label")
        target = torch.full((z.shape[0],), int(spec.label), dtype=torch.long)
    if kind == "ce":
        return losses.cross_entropy(z, target)
    if kind == "class":
        return losses.class_margin(z, target, spec.kappa, spec.saturating)
    fm = losses.featuremap_distance(feat, ref_feat.expand_as(feat))
    if kind == "featuremap":
        return fm
    return losses.class_margin(z, target, spec.kappa, spec.saturating) + spec.beta * fm


def loss_scalar(model: Classifier, x, spec: LossSpec) -> float:
    with torch.no_grad():
        return float(loss_value(model, to_tensor(x, model.dtype)[None], spec)[0])


def input_gradient(model: Classifier, x, spec: LossSpec) -> np.ndarray:
    """Exact gradient of the loss with respect to every pixel of ``x``."""
    xt = to_tensor(x, model.dtype)[None].requires_grad_(True)
    loss = loss_value(model, xt, spec).sum()
    (grad,) = torch.autograd.grad(loss, xt)
    return grad[0].numpy()


# ---------------------------------------------------------------- training


@dataclass
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def new_classifier(arch: str, class_names: Sequence[str], input_shape, seed: int = 0, widths=None) -> Classifier:
    torch.manual_seed(seed)
    net = build_network(arch, len(class_names), input_shape[2], widths)
    return Classifier(arch, net, class_names, input_shape, widths)


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def fit(model: Classifier, data: LabeledDataset, hyper: TrainingConfig, step_loss=None) -> Classifier:
    """Train the parameters of ``model.net`` that require gradients, in place.

    ``step_loss(model, xb, yb)`` may replace the plain cross-entropy objective;
    it must return a scalar tensor.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if tuple(data.image_shape) != model.input_shape:
        raise ValueError(f"dataset images {data.image_shape} do not match model input {model.input_shape}")
    params = [p for p in model.net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=hyper.learning_rate)
    gen = torch.Generator().manual_seed(hyper.seed)
    x_all = to_tensor(data.images, model.dtype)
    y_all = torch.as_tensor(data.labels, dtype=torch.long)
    if step_loss is None:
        def step_loss(m, xb, yb):
            return F.cross_entropy(m.logits(xb), yb)

    model.net.train()
    try:
        for epoch in range(hyper.epochs):
            total = 0.0
            for idx in _batches(len(data), hyper.batch_size, gen):
                opt.zero_grad()
                loss = step_loss(model, x_all[idx], y_all[idx])
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(epoch, float(loss.detach()))
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
            log.debug("epoch %d: loss %.4f", epoch, total / len(data))
    finally:
        model.net.eval()
    return model


def train_classifier(arch: str, data: LabeledDataset, hyper: TrainingConfig, widths=None) -> Classifier:
    model = new_classifier(arch, data.class_names, data.image_shape, hyper.seed, widths)
    return fit(model, data, hyper)


def accuracy(model: Classifier, data: LabeledDataset) -> float:
    return float(np.mean(predict(model, data.images) == data.labels))


def build_substitute_arch(backbone: Classifier, num_classes: int, seed: int = 0, class_names=None) -> Classifier:
    """Frozen copy of ``backbone``'s trunk under a fresh linear head."""
    if num_classes < 2:
        raise ValueError("a substitute needs at least two classes")
    if not backbone.has_feature_tap() or not hasattr(backbone.net, "head"):
        raise NoFeatureTapError("backbone needs separable features and head")
    features = copy.deepcopy(backbone.net.features)
    in_features = backbone.net.head.fc.in_features
    torch.manual_seed(seed)
    head = PooledHead(in_features, num_classes).to(backbone.dtype)
    names = class_names or [str(i) for i in range(num_classes)]
    if len(names) != num_classes:
        raise ValueError("class_names length must equal num_classes")
    return Classifier(backbone.arch, SubstituteNet(features, head), names, backbone.input_shape, backbone.widths, frozen=True)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: Classifier, path) -> Path:
    """Single ``.npz`` file: a JSON metadata record plus one array per tensor."""
    path = Path(path)
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "class_names": model.class_names,
        "input_shape": list(model.input_shape),
        "widths": list(model.widths),
        "frozen": model.frozen,
        "dtype": str(model.dtype).replace("torch.", ""),
    }
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path) -> Classifier:
    with np.load(Path(path), allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        state = {k[len("param/"):]: torch.from_numpy(npz[k].copy()) for k in npz.files if k.startswith("param/")}
    shape = tuple(meta["input_shape"])
    net = build_network(meta["arch"], len(meta["class_names"]), shape[2], meta["widths"])
    if meta["frozen"]:
        net = SubstituteNet(net.features, net.head)
    net = net.to(getattr(torch, meta["dtype"]))
    net.load_state_dict(state)
    return Classifier(meta["arch"], net, meta["class_names"], shape, meta["widths"], meta["frozen"])
