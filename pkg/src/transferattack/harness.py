"""End-to-end experiments: label, train the substitute, craft, verify, report.

Query accounting: each image is labelled once (query 1); each crafted
adversarial image costs one verification query. A single attack at a single
epsilon therefore uses exactly two queries per image.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .attacks import AttackConfig, craft, quantize_into_ball
from .datasets import FAMILY_NAMES, LabeledDataset, generate_synthetic_dataset, ingest_image_directory
from .defenses import DEFAULT_JPEG_QUALITY, DEFAULT_RESIZE_FRACTION, DefenseChain
from .metrics import escape_rate, metric_report
from .models import (
    Classifier,
    TrainingConfig,
    accuracy,
    load_checkpoint,
    predict,
    train_classifier,
)
from .oracle import HttpOracle, LocalOracle, Oracle, OracleError, cloud_client
from .substitute import SubstituteSpec, agreement, label_with_oracle, train_substitute

log = logging.getLogger(__name__)

CSV_COLUMNS = ["image_id", "attack", "epsilon", "success", "psnr_db", "ssim", "linf", "queries"]

# oracle classes and backbone pretraining classes are disjoint slices of the family list
ORACLE_FAMILIES = FAMILY_NAMES[:10]
BACKBONE_FAMILIES = FAMILY_NAMES[10:]


class BudgetViolationError(AssertionError):
    pass


class ExperimentAborted(RuntimeError):
    def __init__(self, message: str, report: "ExperimentReport"):
        super().__init__(message)
        self.report = report


@dataclass
class ExperimentConfig:
    """JSON-serialisable description of one experiment.

    ``attacks`` entries are :class:`AttackConfig` fields (``epsilon`` is
    taken from ``epsilons``) plus an optional ``name`` used in the report.
    """

    dataset: Dict = field(default_factory=lambda: {"kind": "synthetic", "classes": 10, "per_class": 10, "seed": 3000})
    oracle: Dict = field(default_factory=lambda: {"kind": "train", "arch": "mini-resnet"})
    substitute: Dict = field(default_factory=lambda: {"backbone": {"arch": "cnn-a"}})
    attacks: List[Dict] = field(default_factory=lambda: [{"kind": "pgd"}, {"kind": "ffl-pgd"}])
    epsilons: List[float] = field(default_factory=lambda: [1, 2, 3, 4, 5, 6, 7, 8])
    defense: Optional[Dict] = None
    output_dir: Optional[str] = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not self.attacks:
            raise ValueError("at least one attack config is required")
        eps = [float(e) for e in self.epsilons]
        if not eps or any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilons must be a non-empty, strictly increasing list")
        self.epsilons = eps
        for a in self.attacks:
            self.attack_config(a, eps[0])

    @staticmethod
    def attack_config(entry: Dict, epsilon: float) -> AttackConfig:
        kw = {k: v for k, v in entry.items() if k not in ("name", "epsilon")}
        return AttackConfig(epsilon=float(epsilon), **kw)

    @staticmethod
    def attack_name(entry: Dict) -> str:
        return entry.get("name", entry["kind"])

    def to_dict(self):
        return {
            "dataset": self.dataset,
            "oracle": self.oracle,
            "substitute": self.substitute,
            "attacks": self.attacks,
            "epsilons": self.epsilons,
            "defense": self.defense,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ExperimentReport:
    rows: List[Dict] = field(default_factory=list)
    aggregates: List[Dict] = field(default_factory=list)
    queries: Dict = field(default_factory=dict)
    substitute: Dict = field(default_factory=dict)
    environment: Dict = field(default_factory=dict)
    failures: List[Dict] = field(default_factory=list)

    def to_dict(self):
        return {
            "rows": self.rows,
            "aggregates": self.aggregates,
            "queries": self.queries,
            "substitute": self.substitute,
            "environment": self.environment,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, d) -> "ExperimentReport":
        return cls(**{k: d.get(k, v) for k, v in cls().to_dict().items()})

    def aggregate(self, attack: str, epsilon: float) -> Dict:
        for a in self.aggregates:
            if a["attack"] == attack and a["epsilon"] == float(epsilon):
                return a
        raise KeyError((attack, epsilon))

    def curve(self, attack: str, key: str = "escape_rate") -> List[float]:
        return [a[key] for a in self.aggregates if a["attack"] == attack]


def compute_aggregates(rows: Sequence[Dict]) -> List[Dict]:
    """Escape rate and mean PSNR/SSIM per (attack, epsilon), in first-seen order."""
    groups: Dict = {}
    for r in rows:
        groups.setdefault((r["attack"], r["epsilon"]), []).append(r)
    out = []
    for (attack, eps), rs in groups.items():
        ssims = [r["ssim"] for r in rs if r["ssim"] is not None]
        out.append({
            "attack": attack,
            "epsilon": eps,
            "n": len(rs),
            "escape_rate": escape_rate([(False, r["success"]) for r in rs]),
            "mean_psnr": float(np.mean([r["psnr_db"] for r in rs])),
            "mean_ssim": float(np.mean(ssims)) if ssims else None,
            "mean_linf": float(np.mean([r["linf"] for r in rs])),
        })
    return out


# ---------------------------------------------------------------- building blocks


def build_dataset(spec: Dict, seed: int = 0) -> LabeledDataset:
    kind = spec.get("kind", "synthetic")
    if kind == "synthetic":
        classes = int(spec.get("classes", 10))
        return generate_synthetic_dataset(
            classes,
            int(spec.get("per_class", 10)),
            int(spec.get("size", 32)),
            int(spec.get("seed", 3000 + seed)),
            spec.get("families", ORACLE_FAMILIES[:classes]),
        )
    if kind == "directory":
        return ingest_image_directory(spec["path"], spec.get("manifest"), tuple(spec.get("size", (32, 32))))
    raise ValueError(f"unknown dataset kind {kind!r}")


def _training(spec: Dict, seed: int, **defaults) -> TrainingConfig:
    d = dict(defaults)
    d.update({k: spec[k] for k in ("epochs", "batch_size", "learning_rate") if k in spec})
    return TrainingConfig(seed=int(spec.get("seed", seed)), **d)


def train_model_from_spec(spec: Dict, seed: int, families: Sequence[str], size: int = 32) -> Classifier:
    """Train an architecture on a fresh synthetic set drawn from ``families``."""
    fams = spec.get("families") or list(families[: int(spec.get("classes", len(families)))])
    data = generate_synthetic_dataset(
        len(fams), int(spec.get("per_class", 100)), size, int(spec.get("data_seed", 1000 + seed)), fams
    )
    hyper = _training(spec, seed, epochs=30, batch_size=32, learning_rate=2e-3)
    model = train_classifier(spec.get("arch", "cnn-a"), data, hyper)
    log.info("trained %s on %d images, accuracy %.3f", model.arch, len(data), accuracy(model, data))
    return model


def build_oracle(spec: Dict, seed: int = 0, defense: Optional[DefenseChain] = None, size: int = 32) -> Oracle:
    kind = spec.get("kind", "train")
    if kind in ("local", "train"):
        if kind == "local":
            model = load_checkpoint(spec["model"])
        else:
            model = train_model_from_spec(dict(spec, data_seed=spec.get("data_seed", 1000 + seed)), seed, ORACLE_FAMILIES, size)
        return LocalOracle(model, return_scores=bool(spec.get("return_scores", False)), defense=defense)
    if defense is not None:
        raise ValueError("defense chains run inside local oracles only")
    if kind == "http":
        return HttpOracle(spec["url"], timeout=float(spec.get("timeout", 10.0)))
    if kind == "cloud":
        return cloud_client(spec["vendor"], synonyms=spec.get("synonyms"))
    raise ValueError(f"unknown oracle kind {kind!r}")


def build_backbone(spec, seed: int = 0, size: int = 32) -> Classifier:
    if isinstance(spec, str):
        return load_checkpoint(spec)
    spec = dict(spec)
    spec.setdefault("data_seed", 2000 + seed)
    return train_model_from_spec(spec, seed, BACKBONE_FAMILIES, size)


# ---------------------------------------------------------------- the protocol


def describe_defense(chain: DefenseChain, image_shape) -> Dict:
    """The chain with every stage parameter resolved, listing which were defaults."""
    size = min(image_shape[:2])
    stages, defaults = [], []
    for st in chain.stages:
        st = dict(st)
        if st["kind"] == "jpeg":
            wanted = {"quality": DEFAULT_JPEG_QUALITY}
        else:
            wanted = {"min": int(round(DEFAULT_RESIZE_FRACTION * size)), "max": size}
        for k, v in wanted.items():
            if k not in st:
                st[k] = v
                defaults.append(f"{st['kind']}.{k}")
        stages.append(st)
    return {"stages": stages, "seed": chain.seed, "defaults_used": defaults}


def _env(config: ExperimentConfig) -> Dict:
    import torch

    return {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "seed": config.seed,
        "config": config.to_dict(),
    }


def run_attack_experiment(
    config: ExperimentConfig,
    oracle: Optional[Oracle] = None,
    backbones: Optional[Dict[str, Classifier]] = None,
    dataset: Optional[LabeledDataset] = None,
) -> ExperimentReport:
    """Run the two-query protocol over every (attack, epsilon) pair.

    ``oracle``, ``backbones`` (keyed ``"main"`` and, for ensembles,
    ``"ensemble"`` as a list) and ``dataset`` override what the config would
    build.
    """
    seed = config.seed
    report = ExperimentReport(environment=_env(config))
    data = dataset if dataset is not None else build_dataset(config.dataset, seed)
    size = data.image_shape[0]
    if oracle is None:
        chain = DefenseChain.from_dict(config.defense) if config.defense else None
        oracle = build_oracle(config.oracle, seed, chain, size)
    if config.defense:
        report.environment["defense"] = describe_defense(DefenseChain.from_dict(config.defense), data.image_shape)
    start_total = oracle.ledger.total

    # query 1: label every image once
    labeled = label_with_oracle(oracle, data.images, data.ids, config.workers)
    report.failures = list(labeled.provenance.get("failures", []))
    if len(labeled) == 0:
        report.queries = {"total": oracle.ledger.total - start_total}
        raise ExperimentAborted("oracle answered no labelling query", report)

    backbones = dict(backbones or {})
    sub_spec = config.substitute
    training = _training(sub_spec.get("training", {}), seed, epochs=100, batch_size=32, learning_rate=1e-2)
    main_bb = backbones.get("main") or build_backbone(sub_spec.get("backbone", {"arch": "cnn-a"}), seed, size)
    substitute = train_substitute(SubstituteSpec(main_bb.arch, training), labeled, main_bb)

    ensemble: List[Classifier] = []
    if any(a["kind"] == "ensemble" for a in config.attacks):
        ens_bbs = backbones.get("ensemble")
        if ens_bbs is None:
            specs = sub_spec.get("ensemble_backbones", [{"arch": "cnn-b"}, {"arch": "mini-resnet"}])
            ens_bbs = [build_backbone(s, seed, size) for s in specs]
        ensemble = [substitute] + [train_substitute(SubstituteSpec(b.arch, training), labeled, b) for b in ens_bbs]

    oracle_labels = labeled.label_names
    targets = predict(substitute, labeled.images)
    report.substitute = {
        "arch": substitute.arch,
        "classes": substitute.class_names,
        "agreement": agreement(substitute, labeled),
        "ensemble": [m.arch for m in ensemble],
    }

    label_total = oracle.ledger.total - start_total
    rows: List[Dict] = []
    try:
        for entry in config.attacks:
            name = config.attack_name(entry)
            models = ensemble if entry["kind"] == "ensemble" else [substitute]
            for eps in config.epsilons:
                cfg = config.attack_config(entry, eps)
                cont = craft(models, labeled.images, targets, cfg)
                adv = np.stack([quantize_into_ball(a, o, eps) for a, o in zip(cont, labeled.images)])
                linf = np.abs(adv.astype(np.int16) - labeled.images.astype(np.int16)).reshape(len(adv), -1).max(axis=1)
                if np.any(linf > eps):
                    raise BudgetViolationError(f"{name} at epsilon {eps} left the l-inf budget")
                rows.extend(_verify(oracle, labeled, adv, oracle_labels, name, eps, config.workers))
    except OracleError as exc:
        report.rows = rows
        report.aggregates = compute_aggregates(rows)
        report.queries = {"total": oracle.ledger.total - start_total, "labeling": label_total}
        raise ExperimentAborted(f"oracle failed during verification: {exc}", report) from exc

    report.rows = rows
    report.aggregates = compute_aggregates(rows)
    report.queries = {
        "total": oracle.ledger.total - start_total,
        "labeling": label_total,
        "verification": oracle.ledger.total - start_total - label_total,
        "images": len(labeled),
        "per_crafted_example": 2,
    }
    return report


def _verify(oracle, labeled, adv, oracle_labels, name, eps, workers) -> List[Dict]:
    # query 2: one verification per crafted example
    def one(i):
        return oracle.classify(adv[i], labeled.ids[i])

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        verdicts = list(pool.map(one, range(len(adv))))
    rows = []
    for i, v in enumerate(verdicts):
        m = metric_report(adv[i], labeled.images[i])
        rows.append({
            "image_id": labeled.ids[i],
            "attack": name,
            "epsilon": float(eps),
            "success": bool(v.label != oracle_labels[i]),
            "psnr_db": m.psnr,
            "ssim": m.ssim,
            "linf": m.linf,
            "queries": 2,
        })
    return rows


# ---------------------------------------------------------------- output


def report_json(report: ExperimentReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def report_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in report.rows:
        w.writerow({k: r[k] for k in CSV_COLUMNS})
    return buf.getvalue()


PLOTS = {
    "escape_rate.png": ("escape_rate", "escape rate"),
    "psnr.png": ("mean_psnr", "PSNR (dB)"),
    "ssim.png": ("mean_ssim", "SSIM"),
}


def emit_report(report: ExperimentReport, out_dir) -> Dict[str, Path]:
    """Write report.json, results.csv and the three per-epsilon plots."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = {"report": out / "report.json", "csv": out / "results.csv"}
    paths["report"].write_text(report_json(report))
    paths["csv"].write_text(report_csv(report))

    attacks = list(dict.fromkeys(a["attack"] for a in report.aggregates))
    for fname, (key, ylabel) in PLOTS.items():
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for name in attacks:
            pts = [(a["epsilon"], a[key]) for a in report.aggregates if a["attack"] == name and a[key] is not None]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", label=name)
        ax.set_xlabel("epsilon")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        if attacks:
            ax.legend()
        fig.tight_layout()
        paths[fname] = out / fname
        fig.savefig(paths[fname], dpi=100, metadata={"Software": None})
        plt.close(fig)
    return paths


def load_report(in_dir) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads((Path(in_dir) / "report.json").read_text()))


def summary_table(report: ExperimentReport) -> str:
    lines = [f"{'attack':<12}{'eps':>6}{'n':>6}{'escape':>9}{'psnr':>9}{'ssim':>8}"]
    for a in report.aggregates:
        ssim = "-" if a["mean_ssim"] is None else f"{a['mean_ssim']:.3f}"
        lines.append(f"{a['attack']:<12}{a['epsilon']:>6g}{a['n']:>6}{a['escape_rate']:>9.3f}{a['mean_psnr']:>9.2f}{ssim:>8}")
    q = report.queries
    if q:
        lines.append(f"queries: total={q.get('total')} labeling={q.get('labeling')} verification={q.get('verification')}")
    return "\n".join(lines)
