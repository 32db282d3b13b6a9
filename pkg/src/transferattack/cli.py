"""``attackctl`` command line."""

from __future__ import annotations

import argparse
import logging
import sys
import time

from . import harness
from .attacks import AttackConfig
from .datasets import FAMILY_NAMES, generate_synthetic_dataset
from .defenses import DefenseChain, adversarial_training
from .models import ARCHITECTURES, TrainingConfig, accuracy, load_checkpoint, save_checkpoint, train_classifier
from .oracle import serve_mock_service


def _train_oracle(args) -> int:
    families = args.families.split(",") if args.families else FAMILY_NAMES[: args.classes]
    data = generate_synthetic_dataset(len(families), args.per_class, args.size, args.data_seed, families)
    hyper = TrainingConfig(args.epochs, args.batch_size, args.lr, args.seed)
    if args.adversarial_epsilon:
        cfg = AttackConfig(kind="pgd", epsilon=args.adversarial_epsilon, steps=args.adversarial_steps)
        model = adversarial_training(args.arch, data, cfg, hyper)
    else:
        model = train_classifier(args.arch, data, hyper)
    save_checkpoint(model, args.out)
    print(f"{args.arch}: training accuracy {accuracy(model, data):.3f}, saved to {args.out}")
    return 0


def _serve(args) -> int:
    model = load_checkpoint(args.model)
    stages = []
    if args.jpeg:
        stages.append({"kind": "jpeg", "quality": args.jpeg})
    if args.randomize:
        stages.append({"kind": "randomize"})
    chain = DefenseChain(stages, args.seed) if stages else None
    service = serve_mock_service(model, args.bind, return_scores=args.scores, defense=chain)
    print(f"serving {model.arch} at {service.url}/classify", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        service.close()
    return 0


def _run(args) -> int:
    config = harness.ExperimentConfig.load(args.config)
    out = args.out or config.output_dir or "attack-report"
    try:
        report = harness.run_attack_experiment(config)
    except harness.ExperimentAborted as exc:
        harness.emit_report(exc.report, out)
        print(f"aborted: {exc}; partial report in {out}", file=sys.stderr)
        return 2
    harness.emit_report(report, out)
    print(harness.summary_table(report))
    print(f"report written to {out}")
    return 0


def _report(args) -> int:
    report = harness.load_report(args.input)
    harness.emit_report(report, args.input)
    print(harness.summary_table(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attackctl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-oracle", help="train a desk-scale model on synthetic shapes")
    t.add_argument("--arch", choices=ARCHITECTURES, default="mini-resnet")
    t.add_argument("--classes", type=int, default=10)
    t.add_argument("--families", help="comma-separated shape families (overrides --classes)")
    t.add_argument("--per-class", type=int, default=100)
    t.add_argument("--size", type=int, default=32)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data-seed", type=int, default=1000)
    t.add_argument("--adversarial-epsilon", type=float, default=0.0, help="adversarially train at this budget")
    t.add_argument("--adversarial-steps", type=int, default=3)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_train_oracle)

    s = sub.add_parser("serve-oracle", help="serve a checkpoint over HTTP")
    s.add_argument("--model", required=True)
    s.add_argument("--bind", default="127.0.0.1:8080")
    s.add_argument("--scores", action="store_true", help="include per-class scores in responses")
    s.add_argument("--jpeg", type=int, help="JPEG-compress inputs at this quality")
    s.add_argument("--randomize", action="store_true", help="random resize and pad inputs")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_serve)

    r = sub.add_parser("run", help="run an experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.set_defaults(func=_run)

    rep = sub.add_parser("report", help="re-render plots and summary from a report directory")
    rep.add_argument("--in", dest="input", required=True)
    rep.set_defaults(func=_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
