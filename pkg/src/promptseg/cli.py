"""Command-line interface.

Subcommands: ``train``, ``train-surrogate``, ``eval``, ``infer``, ``report``.
Training options come from a YAML config file (same keys as ``TrainConfig``)
with individual flags overriding file values; the dataset root falls back to
the ``PROMPTSEG_DATA_ROOT`` environment variable when not given explicitly.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

DATA_ROOT_ENV = "PROMPTSEG_DATA_ROOT"


def _load_yaml(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config file {path!r} must contain a mapping")
    return data


def _build_train_config(args: argparse.Namespace):
    from .generator import tiny_test_config
    from .training import config_from_dict

    raw = _load_yaml(args.config)
    ds = dict(raw.get("dataset", {}))
    if args.dataset is not None:
        ds["name"] = args.dataset
    root = args.data_root or ds.get("root_dir") or os.environ.get(DATA_ROOT_ENV)
    if root is not None:
        ds["root_dir"] = root
    if args.variant is not None:
        ds["variant"] = args.variant
    if "name" not in ds:
        raise SystemExit("no dataset selected: pass --dataset or set dataset.name in the config")
    raw["dataset"] = ds

    if args.tiny:
        import dataclasses

        raw["generator"] = dataclasses.asdict(tiny_test_config())
    overrides = {
        "backend": args.backend,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "max_epochs": args.epochs,
        "max_steps": args.max_steps,
        "seed": args.seed,
        "checkpoint_dir": args.checkpoint_dir,
    }
    for key, val in overrides.items():
        if val is not None:
            raw[key] = val
    if args.no_augment:
        raw["augment"] = False
    return config_from_dict(raw)


def _build_dataset_spec(args: argparse.Namespace):
    from .data import DatasetSpec

    root = args.data_root or os.environ.get(DATA_ROOT_ENV)
    return DatasetSpec(
        name=args.dataset,
        root_dir=root,
        split=args.split,
        variant=args.variant,
    )


def _cmd_train(args: argparse.Namespace) -> int:
    from .training import fit

    config = _build_train_config(args)
    result = fit(config, resume_from=args.resume_from)
    print(f"finished {len(result.history)} epochs; best val dice {result.best_val_dice:.4f}")
    print(f"last checkpoint: {result.last_checkpoint}")
    if result.best_checkpoint is not None:
        print(f"best checkpoint: {result.best_checkpoint}")
    return 0


def _cmd_train_surrogate(args: argparse.Namespace) -> int:
    from .data import load_dataset
    from .training import SurrogateTrainConfig, load_generator_checkpoint, train_surrogate

    generator, _ = load_generator_checkpoint(args.generator_checkpoint)
    dataset = load_dataset(_build_dataset_spec(args))
    config = SurrogateTrainConfig(
        lr=args.lr or 3e-4,
        batch_size=args.batch_size or 24,
        max_epochs=args.epochs or 60,
        seed=args.seed or 0,
    )
    _, history = train_surrogate(
        generator, dataset, config, checkpoint_path=args.out
    )
    print(f"finished {len(history)} epochs; final loss {history[-1]['loss_total']:.4f}")
    print(f"surrogate checkpoint: {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    import torch

    from .data import load_dataset
    from .segmenter import build_backend
    from .training import evaluate, load_generator_checkpoint

    generator, _ = load_generator_checkpoint(args.checkpoint)
    dataset = load_dataset(_build_dataset_spec(args))
    surrogate = None
    backend = None
    if args.surrogate_checkpoint:
        from .surrogate import SurrogateDecoder

        payload = torch.load(args.surrogate_checkpoint, map_location="cpu", weights_only=False)
        surrogate = SurrogateDecoder()
        surrogate.load_state_dict(payload["surrogate_state"])
    else:
        backend = build_backend(args.backend)
    report = evaluate(generator, dataset, backend=backend, surrogate=surrogate)
    out_csv = Path(args.out_csv) if args.out_csv else None
    if out_csv:
        report.to_csv(out_csv)
        print(f"wrote {out_csv}")
    if args.out_json:
        report.to_json(args.out_json)
        print(f"wrote {args.out_json}")
    for name, value in report.mean.items():
        print(f"{name}: {value:.4f}")
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    from .segmenter import build_backend
    from .training import infer, load_generator_checkpoint

    generator, _ = load_generator_checkpoint(args.checkpoint)
    backend = build_backend(args.backend)
    written = infer(
        generator,
        args.images,
        args.out_dir,
        backend=backend,
        threshold=args.threshold,
    )
    print(f"wrote {len(written)} files to {args.out_dir}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    with open(args.metrics_json) as fh:
        payload = json.load(fh)
    columns = list(payload["mean"].keys())
    header = ["sample_id", *columns]
    rows = [[s["sample_id"], *(f"{s[c]:.4f}" for c in columns)] for s in payload["samples"]]
    rows.append(["mean", *(f"{payload['mean'][c]:.4f}" for c in columns)])
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    for row in [header, *rows]:
        print("  ".join(str(v).ljust(w) for v, w in zip(row, widths)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptseg")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train the prompt generator")
    train.add_argument("--config", help="YAML config file")
    train.add_argument("--dataset", help="dataset name")
    train.add_argument("--data-root", help=f"dataset root (default: ${DATA_ROOT_ENV})")
    train.add_argument("--variant", help="dataset sub-split, where applicable")
    train.add_argument("--backend", choices=["stub", "foundation-vit-huge"])
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--max-steps", type=int)
    train.add_argument("--seed", type=int)
    train.add_argument("--checkpoint-dir")
    train.add_argument("--resume-from", help="resume from a last.pt training state")
    train.add_argument("--no-augment", action="store_true")
    train.add_argument("--tiny", action="store_true", help="use the miniature test generator")
    train.set_defaults(func=_cmd_train)

    surr = sub.add_parser("train-surrogate", help="train the lightweight decoder")
    surr.add_argument("--generator-checkpoint", required=True)
    surr.add_argument("--dataset", required=True)
    surr.add_argument("--data-root")
    surr.add_argument("--variant")
    surr.add_argument("--split", default="train")
    surr.add_argument("--lr", type=float)
    surr.add_argument("--batch-size", type=int)
    surr.add_argument("--epochs", type=int)
    surr.add_argument("--seed", type=int)
    surr.add_argument("--out", required=True, help="output surrogate checkpoint path")
    surr.set_defaults(func=_cmd_train_surrogate)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--data-root")
    ev.add_argument("--split", default="test")
    ev.add_argument("--variant")
    ev.add_argument("--backend", default="stub", choices=["stub", "foundation-vit-huge"])
    ev.add_argument("--surrogate-checkpoint", help="decode with a trained surrogate instead")
    ev.add_argument("--out-csv")
    ev.add_argument("--out-json")
    ev.set_defaults(func=_cmd_eval)

    inf = sub.add_parser("infer", help="segment image files")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--backend", default="stub", choices=["stub", "foundation-vit-huge"])
    inf.add_argument("--out-dir", required=True)
    inf.add_argument("--threshold", type=float, default=0.5)
    inf.add_argument("images", nargs="+")
    inf.set_defaults(func=_cmd_infer)

    rep = sub.add_parser("report", help="pretty-print a metrics JSON")
    rep.add_argument("metrics_json")
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    from .core import DatasetLayoutError, MissingWeightsError

    try:
        return args.func(args)
    except (DatasetLayoutError, MissingWeightsError) as exc:
        raise SystemExit(f"error: {exc}") from exc


if __name__ == "__main__":
    sys.exit(main())
