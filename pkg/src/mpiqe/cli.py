"""Command-line entry points: gen-data, train, eval, protocol.

Exit codes: 0 success, 1 usage or config error, 2 data or checkpoint error,
3 numeric failure. Logs go to stderr; artifacts go to files.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ModelConfig, desk_config, load_config, save_config
from .data import DataError, export_dataset, load_manifest, synthesize_dataset
from .layers import NonFiniteError
from .metrics import EvalReport, MetricError, RepeatResult, data_efficiency_sweep, plcc, run_protocol, srcc
from .model import build_model
from .training import CheckpointError, NumericalError, load_checkpoint, predict_dataset, train

log = logging.getLogger("mpiqe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (desk defaults otherwise)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--no-scene-prompts", action="store_true")
    p.add_argument("--no-distortion-prompts", action="store_true")
    vp = p.add_mutually_exclusive_group()
    vp.add_argument("--no-deep-visual-prompts", action="store_true", help="plain ViT, no visual prompts")
    vp.add_argument("--shallow-visual-prompts", action="store_true", help="prompts at the first layer only")
    p.add_argument("--label-policy", choices=("manifest", "pseudo", "off"))
    p.add_argument("--plain-l1", action="store_true", help="L1 instead of smooth-L1 score loss")


def config_from_args(args) -> ModelConfig:
    cfg = load_config(args.config) if args.config else desk_config()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.no_scene_prompts:
        changes["use_scene_prompts"] = False
    if args.no_distortion_prompts:
        changes["use_distortion_prompts"] = False
    if args.no_deep_visual_prompts:
        changes["visual_prompt_mode"] = "none"
    if args.shallow_visual_prompts:
        changes["visual_prompt_mode"] = "shallow"
    if args.label_policy:
        changes["label_policy"] = args.label_policy
    if args.plain_l1:
        changes["plain_l1"] = True
    return cfg.replace(**changes) if changes else cfg


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    ds = synthesize_dataset(args.n, args.seed, size=args.size)
    manifest = export_dataset(ds, _out_dir(args.out))
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    out = _out_dir(args.out)
    ds = load_manifest(args.manifest)
    val = load_manifest(args.test_manifest) if args.test_manifest else None
    save_config(cfg, out / "config.txt")
    model = build_model(cfg)
    state = train(model, ds, cfg, val_dataset=val, out_dir=out)
    last = state.history[-1]
    log.info("trained %d epochs, final total loss %.4f", state.epoch, last["L_total"])
    print(out / "checkpoint")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_manifest(args.manifest)
    preds = predict_dataset(model, ds, seed=args.seed)
    mos = ds.normalized_mos()
    p, s = plcc(preds, mos), srcc(preds, mos)
    report = EvalReport([RepeatResult(args.seed, p, s, 0, len(ds))],
                        {"name": "single-eval", "checkpoint": str(args.checkpoint)},
                        model.cfg.fingerprint(), {"dataset": ds.fingerprint()})
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval_report.json"
    _out_dir(out.parent)
    report.save(out)
    print(f"PLCC {p:.4f}  SRCC {s:.4f}")
    return EXIT_OK


def cmd_protocol(args) -> int:
    if args.repeats < 1:
        raise UsageError("--repeats must be at least 1")
    cfg = config_from_args(args)
    out = _out_dir(args.out)
    ds = load_manifest(args.manifest)
    if args.fractions:
        try:
            fractions = [float(f) for f in args.fractions.split(",")]
        except ValueError as exc:
            raise UsageError(f"bad --fractions: {args.fractions}") from exc
        reports = data_efficiency_sweep(build_model, ds, fractions, args.repeats, base_seed=cfg.seed, config=cfg)
        summary = {str(f): r.to_dict() for f, r in reports.items()}
        (out / "sweep_report.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
        for f, r in reports.items():
            print(f"fraction {f:g}: median PLCC {r.median_plcc:.4f}  median SRCC {r.median_srcc:.4f}")
        return EXIT_OK
    report = run_protocol(build_model, ds, args.repeats, base_seed=cfg.seed, config=cfg)
    report.save(out / "protocol_report.json")
    print(f"median PLCC {report.median_plcc:.4f}  median SRCC {report.median_srcc:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mpiqe", description="Multi-prompt blind image quality evaluator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic labelled dataset")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a manifest, write checkpoint and log")
    _add_model_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-manifest", help="validation set for best-checkpoint selection")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0, help="crop sampling seed")
    p.add_argument("--out", help="report path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("protocol", help="repeated random 80/20 splits, median PLCC/SRCC")
    _add_model_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--fractions", help="comma-separated training fractions for a data-efficiency sweep")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_protocol)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (NumericalError, NonFiniteError, MetricError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
