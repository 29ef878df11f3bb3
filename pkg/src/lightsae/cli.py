"""Command-line entry point: ``lightsae {run,ablate,sweep-apply-point,analyze,synth,export-weights}``.

Exit codes: 0 success, 2 input/environment error, 3 configuration/variant error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from . import experiment
from .backbone import APPLY_POINTS, ForecastModel
from .data import synth_grouped, write_csv, write_labels
from .embedding import VARIANTS
from .errors import ConfigError, InputError, LightSAEError
from .experiment import ExperimentConfig
from .training import LR_GRID

log = logging.getLogger("lightsae")

EXIT_OK, EXIT_INPUT, EXIT_CONFIG = 0, 2, 3


def _floats(text: str) -> list[float]:
    if text.strip() == "default":
        return list(LR_GRID)
    return [float(x) for x in text.split(",") if x.strip()]


def _add_config_flags(p: argparse.ArgumentParser, seed_required: bool) -> None:
    p.add_argument("--config", help="experiment JSON; flags below override its fields")
    p.add_argument("--dataset", help="TSLib-style CSV (date,ch1,...,chN)")
    p.add_argument("--protocol", choices=("ett_hourly", "ett_quarter", "ratio712"))
    p.add_argument("--L", type=int, dest="L")
    p.add_argument("--H", type=int, dest="H")
    p.add_argument("--backbone", choices=("RLinear", "RMLP"))
    p.add_argument("--d-model", type=int)
    p.add_argument("--hidden-layers", type=int)
    p.add_argument("--apply-point", choices=APPLY_POINTS)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--K", type=int, dest="K")
    p.add_argument("--r", type=int, dest="r")
    p.add_argument("--no-aux-bias", action="store_true")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-grid", type=_floats, help="comma-separated rates, or 'default' for 1e-4,5e-4,1e-3,5e-3,1e-2")
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--output-dir")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            base = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON: {exc}") from None
    cfg = {
        "backbone": dict(base.get("backbone", {"kind": "RLinear", "d_model": 128})),
        "embedding": dict(base.get("embedding", {"variant": "LightSAE", "r": 25, "K": 3})),
        "train": dict(base.get("train", {})),
    }
    for key in ("dataset", "protocol", "L", "H", "output_dir"):
        if key in base:
            cfg[key] = base[key]
    top = {"dataset": args.dataset, "protocol": args.protocol, "L": args.L, "H": args.H,
           "output_dir": args.output_dir}
    cfg.update({k: v for k, v in top.items() if v is not None})
    bb = {"kind": args.backbone, "d_model": args.d_model, "hidden_layers": args.hidden_layers,
          "apply_point": args.apply_point}
    cfg["backbone"].update({k: v for k, v in bb.items() if v is not None})
    emb = {"variant": args.variant, "K": args.K, "r": args.r}
    cfg["embedding"].update({k: v for k, v in emb.items() if v is not None})
    if args.no_aux_bias:
        cfg["embedding"]["use_aux_bias"] = False
    tr = {"learning_rate": args.lr, "lr_grid": args.lr_grid, "max_epochs": args.epochs,
          "patience": args.patience, "batch_size": args.batch_size, "seed": args.seed}
    cfg["train"].update({k: v for k, v in tr.items() if v is not None})
    if "dataset" not in cfg:
        raise ConfigError("no dataset given (use --dataset or a config file)")
    if not Path(cfg["dataset"]).is_file():
        raise InputError(f"dataset file not found: {cfg['dataset']}")
    return ExperimentConfig.from_dict(cfg)


def cmd_run(args) -> int:
    report = experiment.run(config_from_args(args))
    m = report["metrics"]
    print(f"test MSE {m['test_mse']:.6f}  MAE {m['test_mae']:.6f}  "
          f"params {report['params']['total']} (+{report['params']['embedding_delta']})")
    print(Path(report["config"]["output_dir"]) / "report.json")
    return EXIT_OK


def cmd_ablate(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = experiment.ablate(config_from_args(args), variants)
    for r in rows:
        print(f"{r['variant']:<12} MSE {r['MSE']:.6f}  dMSE {r['dMSE_pct']:+.1f}%  "
              f"params {r['params']}  dparams {r['dparams_pct']:+.1f}%")
    return EXIT_OK


def cmd_sweep(args) -> int:
    for r in experiment.sweep_apply_point(config_from_args(args)):
        print(f"{r['apply_point']:<10} MSE {r['MSE']:.6f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    for p in experiment.analyze(args.weights_dir, args.mode, args.out_dir, args.name, args.threshold):
        print(p)
    return EXIT_OK


def cmd_synth(args) -> int:
    ds, labels = synth_grouped(args.N, args.T, args.G, args.noise, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out)
    write_labels(labels, out.with_name("groups.json"))
    print(out)
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise InputError(f"checkpoint not found: {ckpt}")
    model = ForecastModel.from_dict(json.loads(ckpt.read_text()))
    for f in experiment.export_weights(model, args.out_dir):
        print(Path(args.out_dir) / f)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lightsae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate one configuration")
    _add_config_flags(p, seed_required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="compare embedding variants under one seed")
    _add_config_flags(p, seed_required=False)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-apply-point", help="embedding / head / both / none")
    _add_config_flags(p, seed_required=False)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="structure analysis over exported weights")
    p.add_argument("weights_dir")
    p.add_argument("--mode", required=True, choices=("energy", "cosine", "gates", "pool"))
    p.add_argument("--out-dir")
    p.add_argument("--name", default="aux")
    p.add_argument("--threshold", type=float, default=0.95)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synth", help="write a grouped synthetic dataset plus groups.json")
    p.add_argument("--N", type=int, dest="N", default=32)
    p.add_argument("--T", type=int, dest="T", default=4000)
    p.add_argument("--G", type=int, dest="G", default=4)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-weights", help="write aux_c{i}.csv from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def _origin(exc: BaseException) -> str:
    tb = exc.__traceback__
    name = "lightsae"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("lightsae."):
            name = mod
        tb = tb.tb_next
    return name


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as exc:
        print(f"error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, PermissionError) as exc:
        print(f"error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except LightSAEError as exc:
        if args.verbose:
            traceback.print_exc()
        print(f"error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
