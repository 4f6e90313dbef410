"""Command-line entry point: ``epic <command> [--config PATH] [--set key=value ...]``.

Exit codes: 0 success, 1 runtime failure (or a failed gradient check),
2 invalid configuration or arguments.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import plots
from .config import ConfigError, ExperimentConfig
from .hub import FAMILIES
from .model import MODES
from .trainer import (ablate, check_gradients, count_params, evaluate_checkpoint,
                      layer_interval, rows_to_csv, sweep, train)

log = logging.getLogger("epic")


class UsageError(Exception):
    pass


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"cannot read {path}")
        cfg = ExperimentConfig.load(path)
    else:
        cfg = ExperimentConfig()
    cfg = cfg.with_overrides(args.set or [])
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    if args.literal_losses:
        cfg = cfg.replace(literal_losses=True)
    return cfg


def parse_modes(text: str) -> list[str]:
    if text == "all":
        return list(MODES)
    modes = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise UsageError(f"--modes: unknown {bad or text!r}; choose from {', '.join(MODES)} or all")
    return modes


def parse_layer_sets(text: str) -> list[tuple[int, ...]]:
    try:
        return [tuple(int(x) for x in part.split("-")) for part in text.split(",") if part]
    except ValueError:
        raise UsageError(f"--layers: expected e.g. 2-3-4,1-3-5, got {text!r}") from None


def default_layer_sets(n_layers: int, size: int = 3) -> list[tuple[int, ...]]:
    """Every evenly spaced run of ``size`` layers with interval 1 or 2."""
    out = []
    for interval in (1, 2):
        for start in range(n_layers - (size - 1) * interval):
            out.append(tuple(start + i * interval for i in range(size)))
    return out


def _seeds(cfg: ExperimentConfig, n: int) -> range:
    if n < 1:
        raise UsageError("--seeds must be >= 1")
    return range(cfg.seed, cfg.seed + n)


# ----------------------------------------------------------------- commands


def cmd_train(args, cfg: ExperimentConfig) -> int:
    res = train(cfg, out_dir=cfg.out_dir)
    print(f"run directory: {res.run_dir}")
    for key, value in sorted(res.final.items()):
        print(f"{key} = {value:.4f}")
    return 0


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
    elif args.config:
        ckpt = Path(args.config).with_name("checkpoint.npz")
    else:
        raise UsageError("eval needs --checkpoint or a run's --config")
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} not found")
    sys.stdout.write(rows_to_csv(("split", "metric", "value"), evaluate_checkpoint(cfg, ckpt)))
    return 0


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    if args.seeds < 3:
        raise UsageError("ablate needs --seeds >= 3 for a pooled std")
    out = Path(cfg.out_dir)
    table = ablate(cfg, parse_modes(args.modes), _seeds(cfg, args.seeds), args.workers, out)
    plots.ablation_svg(out / "ablation.csv", out / "ablation.svg")
    sys.stdout.write(table.markdown())
    return 0


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    layer_sets = (parse_layer_sets(args.layers) if args.layers
                  else default_layer_sets(cfg.n_layers))
    sims = [s.strip() for s in args.similarities.split(",") if s.strip()]
    bad = [s for s in sims if s not in FAMILIES]
    if bad or not sims:
        raise UsageError(f"--similarities: unknown {bad}; choose from {', '.join(FAMILIES)}")
    for layers in layer_sets:
        cfg.replace(interaction_layers=layers)  # validates indices before any compute
        try:
            layer_interval(layers)
        except ValueError as exc:
            raise UsageError(f"--layers: {exc}") from None
    rows = sweep(cfg, layer_sets, sims, _seeds(cfg, args.seeds), args.workers, out)
    plots.sweep_svg(out / "sweep.csv", out / "sweep.svg")
    for layers, interval, sim, mean, std in rows:
        print(f"{layers:>8}  interval {interval}  {sim:<12} {float(mean):.4f} ± {float(std):.4f}")
    return 0


def cmd_grad_check(args, cfg: ExperimentConfig) -> int:
    if not 0 < args.h <= 1e-3:
        raise UsageError(f"--h must be in (0, 1e-3], got {args.h:g}")
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    report = check_gradients(cfg, n_samples=args.samples, h=args.h, tol=args.tol)
    for name, err in report.per_leaf.items():
        print(f"{name:<16} max_rel_error {err:.3e}")
    where = f" at {report.worst[0]}[{report.worst[1]}]" if report.worst else ""
    status = "pass" if report.passed else "FAIL"
    print(f"{status}: max_rel_error {report.max_rel_error:.3e}{where} "
          f"over {report.n_checked} coordinates (tol {args.tol:g}, h {args.h:g})")
    return 0 if report.passed else 1


def cmd_count_params(args, cfg: ExperimentConfig) -> int:
    ledger = count_params(cfg)
    print(f"mode = {cfg.mode}")
    print(f"interaction_layers = {list(cfg.schedule.interaction_layers)}")
    sys.stdout.write(ledger.to_text(include_times=False))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "grad-check": cmd_grad_check,
    "count-params": cmd_count_params,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", metavar="DIR", help="output directory (sets out_dir)")
    common.add_argument("--literal-losses", action="store_true",
                        help="use the as-printed loss forms (sets literal_losses)")
    common.add_argument("-v", "--verbose", action="store_true", help="log every epoch")

    parser = argparse.ArgumentParser(prog="epic", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train one run")
    p = sub.add_parser("eval", parents=[common], help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", metavar="PATH",
                   help="archive to load (default: checkpoint.npz beside --config)")
    p = sub.add_parser("ablate", parents=[common], help="compare ablation modes over seeds")
    p.add_argument("--modes", default="all", help="comma list of modes, or all")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("sweep", parents=[common], help="layer-set by similarity grid")
    p.add_argument("--layers", help="comma list of dash-joined layer sets, e.g. 2-3-4,1-3-5")
    p.add_argument("--similarities", default=",".join(FAMILIES))
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("grad-check", parents=[common],
                       help="finite-difference check of the training loss gradient")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=2)
    sub.add_parser("count-params", parents=[common], help="print the parameter ledger")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(logging.DEBUG if args.verbose else logging.WARNING)
    try:
        cfg = load_config(args)
    except (TypeError, ValueError) as exc:  # ConfigError included
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
