"""``tsf`` command line: data generation, training, evaluation, ablation, benchmarking, map export.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every source of
randomness is derived from ``--seed``; ``--threads`` changes wall time only.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import analysis, selftest
from .attention import ConfigError
from .config import RunConfig, RunConfigError, load, parse_value
from .data import DataConfigError, evaluate_protocol, read_dataset, synth_generate, write_dataset
from .model import ModelConfigError, PatchProto
from .train import TrainingDiverged, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("tsf")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
# keys that never change results, so they stay out of checkpoints and metrics
NON_RESULT_KEYS = ("threads", "data", "ckpt", "out")

# flag -> RunConfig field
FLAGS = {"--seed": ("seed", int), "--threads": ("threads", int), "--out": ("out", str),
         "--data": ("data", str), "--ckpt": ("ckpt", str), "--neck": ("neck", str), "--heads": ("heads", int),
         "--n-filter": ("n_filter", int), "--lambda": ("lam", float), "--temperature": ("temperature", float),
         "--n-way": ("n_way", int), "--k-shot": ("k_shot", int), "--q-per-class": ("q_per_class", int),
         "--episodes": ("episodes", int), "--lr": ("lr", float), "--steps": ("steps", int)}


def _csv_values(text):
    return tuple(parse_value(v.strip()) for v in text.split(",") if v.strip())


EXTRA_FLAGS = {
    "ablate": {"--axis": ("ablate_axis", str), "--values": ("ablate_values", _csv_values),
               "--seeds": ("ablate_seeds", _csv_values)},
    "bench": {"--runs": ("bench_runs", int)},
    "export-maps": {"--count": ("export_count", int)},
}

COMMANDS = ("gen-data", "train", "eval", "ablate", "bench", "export-maps", "selftest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tsf", description="Semantic-filter few-shot workbench.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value run configuration file")
        for flag, (key, typ) in {**FLAGS, **EXTRA_FLAGS.get(name, {})}.items():
            p.add_argument(flag, dest=key, type=typ, default=None)
    return parser


def effective_config(args) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig()
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config") and v is not None}
    return cfg.merged(overrides)


def result_config(cfg: RunConfig) -> dict:
    return {k: v for k, v in cfg.to_dict().items() if k not in NON_RESULT_KEYS}


def _require(cfg: RunConfig, *keys):
    missing = [k for k in keys if getattr(cfg, k) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + k for k in missing)}")


def _bundle(cfg: RunConfig):
    if cfg.data:
        return read_dataset(cfg.data)
    logger.info("no --data given; generating the synthetic set from seed %d", cfg.seed)
    return synth_generate(cfg.generator(), cfg.seed)


def _write(path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig) -> int:
    _require(cfg, "out")
    bundle = synth_generate(cfg.generator(), cfg.seed)
    write_dataset(bundle, cfg.out)
    print(f"wrote {len(bundle.images)} images ({bundle.digest()}) to {cfg.out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "out")
    bundle = _bundle(cfg)
    model = PatchProto(cfg.model(bundle.classes("base")), seed=cfg.seed)
    try:
        ckpt, log = train(model, bundle, cfg.schedule(), seed=cfg.seed)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}\n{json.dumps(exc.snapshot, sort_keys=True)}", file=sys.stderr)
        return 2
    ckpt.meta["run_config"] = result_config(cfg)
    ckpt.meta["data"] = bundle.digest()
    save_checkpoint(ckpt, cfg.out)
    keys = sorted({k for e in log for k in e})
    rows = [",".join(keys)] + [",".join(repr(e[k]) if k in e else "" for k in keys) for e in log]
    _write(cfg.out + ".log.csv", "\n".join(rows) + "\n")
    print(f"wrote checkpoint {cfg.out} ({ckpt.fingerprint()}) after {cfg.steps} steps")
    return 0


def _metrics_dir(cfg: RunConfig) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "ckpt", "out")
    bundle = _bundle(cfg)
    model = load_checkpoint(cfg.ckpt).to_model()
    rec = evaluate_protocol(model, bundle, cfg.episodes, cfg.n_way, cfg.k_shot, cfg.q_per_class,
                            seed=cfg.seed, split=cfg.split, threads=cfg.threads)
    out = _metrics_dir(cfg)
    _write(os.path.join(out, "metrics.csv"), rec.csv_header() + "\n" + rec.to_csv_row() + "\n")
    body = json.loads(rec.to_json())
    body["config"] = result_config(cfg)
    _write(os.path.join(out, "metrics.json"), json.dumps(body, sort_keys=True, indent=1) + "\n")
    print(rec.to_json())
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    _require(cfg, "out")
    bundle = _bundle(cfg)
    grid = analysis.AblationGrid(cfg.ablate_axis, tuple(cfg.ablate_values), cfg, tuple(cfg.ablate_seeds))
    rows = analysis.run_ablation(grid, bundle, threads=cfg.threads)
    out = _metrics_dir(cfg)
    _write(os.path.join(out, "ablation.csv"), analysis.ablation_csv(rows))
    body = {"config": result_config(cfg), "rows": [
        {"value": r.value, "seeds": list(r.seeds), "mean_accuracy": r.mean_accuracy, "ci95": r.ci95,
         "seed_std": r.seed_std, "records": [json.loads(x.to_json()) for x in r.records],
         "data_hash": r.data_hash, "error": r.error} for r in rows]}
    _write(os.path.join(out, "ablation.json"), json.dumps(body, sort_keys=True, indent=1) + "\n")
    for r in rows:
        print(f"{r.axis}={r.value}: {r.mean_accuracy:.4f} +- {r.ci95:.4f}" + ("" if r.ok else f"  [{r.error}]"))
    return 0 if all(r.ok for r in rows) else 2


def cmd_bench(cfg: RunConfig) -> int:
    _require(cfg, "out")
    report = analysis.complexity_report(cfg.bench_h, cfg.bench_w, cfg.bench_c, cfg.n_filter,
                                        tuple(cfg.bench_heads), runs=cfg.bench_runs)
    out = _metrics_dir(cfg)
    counts = {k: v for k, v in report.items() if k != "timing"}
    # counts are deterministic; wall times live in their own file
    _write(os.path.join(out, "complexity.json"), analysis.complexity_json(counts) + "\n")
    _write(os.path.join(out, "complexity.txt"), analysis.complexity_text(counts))
    if "timing" in report:
        _write(os.path.join(out, "timing.json"), json.dumps(report["timing"], sort_keys=True, indent=1) + "\n")
    print(analysis.complexity_text(report), end="")
    return 0


def cmd_export_maps(cfg: RunConfig) -> int:
    _require(cfg, "ckpt", "out")
    bundle = _bundle(cfg)
    model = load_checkpoint(cfg.ckpt).to_model()
    index = bundle.class_index(cfg.split)
    rows = sorted(i for c in index for i in index[c])[:cfg.export_count]
    paths = analysis.export_correlation_maps(model, bundle.images[rows], cfg.out)
    print(f"wrote {len(paths)} grids for {len(rows)} images to {cfg.out}")
    return 0


def cmd_selftest(cfg: RunConfig) -> int:
    return 0 if selftest.run() else 2


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "bench": cmd_bench, "export-maps": cmd_export_maps, "selftest": cmd_selftest}


def _configure_logging():
    level = os.environ.get("TSF_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"TSF_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        _configure_logging()
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        cfg = effective_config(args)
        if cfg.threads < 1:
            raise UsageError("--threads must be at least 1")
    except (UsageError, RunConfigError) as exc:
        print(exc, file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"tsf: {exc}", file=sys.stderr)
        return 2
    logger.info("effective config:\n%s", cfg.dumps().rstrip())
    try:
        return HANDLERS[args.command](cfg)
    except (UsageError, ConfigError, DataConfigError, ModelConfigError, analysis.AblationError) as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"tsf {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
