"""Desk-scale analyses: ablation grids, complexity report, correlation-map export."""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import tensor as T
from .attention import KINDS, NeckVariant, count_attention_macs, count_parameters, correlation_map, init_neck, \
    variant_forward
from .config import RunConfig
from .data import DatasetBundle, MetricsRecord, evaluate_protocol
from .model import PatchProto
from .rng import stream
from .tensor import Tensor
from .train import train

logger = logging.getLogger(__name__)

# grid axis -> RunConfig field(s) it sets
AXES = {"neck_variant": "neck", "heads": "heads", "lambda": "lam", "n_filter": "n_filter",
        "temperature": "temperature", "aux": None}
# Table-3 style head selections for the ``aux`` axis
AUX = {"metric": (False, False), "global": (True, False), "rotation": (False, True), "both": (True, True)}


class AblationError(ValueError):
    pass


class UnsupportedVariantError(ValueError):
    pass


class ComplexityError(AssertionError):
    pass


def apply_axis(base: RunConfig, axis: str, value) -> RunConfig:
    if axis not in AXES:
        raise AblationError(f"unknown axis {axis!r}; expected one of {sorted(AXES)}")
    if axis == "aux":
        if value not in AUX:
            raise AblationError(f"aux value must be one of {sorted(AUX)}, got {value!r}")
        g, r = AUX[value]
        return replace(base, use_global=g, use_rotation=r)
    return replace(base, **{AXES[axis]: value})


@dataclass(frozen=True)
class AblationGrid:
    axis: str
    values: tuple
    base: RunConfig = field(default_factory=RunConfig)
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if not self.values or not self.seeds:
            raise AblationError("a grid needs at least one value and one seed")
        for v in self.values:
            apply_axis(self.base, self.axis, v)

    def cells(self) -> list[RunConfig]:
        return [apply_axis(self.base, self.axis, v) for v in self.values]


@dataclass
class AblationRow:
    axis: str
    value: object
    seeds: tuple[int, ...]
    records: list[MetricsRecord]
    data_hash: str
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([r.mean_accuracy for r in self.records])) if self.ok else float("nan")

    @property
    def ci95(self) -> float:
        """Mean of the per-seed episode-level interval half-widths."""
        return float(np.mean([r.ci95 for r in self.records])) if self.ok else float("nan")

    @property
    def seed_std(self) -> float:
        if not self.ok or len(self.records) < 2:
            return float("nan")
        return float(np.std([r.mean_accuracy for r in self.records], ddof=1))


CSV_HEADER = "axis,value,seeds,mean_accuracy,ci95,seed_std,per_seed,data_hash,status"


def run_cell(cfg: RunConfig, bundle: DatasetBundle, seed: int) -> MetricsRecord:
    """Train one model on the base split and evaluate it on ``cfg.split`` with the same seed."""
    model = PatchProto(cfg.model(bundle.classes("base")), seed=seed)
    train(model, bundle, cfg.schedule(), seed=seed)
    return evaluate_protocol(model, bundle, cfg.episodes, cfg.n_way, cfg.k_shot, cfg.q_per_class,
                             seed=seed, split=cfg.split)


def run_ablation(grid: AblationGrid, bundle: DatasetBundle, threads: int = 1, cell_fn=run_cell) -> list[AblationRow]:
    """Train and evaluate every (value, seed) pair.  A failing cell is recorded, the rest still run.

    Cells are independent (own model, own RNG streams), so ``threads`` changes
    wall time only.
    """
    digest = bundle.digest()
    jobs = [(i, cfg, s) for i, cfg in enumerate(grid.cells()) for s in grid.seeds]

    def one(job):
        i, cfg, seed = job
        try:
            return i, cell_fn(cfg, bundle, seed), ""
        except Exception as exc:  # recorded per cell; the grid continues
            logger.warning("cell %s=%r seed %d failed: %s", grid.axis, grid.values[i], seed, exc)
            return i, None, f"{type(exc).__name__}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    rows = []
    for i, value in enumerate(grid.values):
        mine = [r for r in results if r[0] == i]
        errors = [e for _, _, e in mine if e]
        rows.append(AblationRow(grid.axis, value, tuple(grid.seeds), [rec for _, rec, e in mine if not e],
                                digest, errors[0] if errors else ""))
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        per_seed = ";".join(repr(rec.mean_accuracy) for rec in r.records)
        status = "ok" if r.ok else "failed: " + r.error.replace(",", ";").replace("\n", " ")
        lines.append(f"{r.axis},{r.value},{';'.join(map(str, r.seeds))},{r.mean_accuracy!r},{r.ci95!r},"
                     f"{r.seed_std!r},{per_seed},{r.data_hash},{status}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- complexity


def mac_ratio(h: int, w: int, c: int, n: int) -> Fraction:
    return Fraction(count_attention_macs("transformer", h, w, c, n), count_attention_macs("tsf", h, w, c, n))


def _median_forward_seconds(variant: NeckVariant, h: int, w: int, runs: int, warmup: int) -> float:
    rng = stream(0, "bench", variant.kind, variant.heads)
    params = init_neck(variant, rng)
    f = Tensor(rng.normal(size=(variant.c, h, w)))
    times = []
    with T.no_grad():
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            variant_forward(variant, params, f)
            if i >= warmup:
                times.append(time.perf_counter() - t0)
    return float(np.median(times))


def complexity_report(h: int, w: int, c: int, n: int, heads=(1,), runs: int = 100, warmup: int = 10) -> dict:
    """MACs and neck parameters per variant, plus median forward wall time when ``runs > 0``.

    Raises ``ComplexityError`` unless the transformer/tsf MAC ratio is exactly ``hw/n``.
    """
    ratio = mac_ratio(h, w, c, n)
    if ratio != Fraction(h * w, n):
        raise ComplexityError(f"MAC ratio {ratio} != hw/n = {Fraction(h * w, n)}")
    rows = []
    for kind in KINDS:
        for hd in heads:
            variant = NeckVariant(kind, hd, n, c)
            row = {"kind": kind, "heads": hd,
                   "macs": count_attention_macs(kind, h, w, c, n, hd),
                   "params": count_parameters(variant, init_neck(variant, stream(0, "count", kind, hd)))}
            rows.append(row)
    report = {"h": h, "w": w, "c": c, "n": n, "heads": list(heads),
              "ratio": f"{ratio.numerator}/{ratio.denominator}", "ratio_value": float(ratio), "rows": rows}
    if runs > 0:
        report["timing"] = {"runs": runs, "warmup": warmup, "median_seconds": [
            {"kind": r["kind"], "heads": r["heads"],
             "median": _median_forward_seconds(NeckVariant(r["kind"], r["heads"], n, c), h, w, runs, warmup)}
            for r in rows]}
    return report


def complexity_text(report: dict) -> str:
    lines = [f"grid {report['h']}x{report['w']}  c={report['c']}  n={report['n']}",
             f"transformer/tsf MAC ratio = {report['ratio']} = {report['ratio_value']!r}",
             f"{'kind':<18}{'heads':>6}{'macs':>16}{'params':>12}"]
    for r in report["rows"]:
        lines.append(f"{r['kind']:<18}{r['heads']:>6}{r['macs']:>16}{r['params']:>12}")
    if "timing" in report:
        lines.append(f"median forward seconds over {report['timing']['runs']} runs "
                     f"after {report['timing']['warmup']} warmups:")
        for t in report["timing"]["median_seconds"]:
            lines.append(f"{t['kind']:<18}{t['heads']:>6}{t['median']:>16.6g}")
    return "\n".join(lines) + "\n"


def complexity_json(report: dict, include_timing: bool = True) -> str:
    body = report if include_timing else {k: v for k, v in report.items() if k != "timing"}
    return json.dumps(body, sort_keys=True, indent=1)


# ---------------------------------------------------------------- correlation maps


def format_grid(grid: np.ndarray) -> str:
    return "".join(",".join(f"{v:.17g}" for v in row) + "\n" for row in grid)


def parse_grid(text: str) -> np.ndarray:
    return np.array([[float(v) for v in line.split(",")] for line in text.splitlines() if line])


def correlation_grids(model: PatchProto, image: np.ndarray) -> dict[str, np.ndarray]:
    """Maps for one image: ``f`` and ``fprime`` norm grids plus one ``theta{i}`` grid per filter row."""
    v = model.variant
    if v.kind != "tsf" or v.heads != 1:
        raise UnsupportedVariantError(f"correlation maps need a single-head tsf neck, got {v.kind} heads={v.heads}")
    with T.no_grad():
        f = model.backbone(Tensor._wrap(np.asarray(image, dtype=np.float64)[None]))
        fp = model.neck(f)
    c, h, w = f.shape[1:]
    r = correlation_map(Tensor._wrap(f.data[0]), model.params["neck.theta"], v.scaled)
    grids = {"f": np.linalg.norm(f.data[0], axis=0), "fprime": np.linalg.norm(fp.data[0], axis=0)}
    for i in range(r.shape[1]):
        grids[f"theta{i}"] = r[:, i].reshape(h, w)
    return grids


def export_correlation_maps(model: PatchProto, images: np.ndarray, out_dir) -> list[str]:
    """Write ``img{k}_{grid}.csv`` files (h rows of w values, 17 significant digits)."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k, image in enumerate(images):
        for name, grid in correlation_grids(model, image).items():
            path = os.path.join(out_dir, f"img{k:04d}_{name}.csv")
            with open(path, "w", encoding="ascii") as fh:
                fh.write(format_grid(grid))
            paths.append(path)
    return paths
