"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line to the terminal
before asserting, so ``pytest -v`` output doubles as the acceptance report.
The desk-scale experiments (criteria 5 to 7) share one cache of trained
cells, so the tsf cell is trained once per seed.
"""
import math
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest

from test_attention import _grid, _loop_attention, _loop_ffn, _tokens
from test_model import _loop_metric_loss, _loop_pce, _micro
from test_tensor import OP_CASES
from tsf import cli
from tsf import tensor as T
from tsf.analysis import AblationGrid, run_ablation
from tsf.attention import NeckVariant, attention, count_attention_macs, count_parameters, init_neck, variant_forward
from tsf.config import RunConfig
from tsf.data import evaluate_protocol, rotate_queries, sample_episode, synth_generate
from tsf.model import ModelConfig, PatchProto, build_prototypes, metric_loss, metric_predict, multitask_loss, patch_ce_loss
from tsf.rng import stream
from tsf.tensor import Tensor, finite_diff_check

SEEDS = tuple(range(20))
EXPERIMENT_SEEDS = (0, 1, 2)
DESK = RunConfig(episodes=600)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    return emit


# ---------------------------------------------------------------- criterion 1


def _op_errors(seed):
    errors = {}
    for name, build, fn in OP_CASES:
        rng = stream(seed, "gradcheck", name)
        arrays = build(rng)
        probe = stream(seed, "probe", name)
        weights = {}
        for i, arr in enumerate(arrays):
            def scalar(t, i=i):
                args = [Tensor._wrap(a) for a in arrays]
                args[i] = t
                out = fn(*args)
                if "w" not in weights:
                    weights["w"] = probe.normal(size=out.shape)
                return T.sum_(out * weights["w"])

            errors[f"{name}[{i}]"] = finite_diff_check(scalar, Tensor(arr))
    return errors


def _attention_errors(seed):
    rng = stream(seed, "gradcheck", "attention")
    q, k, v = rng.normal(size=(4, 6)), rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    probe = rng.normal(size=(4, 6))
    errors = {}
    for i, arr in enumerate((q, k, v)):
        def scalar(t, i=i):
            args = [Tensor(a) for a in (q, k, v)]
            args[i] = t
            return T.sum_(attention(*args, heads=2, scaled=True) * Tensor(probe))

        errors[f"attention[{i}]"] = finite_diff_check(scalar, Tensor(arr))
    return errors


def _full_loss_errors(seed):
    model, ep = _micro(seed)
    errors = {}
    for name, param in model.params.items():
        def loss(t, name=name, orig=param):
            model.params[name] = t
            try:
                return model.losses(ep)["total"]
            finally:
                model.params[name] = orig

        errors[f"loss/{name}"] = finite_diff_check(loss, Tensor(param.data))
    return errors


def test_criterion_1_gradient_suite(report):
    start = time.process_time()
    worst_name, worst = "", 0.0
    for seed in SEEDS:
        for errors in (_op_errors(seed), _attention_errors(seed), _full_loss_errors(seed)):
            for name, err in errors.items():
                if not err <= worst:
                    worst_name, worst = name, err
    elapsed = time.process_time() - start
    ok = worst < 1e-4 and elapsed < 120.0
    report(1, ok, f"max rel err {worst:.2e} ({worst_name}) over {len(SEEDS)} seeds, {elapsed:.1f}s CPU")
    assert worst < 1e-4, worst_name
    assert elapsed < 120.0


# ---------------------------------------------------------------- criterion 2


def _oracle_gaps(seed):
    gaps = {}
    rng = stream(seed, "accept-oracle")
    c, h, w = 8, 4, 4

    q, k, v = rng.normal(size=(5, c)), rng.normal(size=(3, c)), rng.normal(size=(3, c))
    gaps["attention"] = np.abs(attention(Tensor(q), Tensor(k), Tensor(v)).data - _loop_attention(q, k, v)).max()

    variant = NeckVariant("tsf", 1, 5, c)
    params = init_neck(variant, rng)
    f = rng.normal(size=(c, h, w))
    tok = _tokens(f)
    theta = params["theta"].data
    want = _grid(_loop_ffn(params, tok + _loop_attention(tok, theta, theta)), h, w)
    gaps["tsf_forward"] = np.abs(variant_forward(variant, params, Tensor(f)).data - want).max()

    self_attn = NeckVariant("transformer", 1, 5, c, identity_ffn=True)
    want = _grid(tok + _loop_attention(tok, tok, tok), h, w)
    gaps["transformer"] = np.abs(variant_forward(self_attn, {}, Tensor(f)).data - want).max()

    s = rng.normal(size=(6, 3, 2, 2))
    labels = rng.permutation(np.repeat(np.arange(3), 2))
    want = np.zeros((3, 3, 2, 2))
    for i, lab in enumerate(labels):
        want[lab] += s[i] / 2
    gaps["prototypes"] = np.abs(build_prototypes(Tensor(s), labels, 3).data - want).max()

    qe, protos = rng.normal(size=(3, 4, 2, 3)), rng.normal(size=(4, 4, 2, 3))
    ql = rng.integers(0, 4, 3)
    got = metric_loss(metric_predict(Tensor(qe), Tensor(protos), 1.7), ql, reduction="sum").item()
    gaps["metric_loss"] = abs(got - _loop_metric_loss(qe, protos, ql, 1.7))

    qe, wt, b = rng.normal(size=(3, 4, 2, 2)), rng.normal(size=(4, 6)), rng.normal(size=6)
    gl = rng.integers(0, 6, 3)
    got = patch_ce_loss(Tensor(qe), Tensor(wt), Tensor(b), gl, 6, reduction="sum").item()
    gaps["pce"] = abs(got - _loop_pce(qe, wt, b, gl))

    lm, lg, lr = rng.uniform(0, 10, 3)
    lam, ag, ar = rng.uniform(0, 2), rng.uniform(0.3, 3), rng.uniform(0.3, 3)
    want = 0.5 * lm
    for lj, a in ((lg, ag), (lr, ar)):
        coef = lam + 1.0 / (2.0 * a * a)
        want += coef * lj + math.log(1.0 / coef)
    got = multitask_loss(*(Tensor(np.array(x)) for x in (lm, lg, lr)), lam,
                         Tensor(np.array(ag)), Tensor(np.array(ar))).item()
    gaps["multitask_loss"] = abs(got - want)
    return gaps


def test_criterion_2_oracle_equivalence(report):
    worst = {}
    for seed in SEEDS:
        for name, gap in _oracle_gaps(seed).items():
            worst[name] = max(worst.get(name, 0.0), float(gap))
    ok = all(g < 1e-10 for g in worst.values())
    report(2, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok, worst


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_mac_ratio(report):
    bad = []
    for h in (4, 8, 16):
        for w in (4, 8, 16):
            for n in (1, 5, 16):
                trans = count_attention_macs("transformer", h, w, 64, n)
                tsf = count_attention_macs("tsf", h, w, 64, n)
                if Fraction(trans, tsf) != Fraction(h * w, n):
                    bad.append((h, w, n))
    example = Fraction(count_attention_macs("transformer", 8, 8, 64, 5), count_attention_macs("tsf", 8, 8, 64, 5))
    ok = not bad and example == Fraction(64, 5)
    report(3, ok, f"27 grid points exact, h=w=8 n=5 ratio {example} = {float(example)}")
    assert not bad, bad
    assert example == Fraction(64, 5) and float(example) == 12.8


# ---------------------------------------------------------------- criterion 4


def test_criterion_4_parameter_count(report):
    variant = NeckVariant("tsf", 1, 5, 640, ffn_hidden=640)
    count = count_parameters(variant, init_neck(variant, stream(0, "count")))
    ok = count == 826_240 and count < 1_000_000
    report(4, ok, f"tsf neck at c=640, n=5 has {count:,} learnables")
    assert count == 826_240
    assert count < 1_000_000


# ------------------------------------------------------- criteria 5, 6 and 7


@pytest.fixture(scope="module")
def desk_bundle():
    return synth_generate(DESK.generator(), DESK.seed)


class _Cells:
    """Seed-averaged accuracies of desk cells, trained once and shared."""

    def __init__(self, bundle):
        self.bundle = bundle
        self.rows = {}
        self.cpu = {}

    def get(self, axis, value, base=DESK):
        key = (axis, value, base)
        if key not in self.rows:
            start = time.process_time()
            (row,) = run_ablation(AblationGrid(axis, (value,), base, EXPERIMENT_SEEDS), self.bundle)
            self.cpu[key] = time.process_time() - start
            assert row.ok, row.error
            self.rows[key] = row
        return self.rows[key]


@pytest.fixture(scope="module")
def cells(desk_bundle):
    return _Cells(desk_bundle)


def _describe(row):
    per_seed = ", ".join(f"{r.mean_accuracy:.4f}" for r in row.records)
    return f"{100 * row.mean_accuracy:.2f} [{per_seed}]"


def test_criterion_5_neck_ordering(report, cells):
    rows = {v: cells.get("neck_variant", v) for v in ("none", "transformer", "tsf")}
    cpu = sum(cells.cpu[("neck_variant", v, DESK)] for v in rows)
    tsf, none, trans = (100 * rows[v].mean_accuracy for v in ("tsf", "none", "transformer"))
    ok = tsf >= none + 1.0 and tsf >= trans and cpu <= 900.0
    report(5, ok, f"tsf {_describe(rows['tsf'])}, none {_describe(rows['none'])}, "
                  f"transformer {_describe(rows['transformer'])}; {cpu:.0f}s CPU for 9 runs")
    assert tsf >= none + 1.0
    assert tsf >= trans
    assert cpu <= 900.0


def test_criterion_6_filter_count_insensitivity(report, cells):
    cells.get("neck_variant", "tsf")
    means = {1: cells.get("n_filter", 1), 5: cells.rows[("neck_variant", "tsf", DESK)], 64: cells.get("n_filter", 64)}
    acc = {n: 100 * row.mean_accuracy for n, row in means.items()}
    spread = max(acc.values()) - min(acc.values())
    report(6, spread <= 3.0, f"spread {spread:.2f} points; " + ", ".join(f"n={n} {_describe(r)}" for n, r in means.items()))
    assert spread <= 3.0


def test_criterion_7_auxiliary_heads_help(report, cells):
    both = cells.get("neck_variant", "tsf")
    metric_only = cells.get("aux", "metric")
    gain = 100 * (both.mean_accuracy - metric_only.mean_accuracy)
    report(7, gain >= 1.0, f"both heads {_describe(both)} vs metric only {_describe(metric_only)}, gain {gain:+.2f}")
    assert DESK.lam == 0.5 and DESK.use_global and DESK.use_rotation
    assert gain >= 1.0


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_protocol_statistics(report):
    small = RunConfig(n_base=6, n_novel=5, images_per_class=12, image_size=16, widths=(4, 8))
    bundle = synth_generate(small.generator(), 0)
    model = PatchProto(ModelConfig(image_size=16, widths=(4, 8), use_global=False), seed=2)
    episodes = 30
    rec = evaluate_protocol(model, bundle, episodes=episodes, n_way=5, k_shot=1, q_per_class=4, seed=5)
    accs = [float(np.mean(model.infer(ep) == ep.query_labels))
            for ep in (sample_episode(bundle, 5, 1, 4, stream(5, "episode", i)) for i in range(episodes))]
    mean = sum(accs) / episodes
    closed = 1.96 * math.sqrt(sum((a - mean) ** 2 for a in accs) / (episodes - 1)) / math.sqrt(episodes)
    ci_gap = abs(rec.ci95 - closed)
    two_value = 1.96 * statistics.stdev([0.5, 0.7]) / math.sqrt(2)

    counts_ok = True
    for n_way, per_class in ((2, 1), (3, 2), (5, 4)):
        ep = rotate_queries(sample_episode(bundle, n_way, 1, per_class, stream(n_way, "rot")))
        m_q = n_way * per_class
        counts_ok &= len(ep.query) == 4 * m_q
        counts_ok &= np.bincount(ep.rotation_labels, minlength=4).tolist() == [m_q] * 4
    ok = ci_gap <= 1e-12 and abs(two_value - 0.196) <= 1e-12 and counts_ok
    report(8, ok, f"CI gap {ci_gap:.1e} vs closed form, rotation counts {'exact' if counts_ok else 'WRONG'}")
    assert ci_gap <= 1e-12
    assert abs(two_value - 0.196) <= 1e-12
    assert counts_ok


# ---------------------------------------------------------------- criterion 9

TINY = """\
n_base = 6
n_novel = 5
images_per_class = 10
image_size = 16
widths = [4, 8]
steps = 3
train_q_per_class = 2
q_per_class = 4
episodes = 8
ablate_seeds = [0, 1]
ablate_values = ["none", "tsf"]
bench_runs = 2
export_count = 2
"""


def _files(path):
    if path.is_file():
        log = path.with_name(path.name + ".log.csv")
        return {"": path.read_bytes(), "log": log.read_bytes() if log.exists() else b""}
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.name != "timing.json"}


def test_criterion_9_cli_reproducibility(report, tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    data = tmp_path / "data"
    ckpt = tmp_path / "ref.ckpt"
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(ckpt)]) == 0
    commands = {"gen-data": [], "train": ["--data", str(data)], "eval": ["--data", str(data), "--ckpt", str(ckpt)],
                "ablate": ["--data", str(data)], "bench": [], "export-maps": ["--data", str(data), "--ckpt", str(ckpt)]}
    differing = []
    for command, extra in commands.items():
        outputs = []
        for run, threads in enumerate((1, 1, 4, 4)):
            out = tmp_path / f"{command}-{run}"
            argv = [command, "--config", str(cfg), "--seed", "11", "--threads", str(threads), "--out", str(out), *extra]
            assert cli.main(argv) == 0, argv
            outputs.append(_files(out))
        if any(o != outputs[0] for o in outputs[1:]):
            differing.append(command)
    ok = not differing
    report(9, ok, f"{len(commands)} commands x (2 repeats at --threads 1, 2 at --threads 4) byte-identical"
           if ok else f"differing outputs: {differing}")
    assert not differing
