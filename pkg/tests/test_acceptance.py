"""End-to-end acceptance checks, one test per criterion.

The contextual ablation (criteria 5 and 6) trains the full component ladder at
the default configuration and takes roughly a quarter of an hour on one core.
"""
import itertools
import time

import numpy as np
import pytest

from ctxcrf import nn
from ctxcrf.bench.ablate import RUNG_NAMES, run_ladder
from ctxcrf.bench.cli import main as cli
from ctxcrf.bench.config import ExperimentConfig
from ctxcrf.bench.suites import COUPLING_SCALES, gradient_suite, piecewise_descent, random_instance
from ctxcrf.bench.synthetic import CLASS_A, CLASS_B, gen_dataset
from ctxcrf.featmap import featmap_forward
from ctxcrf.graph import box_side, build_graph
from ctxcrf.infer import DEFAULT_MF_ITERATIONS, exact_marginals, kl_qp, mean_field, mean_field_sweeps, predict
from ctxcrf.potentials import UNARY, ContextCRF, PotentialTables, energy
from ctxcrf.train import TrainConfig, exact_nll, piecewise_nll


def loop_energy(graph, tables, y):
    e = 0.0
    for p in range(graph.num_nodes):
        e -= tables.unary[p, y[p]]
    for name, edges in graph.edge_sets.items():
        for i, (p, q) in enumerate(edges):
            e -= tables.pairwise[name][i, y[p], y[q]]
    return e


def fd_gradient(graph, tables, labels, eps=1e-6):
    out = []
    for arr in (tables.unary, *tables.pairwise.values()):
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = exact_nll(graph, tables, labels)[0]
            flat[i] = orig - eps
            fm = exact_nll(graph, tables, labels)[0]
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)
        out.append(num)
    return out


def test_criterion_1_gradient_suite(criterion):
    t = time.perf_counter()
    results = gradient_suite(seed=0, num_seeds=10)
    elapsed = time.perf_counter() - t
    worst = max(r.worst for r in results)
    failed = [r.name for r in results if not r.passed]
    criterion(1, not failed and elapsed < 120,
              f"{len(results)} suites x 10 seeds, worst rel. err {worst:.1e}, {elapsed:.0f}s, failed={failed}")


def test_criterion_2_exact_inference_oracles(criterion):
    t = time.perf_counter()
    rows_err = grad_err = 0.0
    energy_exact = True
    shapes = [(h, w, k) for h in (1, 2, 3) for w in (1, 2, 3) for k in (2, 3) if (h * w > 1 or k == 3)]
    for i in range(50):
        h, w, k = shapes[i % len(shapes)]
        rng = np.random.default_rng([2, i])
        graph, tables = random_instance(rng, h, w, k, box_ratio=1.0)
        rows_err = max(rows_err, np.abs(exact_marginals(graph, tables).q.sum(axis=1) - 1).max())
        # dyadic entries make every partial sum exact in either summation order
        dyadic = PotentialTables(np.round(tables.unary * 64) / 64,
                                 {n: np.round(v * 64) / 64 for n, v in tables.pairwise.items()})
        for y in itertools.islice(itertools.product(range(k), repeat=graph.num_nodes), 200):
            energy_exact &= energy(graph, dyadic, y) == loop_energy(graph, dyadic, y)
        if k ** graph.num_nodes <= 729:
            labels = rng.integers(0, k, graph.num_nodes)
            _, g = exact_nll(graph, tables, labels)
            for a, n in zip((g.unary, *g.pairwise.values()), fd_gradient(graph, tables, labels)):
                grad_err = max(grad_err, nn.relative_error(a, n))
    elapsed = time.perf_counter() - t
    ok = rows_err <= 1e-12 and grad_err < 1e-6 and energy_exact and elapsed < 60
    criterion(2, ok, f"50 instances: row-sum err {rows_err:.1e}, exact_nll FD err {grad_err:.1e}, "
                     f"energy==summation {energy_exact}, {elapsed:.0f}s")


def test_criterion_3_mean_field(criterion):
    edge_free = 0.0
    for i in range(20):
        rng = np.random.default_rng([3, i])
        g = build_graph(3, 3, [])
        t = PotentialTables(rng.standard_normal((9, 3)) * 2)
        edge_free = max(edge_free, np.abs(mean_field(g, t).q - exact_marginals(g, t).q).max())
    kl_rise = -np.inf
    for i in range(50):
        g, t = random_instance(np.random.default_rng([30, i]), 2, 2, 2, box_ratio=1.0, pair_scale=2.0)
        kls = [kl_qp(g, t, m) for m in mean_field_sweeps(g, t, 10)]
        kl_rise = max(kl_rise, max(b - a for a, b in zip(kls, kls[1:])))
    monotone = 0
    mean_err = np.zeros(len(COUPLING_SCALES))
    for i in range(20):
        g, t = random_instance(np.random.default_rng([31, i]), 3, 3, 3)
        errs = []
        for s in COUPLING_SCALES:
            ts = t.scaled_pairwise(s)
            errs.append(np.abs(mean_field(g, ts, 10).q - exact_marginals(g, ts).q).max())
        monotone += all(a > b for a, b in zip(errs, errs[1:]))
        mean_err += errs
    mean_err /= 20
    ok = edge_free <= 1e-12 and kl_rise <= 1e-9 and monotone == 20
    criterion(3, ok, f"edge-free err {edge_free:.1e}; max KL rise {kl_rise:.1e}; "
                     f"monotone on {monotone}/20, mean err by scale {np.array2string(mean_err, precision=1)}")


def test_criterion_4_piecewise_vs_exact(criterion):
    single = 0.0
    for i in range(20):
        rng = np.random.default_rng([4, i])
        k = int(rng.integers(2, 6))
        g = build_graph(1, 1, [])
        u = rng.standard_normal((1, k)) * 3
        y = [int(rng.integers(k))]
        pw = float(piecewise_nll(g, u, {}, y).data)
        single = max(single, abs(pw - exact_nll(g, PotentialTables(u), y)[0]))
    pairs = piecewise_descent(seed=0, instances=50)
    downhill = float(np.mean([end < start for start, end in pairs]))
    criterion(4, single <= 1e-12 and downhill >= 0.8,
              f"single-node |piecewise-exact| {single:.1e}; exact NLL reduced on {downhill:.0%} of 50 instances")


@pytest.fixture(scope="module")
def ladder_run():
    cfg = ExperimentConfig()
    data = gen_dataset(cfg.data())
    t = time.perf_counter()
    rungs = run_ladder(cfg, data.train, data.test)
    return len(data.train), len(data.test), {r.name: r for r in rungs}, time.perf_counter() - t


def ab_mean(report):
    return (report.per_class_iou[CLASS_A] + report.per_class_iou[CLASS_B]) / 2


def test_criterion_5_contextual_ablation(ladder_run, criterion):
    n_train, n_test, rungs, elapsed = ladder_run
    unary = rungs["+refinement"].metrics  # the full unary-only system
    full = rungs["+pairwise"].metrics
    ua, ub = unary.per_class_iou[CLASS_A], unary.per_class_iou[CLASS_B]
    gain = ab_mean(full) - ab_mean(unary)
    ok = (n_train, n_test) == (200, 50) and ua < 0.55 and ub < 0.55 and gain >= 0.15 and elapsed < 1800
    criterion(5, ok, f"unary-only A/B IoU {ua:.3f}/{ub:.3f}; with pairwise "
                     f"{full.per_class_iou[CLASS_A]:.3f}/{full.per_class_iou[CLASS_B]:.3f}; "
                     f"gain {gain:+.3f}; ladder {elapsed / 60:.1f} min")


def test_criterion_6_ladder_trend(ladder_run, criterion):
    _, _, rungs, _ = ladder_run
    ious = [rungs[n].metrics.iou for n in RUNG_NAMES]
    one_field = all(len(rungs[n].changed.split(",")) == 1 for n in RUNG_NAMES[1:])
    ok = one_field and ious[-1] > ious[0] and ious[-1] > ious[-2]
    criterion(6, ok, "mean IoU " + ", ".join(f"{n} {v:.3f}" for n, v in zip(RUNG_NAMES, ious)))


def test_criterion_7_pipeline_conformance(criterion):
    cfg = ExperimentConfig()
    model = ContextCRF(cfg.nets(), seed=0)
    sizes = {}
    for h, w in ((64, 64), (48, 80)):
        image = np.random.default_rng(0).uniform(size=(3, h, w))
        fmap = featmap_forward(model.nets[UNARY].trunk, image)
        sizes[(h, w)] = (predict(model, image).coarse.shape, (fmap.height, fmap.width))
    dims_ok = all(a == b for a, b in sizes.values())
    ok = (dims_ok and DEFAULT_MF_ITERATIONS == cfg.mf_iterations == 3 and cfg.box_ratio == 0.4
          and box_side(10, 20, cfg.box_ratio) == 4 and TrainConfig().scale_range == (0.7, 1.2)
          and cfg.training().scale_range == (0.7, 1.2))
    criterion(7, ok, f"coarse == feature map dims {dims_ok} {list(sizes.values())}; mean-field iterations "
                     f"{cfg.mf_iterations}; box ratio {cfg.box_ratio}; scale range {cfg.training().scale_range}")


DETERMINISM_CONFIG = """\
seed = 11
image_size = 48
count = 10
scales = 1.2, 0.8
block_channels = 4, 8, 8, 8
block_strides = 2, 2, 2, 2
scale_block_channels = 4
unary_hidden = 8
pairwise_hidden = 8
epochs = 2
batch_size = 4
"""


def pipeline_once(root, cfg_path):
    data, run, pred, metrics = root / "data", root / "run", root / "pred", root / "metrics.csv"
    cfg = ["--config", str(cfg_path)]
    assert cli(["gen-data", "--out", str(data), *cfg]) == 0
    assert cli(["train", "--data", str(data), "--out", str(run), *cfg]) == 0
    assert cli(["predict", "--checkpoint", str(run / "model.ckpt"), "--input", str(data), "--out", str(pred), *cfg]) == 0
    truth = root / "truth"
    truth.mkdir()
    for p in pred.glob("*.pgm"):
        if ".coarse" not in p.name:
            (truth / p.name).write_bytes((data / "masks" / p.name).read_bytes())
    assert cli(["eval", "--pred", str(pred), "--truth", str(truth), "--out", str(metrics)]) == 0
    return metrics.read_bytes(), (run / "model.ckpt").read_bytes()


def test_criterion_8_determinism(tmp_path, criterion):
    cfg_path = tmp_path / "det.cfg"
    cfg_path.write_text(DETERMINISM_CONFIG)
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    m1, c1 = pipeline_once(tmp_path / "a", cfg_path)
    m2, c2 = pipeline_once(tmp_path / "b", cfg_path)
    criterion(8, m1 == m2 and c1 == c2,
              f"metric CSVs identical {m1 == m2}, checkpoints identical {c1 == c2} ({len(m1)} bytes of CSV)")
