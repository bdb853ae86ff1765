"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The end-to-end criteria (8, 9, 10, 11, 12, 13) drive the real pipeline
stages at desk-scale defaults for seeds 0-4, so this module takes a couple
of hours on one CPU.
"""

import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import scipy.stats as ss

from conftest import record
import test_tensor as tt

from cdt import pipeline
from cdt.atlas import convergence_overlap
from cdt.enrichment import _overlap, circular_permutation_test, select_top_bins
from cdt.model import CDTModel, ModelConfig, forward_batch, load_checkpoint
from cdt.stats import ContingencyTable2x2, fisher_exact_haldane, hypergeom_sf
from cdt.tensor import Tape, Tensor, backward, mse
from cdt.trainer import evaluate_metrics
from cdt.world import WorldConfig, generate_world

SEEDS = range(5)
ABLATION_SEEDS = range(3)
TRAIN_BUDGET_S = 600.0


class DeskRuns:
    """Full pipeline runs at desk defaults, computed on first use."""

    def __init__(self, base):
        self.base = base
        self.runs = {}

    def config(self, name, doc, seed):
        d = self.base / name
        d.mkdir(exist_ok=True)
        path = d / "config.json"
        path.write_text(json.dumps({**doc, "seed": seed}))
        return pipeline.RunConfig.load(path, out=str(d / "run"))

    def full(self, seed, name=None):
        key = name or f"seed{seed}"
        if key not in self.runs:
            cfg = self.config(key, {}, seed)
            Path(cfg.out).mkdir()
            pipeline.run_simulate(cfg)
            t0 = time.perf_counter()
            pipeline.run_train(cfg)
            train_s = time.perf_counter() - t0
            pipeline.run_analyze(cfg)
            pipeline.run_report(cfg)
            doc = json.loads((cfg.stage_dir("analysis") / "report.json").read_text())
            self.runs[key] = {"cfg": cfg, "train_s": train_s, "report": doc}
        return self.runs[key]

    def noisy(self, seed):
        key = f"noise{seed}"
        if key not in self.runs:
            cfg = self.config(key, {"world": {"n_noise_genes": 200}}, seed)
            Path(cfg.out).mkdir()
            pipeline.run_simulate(cfg)
            pipeline.run_train(cfg)
            world, cells = pipeline._load_world_dir(cfg)
            model, _ = load_checkpoint(cfg.stage_dir("train") / "best.ckpt")
            val = [c for c in cells if c.split == "val"]
            self.runs[key] = {"eval": evaluate_metrics(model, val, world.dna_lookup())}
        return self.runs[key]


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return DeskRuns(tmp_path_factory.mktemp("acceptance"))


# ---------------------------------------------------------------------------
# 1-7: kernels and arithmetic
# ---------------------------------------------------------------------------

def _desk_fd(seed):
    """Worst relative error over all parameter tensors of the desk model:
    a random directional derivative per tensor plus two single entries."""
    cfg = ModelConfig()
    model = CDTModel(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    dna = rng.standard_normal((2, cfg.n_bins, cfg.dna_embed_dim))
    expr = np.abs(rng.standard_normal((2, cfg.n_genes))) * 3
    target = rng.standard_normal((2, cfg.n_genes)) * 0.3

    def loss():
        return float(mse(forward_batch(model, dna, expr)[0], Tensor(target)).data)

    with Tape() as tape:
        backward(mse(forward_batch(model, dna, expr)[0], Tensor(target)), tape)
    h, worst = 1e-5, 0.0
    for p in model.params.values():
        base = p.data.copy()
        v = rng.standard_normal(base.shape)
        probes = [v / np.linalg.norm(v)]
        for _ in range(2):
            e = np.zeros(base.size)
            e[rng.integers(base.size)] = 1.0
            probes.append(e.reshape(base.shape))
        for d in probes:
            p.data[...] = base + h * d
            up = loss()
            p.data[...] = base - h * d
            dn = loss()
            p.data[...] = base
            num = (up - dn) / (2 * h)
            ana = float(np.vdot(p.grad, d))
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return worst


def test_criterion_01_gradient_soundness():
    t0 = time.perf_counter()
    failures = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        for name, (f, shapes) in tt.OPS.items():
            xs = [Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes]
            try:
                tt.fd_check(f, xs, h=1e-5, wrt=tt.GRAD_ARGS.get(name))
            except AssertionError:
                failures.append(f"{name}/seed{seed}")
        for name, check in (("attention", tt.test_attention_gradients),
                            ("dropout", tt.test_dropout_gradient_with_fixed_mask)):
            try:
                check(seed)
            except AssertionError:
                failures.append(f"{name}/seed{seed}")
    worst = max(_desk_fd(seed) for seed in range(10))
    elapsed = time.perf_counter() - t0
    ok = not failures and worst < 1e-4 and elapsed < 120
    record(1, "gradient soundness", ok,
           f"{len(tt.OPS) + 2} ops x 10 seeds, {len(failures)} failures; desk forward worst rel err {worst:.2e}; "
           f"{elapsed:.0f} s")
    assert ok


def test_criterion_02_attention_normalization(desk):
    cfg = desk.full(0)["cfg"]
    world, cells = pipeline._load_world_dir(cfg)
    val = [c for c in cells if c.split == "val"][::25]
    fresh = CDTModel(cfg.model, seed=0)
    untrained = pipeline.attention_normalization(fresh, val, world.dna_lookup())
    trained_model, _ = load_checkpoint(cfg.stage_dir("train") / "best.ckpt")
    trained = pipeline.attention_normalization(trained_model, val, world.dna_lookup())
    per_seed = [desk.full(s)["report"]["attention_normalization"] for s in SEEDS]
    checks = [untrained, trained] + per_seed
    dev = max(c["max_row_sum_deviation"] for c in checks)
    lo = min(c["min_weight"] for c in checks)
    ok = all(c["passed"] for c in checks)
    record(2, "attention normalization", ok,
           f"untrained + trained ({len(SEEDS)} seeds), max |row sum - 1| {dev:.1e}, min weight {lo:.1e}")
    assert ok


def test_criterion_03_log2fc_exactness():
    world, _ = generate_world(WorldConfig(seed=0))
    res = pipeline.log2fc_exactness(world.ntc_mean)
    record(3, "log2FC exactness", res["passed"],
           f"max |log2FC(NTC mean)| = {res['max_abs_at_mean']}, log2FC(3 vs 1) = {res['x3_vs_1']}")
    assert res["passed"]


def _exact_sf(k, M, K, n):
    num = sum(math.comb(K, i) * math.comb(M - K, n - i) for i in range(k, min(K, n) + 1))
    return Fraction(num, math.comb(M, n))


def _exact_fisher(a, b, c, d):
    M, K, n = a + b + c + d, a + c, a + b
    lo, hi = max(0, n - (M - K)), min(K, n)
    pmf = {i: Fraction(math.comb(K, i) * math.comb(M - K, n - i), math.comb(M, n)) for i in range(lo, hi + 1)}
    cut = pmf[a] * (1 + Fraction(1, 10 ** 7))
    return sum(p for p in pmf.values() if p <= cut)


def test_criterion_04_stat_kernels():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_f = 0.0
    tables = 0
    while tables < 1000:
        cells = [int(x) for x in rng.integers(0, 31, size=4)]
        if not 0 < sum(cells) <= 60:
            continue
        exact = _exact_fisher(*cells)
        got = fisher_exact_haldane(ContingencyTable2x2(*cells)).p_value
        worst_f = max(worst_f, abs(got - float(exact)) / float(exact))
        tables += 1
    worst_h = 0.0
    for _ in range(40):
        M = int(rng.integers(2, 5001))
        K, n = (int(x) for x in rng.integers(1, M, size=2))
        lo, hi = max(0, n - (M - K)), min(K, n)
        k = int(rng.integers(lo, hi + 1))
        exact = float(_exact_sf(k, M, K, n))
        if exact > 0:
            worst_h = max(worst_h, abs(hypergeom_sf(k, M, K, n) - exact) / exact)
    p28 = hypergeom_sf(28, 2361, 100, 100)
    worst_h = max(worst_h, abs(p28 - float(_exact_sf(28, 2361, 100, 100))) / p28)
    fold = 28 / (100 * 100 / 2361)
    k, fold2, p2 = convergence_overlap(range(165), range(33, 33 + 679), 2361)
    expected = 165 * 679 / 2361
    elapsed = time.perf_counter() - t0
    ok = (worst_f <= 1e-10 and worst_h <= 1e-10 and round(fold, 2) == 6.61 and k == 132
          and round(expected, 1) == 47.5 and round(fold2, 1) == 2.8 and elapsed < 120)
    record(4, "stat-kernel oracle equivalence", ok,
           f"Fisher worst rel err {worst_f:.1e} over 1000 tables; hypergeom worst {worst_h:.1e}; "
           f"fold {fold:.4f}; expected {expected:.2f}, fold {fold2:.4f}, P {p2:.1e}; {elapsed:.0f} s")
    assert ok


def test_criterion_05_top_bins():
    k = select_top_bins(np.random.default_rng(0).random(896), 0.10).size
    res = pipeline.top_bin_count()
    ok = k == 89 and res["passed"]
    record(5, "top-bin arithmetic", ok, f"{k} of 896 bins at fraction 0.10")
    assert ok


def test_criterion_06_louvain_planted_partition():
    res = [pipeline.planted_partition_check(seed) for seed in range(5)]
    ok = all(r["passed"] for r in res)
    record(6, "Louvain planted partition", ok,
           f"exact 2-community recovery on {sum(r['exact'] for r in res)}/5 seeds, "
           f"modularity {min(r['modularity'] for r in res):.4f}, deterministic {all(r['deterministic'] for r in res)}")
    assert ok


def test_criterion_07_circular_permutation_calibration():
    B, fraction = 896, 0.10
    k = int(math.floor(fraction * B))
    ps = []
    shift0 = True
    for w in range(200):
        rng = np.random.default_rng([7, w])
        att = rng.random(B)
        peaks = rng.random(B) < 0.10
        p, observed, _ = circular_permutation_test(att, peaks, fraction, 1000, seed=w)
        shift0 &= _overlap(np.roll(att, 0), peaks, k) == observed
        ps.append(p)
    ks = ss.kstest(ps, "uniform").pvalue
    ok = ks > 0.01 and shift0
    record(7, "circular permutation calibration", ok,
           f"KS p {ks:.3f} over 200 worlds ({B} bins, 1000 shifts); shift-0 identity {shift0}")
    assert ok


# ---------------------------------------------------------------------------
# 8-13: end to end
# ---------------------------------------------------------------------------

def test_criterion_08_network_recovery(desk):
    rows = [(desk.full(s)["report"]["network_recovery"], desk.full(s)["train_s"]) for s in SEEDS]
    wins = sum(r["passed"] and t < TRAIN_BUDGET_S for r, t in rows)
    detail = "; ".join(f"seed {s}: k={r['overlap']} fold {r['fold']:.2f} p {r['p']:.1e} ({t:.0f} s)"
                       for s, (r, t) in zip(SEEDS, rows))
    epochs = desk.full(0)["cfg"].train.max_epochs
    ok = wins >= len(SEEDS) - 1
    record(8, "end-to-end network recovery", ok, f"{wins}/{len(SEEDS)} seeds pass ({epochs} epochs); {detail}")
    assert ok


def test_criterion_09_element_recovery(desk):
    rows = [desk.full(s)["report"]["element_recovery"] for s in SEEDS]
    wins = sum(r["passed"] for r in rows)
    detail = "; ".join(
        f"seed {s}: {r['n_passed']}/{r['n_testable']} combos, d "
        + ",".join(f"{c[:4]}={d:.2f}" for c, d in sorted(r["classes"]["cohens_d"].items()) if d is not None)
        + f", KW p {r['classes']['kruskal_p']:.1e}"
        for s, r in zip(SEEDS, rows))
    ok = wins >= len(SEEDS) - 1
    record(9, "end-to-end regulatory-element recovery", ok, f"{wins}/{len(SEEDS)} seeds pass; {detail}")
    assert ok


def test_criterion_10_ablation_direction(desk):
    drops = []
    for s in ABLATION_SEEDS:
        curated = desk.full(s)["report"]["evaluation"]["mean_pseudobulk_r"]
        noisy = desk.noisy(s)["eval"].mean_pseudobulk_r
        drops.append((curated, noisy, curated - noisy))
    mean_drop = float(np.mean([d for _, _, d in drops]))
    ok = mean_drop >= 0.05
    detail = "; ".join(f"seed {s}: {c:.3f} -> {n:.3f}" for s, (c, n, _) in zip(ABLATION_SEEDS, drops))
    record(10, "ablation direction", ok, f"mean pseudo-bulk r drop {mean_drop:.3f}; {detail}")
    assert ok


def test_criterion_11_attribution_sanity(desk):
    rows = [desk.full(s)["report"]["attribution"] for s in SEEDS]
    wins = sum(r["passed"] for r in rows)
    detail = "; ".join(f"seed {s}: r {r['r']:.3f}, {r['ratio']:.1f}x null" for s, r in zip(SEEDS, rows))
    ok = wins >= len(SEEDS) - 1
    record(11, "attribution sanity", ok, f"{wins}/{len(SEEDS)} seeds pass; {detail}")
    assert ok


def test_criterion_12_convergent_modules(desk):
    rows = [desk.full(s)["report"]["communities"] for s in SEEDS]
    wins = sum(r["passed"] for r in rows)
    detail = "; ".join(
        f"seed {s}: q {r['hits']['rna_self']['q']:.1e}/{r['hits']['cross_similarity']['q']:.1e}, "
        f"overlap {r['overlap']['overlap']} fold {r['overlap']['fold']:.2f} p {r['overlap']['p']:.1e}"
        for s, r in zip(SEEDS, rows))
    ok = wins >= len(SEEDS) - 1
    record(12, "convergent-module analog", ok, f"{wins}/{len(SEEDS)} seeds pass; {detail}")
    assert ok


def test_criterion_13_determinism(desk):
    first = Path(desk.full(0)["cfg"].out)
    second = Path(desk.full(0, name="seed0_rerun")["cfg"].out)
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    other = sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())
    differ = [str(r) for r in files if (first / r).read_bytes() != (second / r).read_bytes()]
    ok = files == other and not differ
    record(13, "determinism", ok, f"{len(files)} files compared across two full runs; differing: {differ or 'none'}")
    assert ok
