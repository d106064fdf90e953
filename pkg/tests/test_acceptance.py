"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary.
The end-to-end suite trains six 60-epoch models and takes several minutes.
"""
import hashlib
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from test_evaluation import brute_force, random_instance
from test_reconduct import grid_ds, multiset

from drdl.cli import main
from drdl.data import LabelSpaces, concat_datasets
from drdl.diagnostics import check_all, random_batch
from drdl.evaluation import average_precision, cmc, distance_matrix, evaluate, mean_ap, rank_gallery
from drdl.losses import LOSS_GROUPS, LossWeights, ce_uniform, loss_e1
from drdl.model import GROUPS, DrdlModel, ModelConfig
from drdl.probe import camera_probe
from drdl.reconduct import CameraGraph, ReconductConfig, reconduct
from drdl.synth import SynthConfig, generate
from drdl.trainer import Optimizers, TrainConfig, adversarial_step, train

SEEDS = (0, 1, 2)


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# ------------------------------------------------------------- 1


def test_gradient_correctness():
    t0 = time.perf_counter()
    double = check_all(double=True)
    single = check_all(double=False)
    elapsed = time.perf_counter() - t0
    for c in double + single:
        print(c.line())
    worst_d = max(c.report.max_rel_error for c in double)
    worst_s = max(c.report.max_rel_error for c in single)
    ok = all(c.passed for c in double) and all(c.passed for c in single)
    ok = ok and worst_d < 1e-6 and worst_s < 1e-4 and elapsed < 60
    assert record(
        "1 gradient correctness",
        ok,
        f"double max rel {worst_d:.2e} (< 1e-6), single {worst_s:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)",
    )


# ------------------------------------------------------------- 2


def _group_hashes(model):
    out = {}
    for g, mod in model.groups().items():
        h = hashlib.sha256()
        for n, p in mod.named_parameters():
            h.update(n.encode() + p.data.tobytes())
        for n, b in mod.named_buffers():
            h.update(n.encode() + b.tobytes())
        out[g] = h.hexdigest()
    return out


class HashTrace(list):
    """Trace sink that diffs group hashes around every optimiser sub-step."""

    def __init__(self, model):
        super().__init__()
        self.model = model
        self.last = _group_hashes(model)
        self.violations = []

    def append(self, group):
        super().append(group)
        now = _group_hashes(self.model)
        changed = [g for g in GROUPS if now[g] != self.last[g]]
        if changed != [group]:
            self.violations.append((group, changed))
        self.last = now


def test_freeze_contracts():
    ls = LabelSpaces(32, 3, 3)
    rng = np.random.default_rng(2024)
    model = DrdlModel(ls, ModelConfig(seed=5))
    opts = Optimizers.build(model, TrainConfig())
    passed = 0
    for step in range(50):
        b = random_batch(ls, n_source=int(rng.integers(2, 17)), n_target=int(rng.integers(1, 17)), seed=step)
        trace = HashTrace(model)
        adversarial_step(model, b, opts, LossWeights(), trace=trace)
        passed += trace == ["w2", "e1", "w1", "e2"] and not trace.violations
    assert record("2 freeze contracts", passed == 50, f"{passed}/50 random steps, 4 sub-steps each")


# ------------------------------------------------------------- 3


def test_metric_oracle_equivalence():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(200):
        qf, gf, qp, gp, qc, gc = random_instance(rng)
        dist = distance_matrix(qf, gf)
        ranks = rank_gallery(dist, qp, gp, qc, gc)
        curve, m_ap = brute_force(dist.tolist(), qp.tolist(), gp.tolist(), qc.tolist(), gc.tolist())
        worst = max(worst, float(np.max(np.abs(cmc(ranks, len(gp)) - curve))), abs(mean_ap(ranks) - m_ap))
    ap = average_precision(np.array([True, False, True, False]))
    ok = worst <= 1e-12 and abs(ap - 0.833333) < 1e-6
    assert record("3 metric oracle equivalence", ok, f"200 instances, max diff {worst:.1e}; hand AP {ap:.6f}")


# ------------------------------------------------------------- 4


def test_loss_value_spot_checks():
    a = float(ce_uniform(np.zeros(4), 4).data)
    ls = LabelSpaces(32, 3, 3)
    m = DrdlModel(ls, ModelConfig(), zero_init_heads=True, dtype=np.float64)
    m.set_phase(LOSS_GROUPS["L_e1"])
    b = float(loss_e1(m, random_batch(ls)).data)
    expected = 2 * np.log(3 + 3 + 1) + np.log(32)
    ok = abs(a - np.log(4)) <= 1e-9 and abs(b - expected) <= 1e-9
    assert record(
        "4 loss spot checks", ok, f"ce_uniform {a:.12f} vs ln4; loss_e1 {b:.12f} vs {expected:.12f}"
    )


# ------------------------------------------------------------- 5


def _run(domains, seed, weights):
    src, tgt = domains
    s = src.splits["train"]
    m = DrdlModel(s.label_spaces, ModelConfig(image_shape=s.shape, seed=seed))
    return train(m, s, tgt.splits["train"], TrainConfig(seed=seed, weights=weights)).model


@pytest.fixture(scope="module")
def e2e():
    out = {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        domains = generate(SynthConfig(seed=seed))
        tgt = domains[1]
        q, g = tgt.splits["query"], tgt.splits["gallery"]
        full = _run(domains, seed, LossWeights())
        base = _run(domains, seed, LossWeights.zeros())
        held_out = concat_datasets([q, g])
        out[seed] = dict(
            full=evaluate(full, q, g, "fused"),
            base=evaluate(base, q, g, "fused"),
            style=evaluate(full, q, g, "style"),
            probe_content=camera_probe(full, tgt.splits["train"], held_out, "fused", seed),
            probe_style=camera_probe(full, tgt.splits["train"], held_out, "style", seed),
            seconds=(time.perf_counter() - t0) / 2,
        )
    return out


def test_e2e_content_retrieval(e2e):
    parts, ok = [], True
    for s, r in e2e.items():
        f, b = r["full"].rank1, r["base"].rank1
        ok &= f >= 0.60 and f - b >= 0.05
        parts.append(f"seed {s}: {f:.3f} vs baseline {b:.3f} ({f - b:+.3f}), {r['seconds']:.0f}s/run")
    ok &= all(r["seconds"] < 300 for r in e2e.values())
    assert record("5a content rank-1 >= 0.60 and >= baseline + 0.05", ok, "; ".join(parts))


def test_e2e_style_retrieval_near_chance(e2e):
    parts, ok = [], True
    for s, r in e2e.items():
        st = r["style"]
        ok &= st.rank1 <= st.chance + 0.10
        parts.append(f"seed {s}: {st.rank1:.3f} vs chance {st.chance:.3f}")
    assert record("5b style rank-1 <= chance + 0.10", ok, "; ".join(parts))


def test_e2e_camera_probes(e2e):
    parts, ok = [], True
    for s, r in e2e.items():
        c, st = r["probe_content"], r["probe_style"]
        ok &= c.accuracy <= c.chance + 0.15 and st.accuracy >= 0.80
        parts.append(f"seed {s}: content {c.accuracy:.3f} (chance {c.chance:.3f}), style {st.accuracy:.3f}")
    assert record("5c content probe <= chance + 0.15, style probe >= 0.80", ok, "; ".join(parts))


# ------------------------------------------------------------- 6


def test_reconduction_properties():
    g = CameraGraph.line(3)
    _, st0 = reconduct(grid_ds(40, 3), ReconductConfig(g, 0.0, 1))
    ds = grid_ds(100, 3, home_bonus=lambda p: 1)
    freqs = {e: [] for e in sorted(g.edges)}
    sub = True
    for seed in range(30):
        out, st = reconduct(ds, ReconductConfig(g, 0.3, seed))
        sub &= not multiset(out) - multiset(ds)
        for e in freqs:
            freqs[e].append(st.retention_frequency(e))
    dev = max(abs(np.mean(f) - 0.3) for f in freqs.values())
    ok = st0.single_camera_fraction == 1.0 and dev <= 0.1 and sub
    assert record(
        "6 re-conduction properties",
        ok,
        f"p=0 single fraction {st0.single_camera_fraction}; max |freq - p| {dev:.3f}; sub-multiset {sub}",
    )


# ------------------------------------------------------------- 7


def test_determinism(tmp_path, bench_dir):
    def args(out, *extra):
        return ["train", "--source", str(bench_dir / "source"), "--target", str(bench_dir / "target"),
                "--out", str(out), "--epochs", "4", "--iter-pre", "2", "--warmup", "2", "--seed", "3", *extra]

    codes = [main(args(tmp_path / "a")), main(args(tmp_path / "b"))]
    same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    codes.append(main(args(tmp_path / "c", "--stop-after", "3")))
    codes.append(main(args(tmp_path / "c", "--resume", str(tmp_path / "c" / "checkpoint_e003.ckpt"))))
    resumed = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "c" / "metrics.csv").read_bytes()
    resumed &= (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "c" / "final.ckpt").read_bytes()
    ok = codes == [0, 0, 0, 0] and same and resumed
    assert record("7 determinism", ok, f"identical metrics CSVs {same}; resume equals uninterrupted {resumed}")
