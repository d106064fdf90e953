import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drdl.autodiff import ShapeError, Tensor
from drdl.data import Domain, LabelSpaces
from drdl.diagnostics import random_batch
from drdl.losses import (
    LOSS_GROUPS,
    LOSSES,
    LossWeights,
    ce,
    ce_uniform,
    loss_adv1,
    loss_adv2,
    loss_e1,
    loss_e2,
    loss_id,
    loss_un_id,
    total_objective,
    weighted_total,
)
from drdl.model import GROUPS, DrdlModel, ModelConfig

LS = LabelSpaces(8, 6, 8)  # 8 source ids, camera head width 15


def np_ce(logits, targets):
    logits = np.atleast_2d(logits)
    out = []
    for z, t in zip(logits, np.atleast_1d(targets)):
        m = z.max()
        out.append(-(z[t] - m - math.log(sum(math.exp(v - m) for v in z))))
    return sum(out) / len(out)


def np_ce_uniform(logits):
    logits = np.atleast_2d(logits)
    return float(np.mean([np.mean([np_ce(z, k) for k in range(len(z))]) for z in logits]))


def zero_heads(ls=LS, seed=0):
    return DrdlModel(ls, ModelConfig(seed=seed), zero_init_heads=True, dtype=np.float64)


# ------------------------------------------------------------- primitives


def test_ce_values():
    assert float(ce([0.0, 0.0], 0).data) == pytest.approx(math.log(2), abs=1e-15)
    assert float(ce([10.0, -10.0], 0).data) == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
    a = float(ce([1.0, 2.0, 0.5], 2).data)
    b = float(ce([0.3, -1.0, 2.0], 0).data)
    both = float(ce(np.array([[1.0, 2.0, 0.5], [0.3, -1.0, 2.0]]), [2, 0]).data)
    assert both == pytest.approx((a + b) / 2, abs=1e-15)


def test_ce_rejects_bad_index():
    with pytest.raises(IndexError):
        ce([0.0, 0.0], 2)


def test_ce_uniform_values():
    assert float(ce_uniform(np.zeros(4), 4).data) == pytest.approx(math.log(4), abs=1e-9)
    assert float(ce_uniform([1.0, 0.0], 2).data) == pytest.approx(0.813262, abs=1e-6)
    with pytest.raises(ShapeError):
        ce_uniform(np.zeros(3), 4)


def test_ce_uniform_descends_to_log_m():
    z = Tensor(np.array([[3.0, -1.0, 0.5, 2.0, -2.0]]), requires_grad=True)
    for _ in range(500):
        z.grad = None
        loss = ce_uniform(z, 5)
        loss.backward()
        z.data -= 5.0 * z.grad
    assert float(ce_uniform(z, 5).data) - math.log(5) < 1e-4
    assert np.ptp(z.data) < 1e-2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=7))
def test_ce_uniform_lower_bound(logits):
    m = len(logits)
    val = float(ce_uniform(logits, m).data)
    assert val >= math.log(m) - 1e-12
    assert val == pytest.approx(np_ce_uniform(np.array(logits)), rel=1e-9, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(-20, 20, allow_nan=False), st.integers(2, 9))
def test_ce_uniform_equality_on_constant_logits(c, m):
    assert float(ce_uniform(np.full(m, c), m).data) == pytest.approx(math.log(m), abs=1e-12)


# ------------------------------------------------------- uniform heads


@pytest.mark.parametrize(
    "name,expected",
    [
        ("L_id", 3 * math.log(8)),
        ("L_un_id", 2 * math.log(15)),
        ("L_e1", 2 * math.log(15) + math.log(8)),
        ("L_e2", 2 * math.log(15) + math.log(8)),
        ("L_adv1", 4 * math.log(15)),
        ("L_adv2", 2 * math.log(8)),
    ],
)
def test_losses_on_uniform_heads(name, expected):
    m = zero_heads()
    m.set_phase(LOSS_GROUPS[name])
    val = float(LOSSES[name](m, random_batch(LS, seed=1)).data)
    assert val == pytest.approx(expected, abs=1e-9)


def test_un_id_on_width_four_head():
    ls = LabelSpaces(5, 2, 1)
    m = zero_heads(ls)
    m.set_phase(("e2", "w2"))
    assert float(loss_un_id(m, random_batch(ls, seed=0)).data) == pytest.approx(2 * math.log(4), abs=1e-12)


def test_target_camera_target_index_uses_offset():
    assert LabelSpaces(4, 3, 2).global_camera(1, Domain.TARGET) == 3


# ------------------------------------------------------------ CE limits


def _confident(m, id_class=None, cam_class=None, big=40.0):
    if id_class is not None:
        m.w1.fc.weight.data[...] = 0.0
        m.w1.fc.bias.data[...] = 0.0
        m.w1.fc.bias.data[id_class] = big
    if cam_class is not None:
        m.w2.fc.weight.data[...] = 0.0
        m.w2.fc.bias.data[...] = 0.0
        m.w2.fc.bias.data[cam_class] = big


def _one_id_batch(seed=0):
    b = random_batch(LS, seed=seed)
    b.ys[...] = 2
    return b


def test_perfect_heads_drive_losses_to_zero():
    m = zero_heads()
    _confident(m, id_class=2, cam_class=LS.extra_camera_class)
    b = _one_id_batch()
    m.eval()
    assert float(loss_id(m, b).data) < 1e-3
    assert float(loss_e1(m, b).data) < 1e-3
    assert float(loss_adv2(m, b).data) < 1e-3


def test_uniform_identity_term_is_the_floor_of_loss_e2():
    m = zero_heads()
    m.eval()
    b = random_batch(LS, seed=2)
    cam = float(loss_un_id(m, b).data)
    assert float(loss_e2(m, b).data) == pytest.approx(cam + math.log(8), abs=1e-12)


# ---------------------------------------------------- composition oracles


def _eval_parts(m, b):
    """Features and head outputs in eval mode, assembled outside the loss module."""
    m.eval()
    xs, xt = b.xs, b.xt
    cs_, ct_ = m.forward_content(xs), m.forward_content(xt)
    ss, stt = m.forward_style(xs).data, m.forward_style(xt).data
    w1 = lambda f: m.classify_id(Tensor(f)).data  # noqa: E731
    w2 = lambda f: m.classify_cam(Tensor(f)).data  # noqa: E731
    return cs_, ct_, ss, stt, w1, w2


def test_all_losses_match_composition_oracle():
    m = DrdlModel(LS, ModelConfig(seed=4), dtype=np.float64)
    b = random_batch(LS, seed=3)
    cs_, ct_, ss, stt, w1, w2 = _eval_parts(m, b)
    extra = LS.extra_camera_class
    ns, nt = len(b.ys), len(b.ct)
    expected = {
        "L_id": sum(np_ce(w1(f.data), b.ys) for f in (cs_.gap, cs_.gmp, cs_.fused)),
        "L_un_id": np_ce(w2(ss), b.cs) + np_ce(w2(stt), b.ct),
        "L_e1": np_ce(w2(cs_.fused.data), [extra] * ns) + np_ce(w2(ct_.fused.data), [extra] * nt)
        + np_ce(w1(cs_.fused.data), b.ys),
        "L_e2": np_ce(w2(ss), b.cs) + np_ce(w2(stt), b.ct) + np_ce_uniform(w1(ss)),
        "L_adv1": np_ce(w2(ss), b.cs) + np_ce(w2(stt), b.ct) + np_ce(w2(cs_.fused.data), b.cs)
        + np_ce(w2(ct_.fused.data), b.ct),
        "L_adv2": np_ce(w1(cs_.fused.data), b.ys) + np_ce(w1(ss), b.ys),
    }
    for name, fn in LOSSES.items():
        m.eval()
        assert float(fn(m, b).data) == pytest.approx(expected[name], rel=1e-10), name


def test_train_mode_shares_batch_statistics_across_domains():
    m = DrdlModel(LS, ModelConfig(seed=4), dtype=np.float64)
    b = random_batch(LS, seed=3)
    m.set_phase(("e2", "w2"))
    saved = m.state_dict()
    got = float(loss_un_id(m, b).data)
    m.load_state_dict(saved)
    logits = m.classify_cam(m.forward_style(np.concatenate([b.xs, b.xt]))).data
    ns = len(b.ys)
    assert got == pytest.approx(np_ce(logits[:ns], b.cs) + np_ce(logits[ns:], b.ct), rel=1e-10)


# ------------------------------------------------------------ freezing


@pytest.mark.parametrize("name", list(LOSSES))
def test_frozen_groups_get_exactly_zero_gradient(name):
    m = DrdlModel(LS, ModelConfig(seed=1), dtype=np.float64)
    active = LOSS_GROUPS[name]
    m.set_phase(active)
    m.zero_grad()
    LOSSES[name](m, random_batch(LS, seed=5)).backward()
    for g in GROUPS:
        grads = [p.grad for p in m.groups()[g].parameters()]
        if g in active:
            assert any(np.any(gr) for gr in grads), g
        else:
            assert all(not np.any(gr) for gr in grads), g


def test_classifier_losses_detach_encoders_even_when_trainable():
    m = DrdlModel(LS, ModelConfig(seed=1), dtype=np.float64)
    m.set_phase(GROUPS)
    m.zero_grad()
    loss_adv1(m, random_batch(LS)).backward()
    loss_adv2(m, random_batch(LS)).backward()
    for g in ("e1", "e2"):
        assert all(not np.any(p.grad) for p in m.groups()[g].parameters())


# ----------------------------------------------------------- objective


def test_total_objective_weighting():
    m = DrdlModel(LS, ModelConfig(seed=2), dtype=np.float64)
    b = random_batch(LS, seed=6)
    before = m.state_dict()
    zero, comps = total_objective(m, b, LossWeights.zeros())
    assert zero == pytest.approx(comps["L_id"] + comps["L_un_id"], rel=1e-15)
    ones, _ = total_objective(m, b, LossWeights(1, 1, 1, 1))
    assert ones == pytest.approx(sum(comps.values()), rel=1e-12)
    dflt, _ = total_objective(m, b, LossWeights())
    oracle = comps["L_id"] + comps["L_un_id"] + 0.01 * comps["L_e1"] + 1.0 * comps["L_adv1"]
    oracle += 0.01 * comps["L_e2"] + 0.01 * comps["L_adv2"]
    assert dflt == pytest.approx(oracle, rel=1e-12)
    assert weighted_total(comps, LossWeights()) == dflt
    for k, v in m.state_dict().items():
        assert v.tobytes() == before[k].tobytes(), k


def test_loss_weights_validation():
    assert LossWeights() == LossWeights(0.01, 1.0, 0.01, 0.01)
    with pytest.raises(ValueError):
        LossWeights(alpha=-0.1)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5), st.integers(1, 5))
def test_losses_are_finite_and_non_negative(seed, ns, nt):
    m = DrdlModel(LS, ModelConfig(seed=seed % 7), dtype=np.float64)
    b = random_batch(LS, n_source=ns, n_target=nt, seed=seed)
    for name, fn in LOSSES.items():
        m.set_phase(LOSS_GROUPS[name])
        v = float(fn(m, b).data)
        assert np.isfinite(v) and v >= 0.0
