import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from regmix import losses, nn
from regmix import tensor as T
from regmix.losses import ProbDist, RegMixConfig

from conftest import central_diff, rel_err


def _kl_oracle(pred, target):
    """KL(target || pred) at 50 digits."""
    mpmath.mp.dps = 50
    return float(sum(mpmath.mpf(t) * (mpmath.log(mpmath.mpf(t)) - mpmath.log(mpmath.mpf(p)))
                     for p, t in zip(pred, target) if t > 0))


def _random_dists(rng, n, c):
    p = rng.random((n, c)) + 1e-3
    return p / p.sum(axis=1, keepdims=True)


def test_cross_entropy_uniform_and_confident():
    assert losses.cross_entropy(np.zeros((3, 2)), [0, 1, 1]).item() == pytest.approx(np.log(2), abs=1e-15)
    assert losses.cross_entropy([[1000.0, 0.0]], [0]).item() == pytest.approx(0.0, abs=1e-300)


def test_cross_entropy_against_high_precision(rng):
    logits = rng.normal(scale=3, size=(6, 5))
    y = rng.integers(0, 5, size=6)
    mpmath.mp.dps = 50
    ref = 0
    for row, lab in zip(logits, y):
        z = sum(mpmath.exp(mpmath.mpf(v)) for v in row)
        ref += -(mpmath.mpf(row[lab]) - mpmath.log(z))
    assert losses.cross_entropy(logits, y).item() == pytest.approx(float(ref / 6), rel=1e-13)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError, match="labels"):
        losses.cross_entropy(np.zeros((2, 3)), [0, 3])


def test_kl_hand_value():
    expected = 0.5 * np.log(0.5 / 0.25) + 0.5 * np.log(0.5 / 0.75)
    assert _kl_oracle([0.25, 0.75], [0.5, 0.5]) == pytest.approx(expected, abs=1e-15)
    assert losses.kl_div([0.25, 0.75], [0.5, 0.5]).item() == pytest.approx(0.143841, abs=1e-6)
    assert losses.kl_div([0.25, 0.75], [0.5, 0.5]).item() == pytest.approx(expected, abs=1e-15)


def test_kl_self_is_exactly_zero(rng):
    for _ in range(100):
        p = _random_dists(rng, 1, int(rng.integers(2, 12)))
        assert losses.kl_div(p, p).item() == 0.0


def test_kl_nonnegative_on_many_pairs(rng):
    p, q = _random_dists(rng, 10_000, 5), _random_dists(rng, 10_000, 5)
    per_row = np.sum(q * (np.log(q) - np.log(p)), axis=1)
    assert per_row.min() >= 0
    assert losses.kl_div(p, q).item() >= 0


def test_kl_asymmetry_witness():
    a, b = [0.9, 0.1], [0.5, 0.5]
    fwd, rev = losses.kl_div(a, b).item(), losses.kl_div(b, a).item()
    assert fwd == pytest.approx(_kl_oracle(a, b), rel=1e-13)
    assert rev == pytest.approx(_kl_oracle(b, a), rel=1e-13)
    assert abs(fwd - rev) > 1e-3


def test_kl_rejects_unnormalized():
    with pytest.raises(ValueError, match="normalized"):
        losses.kl_div([0.3, 0.3], [0.5, 0.5])


def test_kl_gradient_flows_to_both_arguments(rng):
    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    T.backward(losses.kl_div(ProbDist.from_logits(a), ProbDist.from_logits(b)))
    assert np.abs(a.grad).sum() > 0 and np.abs(b.grad).sum() > 0


def test_l2_reg_values():
    assert losses.l2_reg([[1.0, 0.0]], [[0.0, 1.0]]).item() == 2.0
    assert losses.l2_reg([[1.0, 2.0]], [[1.0, 2.0]]).item() == 0.0
    with pytest.raises(T.ShapeError):
        losses.l2_reg(np.zeros((2, 3)), np.zeros((2, 2)))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-20, 20)),
       hnp.arrays(np.float64, (3, 4), elements=st.floats(-20, 20)))
def test_l2_reg_symmetric_nonnegative(a, b):
    assert losses.l2_reg(a, b).item() == losses.l2_reg(b, a).item() >= 0


def test_amr_reductions(rng):
    f, i = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    assert losses.amr_loss(f, f, 3.0, 7.0).item() == 0.0
    base = losses.kl_div(ProbDist.from_logits(f), ProbDist.from_logits(i)).item()
    assert losses.amr_loss(f, i, 2.5, 0.0).item() == 2.5 * base
    assert losses.amr_loss(f, i, 1, 1).item() == pytest.approx(losses.amr_loss(i, f, 1, 1).item(), rel=1e-15)
    assert losses.amr_loss(f, i, 2 * 50, 2 * 20).item() == 2 * losses.amr_loss(f, i, 50, 20).item()


def test_agr_reductions(rng):
    f, i, c = (rng.normal(size=(5, 4)) for _ in range(3))
    assert losses.agr_loss(f, i, c, 50, 20, 0.0).item() == losses.amr_loss(f, i, 50, 20).item()
    assert losses.agr_loss(f, f, f, 50, 20, 20).item() == 0.0
    cfg = RegMixConfig("agr", alpha=50, beta=20, gamma=20)
    assert cfg.regularizer(f, i, c).item() > 0


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        losses.amr_loss(np.zeros((1, 2)), np.zeros((1, 2)), -1, 0)
    with pytest.raises(ValueError):
        RegMixConfig("amr", gamma=-1)
    with pytest.raises(ValueError):
        RegMixConfig("trades")


def test_symmetric_kl_is_locally_chi_square(rng):
    p = _random_dists(rng, 1, 6)[0]
    u = rng.normal(size=6)
    u -= u.mean()
    errs = []
    for eps in (1e-2, 5e-3, 2.5e-3):
        q = p + eps * u
        sym = losses.amr_loss(np.log(q)[None], np.log(p)[None], 1.0, 1.0).item()
        chi2 = float(np.sum((eps * u) ** 2 / p))
        errs.append(abs(sym - chi2))
    for big, small in zip(errs, errs[1:]):
        assert 6.0 < big / small < 10.0  # cubic decay: ratio ~ 8


def test_gradients_finite_near_one_hot():
    spec = nn.ModelSpec("mlp", (3,), 4)
    m = nn.init_model(spec, 0)
    m.params *= 400.0  # saturating logits
    x = np.random.default_rng(0).random((6, 3))
    pt = T.Tensor(m.params.copy(), requires_grad=True)
    out = [nn.forward(m, x + d, params=pt) for d in (0.05, -0.05, 0.0)]
    probs = np.exp(T.log_softmax(out[0], 1).data)
    assert probs.max() > 1 - 1e-12
    T.backward(losses.agr_loss(*out, 50, 20, 20))
    assert np.all(np.isfinite(pt.grad)) and np.abs(pt.grad).sum() > 0


@pytest.mark.parametrize("mode", ["l2", "amr", "agr"])
def test_total_loss_gradient_matches_finite_differences(mode, rng):
    spec = nn.ModelSpec("mlp", (2,), 2, hidden=(8,))
    assert spec.n_params == 42
    m = nn.init_model(spec, 11)
    x = rng.random((6, 2)) * 0.8 + 0.1
    y = rng.integers(0, 2, size=6)
    d_init = rng.uniform(-0.05, 0.05, size=x.shape)
    d_final = rng.uniform(-0.05, 0.05, size=x.shape)
    cfg = RegMixConfig(mode, alpha=5.0, beta=2.0, gamma=2.0, lam=1.0)

    def f(v):
        return losses.total_loss(m, x, y, d_init, d_final, cfg, params=T.Tensor(v)).item()

    pt = T.Tensor(m.params.copy(), requires_grad=True)
    T.backward(losses.total_loss(m, x, y, d_init, d_final, cfg, params=pt))
    assert rel_err(pt.grad, central_diff(f, m.params)) < 1e-4


def test_total_loss_lambda_zero_is_adversarial_ce(rng):
    spec = nn.ModelSpec("mlp", (2,), 2, hidden=(8,))
    m = nn.init_model(spec, 0)
    x, y = rng.random((4, 2)), np.array([0, 1, 1, 0])
    d = rng.uniform(-0.01, 0.01, size=x.shape)
    terms = {}
    val = losses.total_loss(m, x, y, np.zeros_like(x), d, RegMixConfig("agr", lam=0.0), terms=terms).item()
    assert val == losses.cross_entropy(nn.forward(m, x + d), y).item()
    assert terms["reg"] == 0.0


def test_total_loss_l2_mode_is_ce_plus_l2(rng):
    spec = nn.ModelSpec("mlp", (2,), 2, hidden=(8,))
    m = nn.init_model(spec, 0)
    x, y = rng.random((4, 2)), np.array([0, 1, 1, 0])
    di, df = rng.uniform(-0.01, 0.01, size=x.shape), rng.uniform(-0.01, 0.01, size=x.shape)
    got = losses.total_loss(m, x, y, di, df, RegMixConfig("l2", lam=1.0)).item()
    out_f, out_i = nn.forward(m, x + df), nn.forward(m, x + di)
    want = losses.cross_entropy(out_f, y).item() + losses.l2_reg(out_f, out_i).item()
    assert got == pytest.approx(want, rel=1e-15)
