import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hetpfl.errors import ContractError
from hetpfl.gradcheck import compare
from hetpfl.objectives import ce_loss, fair_loss, tch_loss
from hetpfl.tensor import GradientTape, Tensor, backward, sigmoid
from hetpfl.toy import alignment_study, angle_to, front_point, solve

probs = st.floats(0.01, 0.99)
lams = st.floats(1e-3, 1 - 1e-3)


def test_ce_examples():
    assert float(ce_loss([0.5], [1]).data) == pytest.approx(np.log(2), abs=1e-12)
    assert float(ce_loss([1.0, 0.0], [1, 0]).data) == pytest.approx(0.0, abs=1e-11)
    assert float(ce_loss([0.9, 0.1], [1, 0]).data) == pytest.approx(-np.log(0.9), abs=1e-12)


def test_ce_floor_keeps_wrong_certain_predictions_finite():
    assert float(ce_loss([0.0], [1]).data) == pytest.approx(-np.log(1e-12))


def test_ce_empty_batch():
    with pytest.raises(ContractError):
        ce_loss(np.zeros(0), np.zeros(0))


def test_fair_examples():
    assert float(fair_loss([0.3, 0.3, 0.3], [0, 1, 1]).data) == pytest.approx(0.0, abs=1e-15)
    assert float(fair_loss([0.0, 1.0], [0, 1]).data) == pytest.approx(0.25)
    assert float(fair_loss([1.0, 0.0], [0, 1]).data) == pytest.approx(0.25)


def test_fair_single_group():
    with pytest.raises(ContractError):
        fair_loss([0.2, 0.4], [1, 1])


def test_tch_examples():
    assert float(tch_loss(0.3, 0.6, (0.5, 0.5)).data) == pytest.approx(1.2)
    assert float(tch_loss(0.2, 0.2, (0.8, 0.2)).data) == pytest.approx(1.0)


def test_tch_tie_goes_to_ce_branch():
    ce, fair = Tensor(0.4, requires_grad=True), Tensor(0.4, requires_grad=True)
    with GradientTape() as tape:
        out = tch_loss(ce, fair, (0.5, 0.5))
    g = backward(out, tape, [ce, fair])
    assert float(out.data) == pytest.approx(0.8)
    assert float(g[ce].data) == 2.0 and float(g[fair].data) == 0.0


def test_tch_rejects_small_preference():
    with pytest.raises(ContractError):
        tch_loss(0.1, 0.1, (0.0005, 0.9995))


@given(ce=st.floats(0, 5), fair=st.floats(0, 1), l1=lams)
def test_tch_is_max_of_ratios(ce, fair, l1):
    lam = (l1, 1 - l1)
    t = float(tch_loss(ce, fair, lam).data)
    ratios = (ce / lam[0], fair / lam[1])
    assert t >= max(ratios) - 1e-12 and min(abs(t - r) for r in ratios) <= 1e-12


@given(p=arrays(np.float64, 8, elements=probs), seed=st.integers(0, 1000))
def test_losses_permutation_invariant(p, seed):
    r = np.random.default_rng(seed)
    y = r.integers(0, 2, 8)
    a = np.array([0, 1] + list(r.integers(0, 2, 6)))
    perm = r.permutation(8)
    assert float(ce_loss(p, y).data) == pytest.approx(float(ce_loss(p[perm], y[perm]).data), abs=1e-12)
    assert float(fair_loss(p, a).data) == pytest.approx(float(fair_loss(p[perm], a[perm]).data), abs=1e-12)


@given(p=arrays(np.float64, 8, elements=probs), seed=st.integers(0, 1000))
def test_fair_symmetric_under_relabeling(p, seed):
    a = np.array([0, 1] + list(np.random.default_rng(seed).integers(0, 2, 6)))
    assert float(fair_loss(p, a).data) == pytest.approx(float(fair_loss(p, 1 - a).data), abs=1e-15)


@given(z=arrays(np.float64, 8, elements=st.floats(-2, 2)), seed=st.integers(0, 1000))
def test_loss_gradients_match_finite_differences(z, seed):
    r = np.random.default_rng(seed)
    y = r.integers(0, 2, 8)
    a = np.array([0, 1] + list(r.integers(0, 2, 6)))
    assert compare(lambda q: ce_loss(sigmoid(q["z"]), y), {"z": z}) <= 1e-4
    cov = float(fair_loss(sigmoid(z).data, a).data)
    assume(cov > 1e-4)  # |.| kink
    assert compare(lambda q: fair_loss(sigmoid(q["z"]), a), {"z": z}) <= 1e-4


@given(ce=st.floats(0.01, 3), fair=st.floats(0.01, 1), l1=st.floats(0.05, 0.95))
def test_tch_gradient_away_from_ties(ce, fair, l1):
    lam = (l1, 1 - l1)
    assume(abs(ce / lam[0] - fair / lam[1]) > 1e-3)
    assert compare(lambda q: tch_loss(q["l"][0], q["l"][1], lam), {"l": np.array([ce, fair])}) <= 1e-4


def test_batched_losses_match_columns(rng):
    p = rng.uniform(0.05, 0.95, (10, 3))
    y = rng.integers(0, 2, 10)
    a = np.array([0, 1] * 5)
    ce, fair = ce_loss(p, y).data, fair_loss(p, a).data
    for j in range(3):
        assert ce[j] == pytest.approx(float(ce_loss(p[:, j], y).data))
        assert fair[j] == pytest.approx(float(fair_loss(p[:, j], a).data))


# --- alignment on the convex toy ---------------------------------------------


def test_front_point_is_on_front_and_parallel():
    for l1 in (0.1, 0.5, 0.9):
        f = front_point((l1, 1 - l1))
        assert np.sqrt(f).sum() == pytest.approx(np.sqrt(5.0))
        assert angle_to(f, (l1, 1 - l1)) <= 1e-4


def test_trained_solution_aligns_with_preference():
    res = solve((0.3, 0.7), seed=0)
    assert res.angle_deg <= 5.0
    np.testing.assert_allclose(res.losses, front_point((0.3, 0.7)), rtol=1e-3)


def test_alignment_small_study():
    angles = alignment_study(n_prefs=3, seeds=(0,), steps=600)
    assert np.all(angles <= 5.0)
