import math

import pytest
import torch

from dida import losses as L
from dida.substrate import finite_diff_check, gradient_reversal

# Frozen oracle values, computed independently by hand.
NLL_07 = -math.log(0.7)  # 0.356675
LN2 = math.log(2.0)  # 0.693147
MMD_SINGLETON = 2 - 2 * math.exp(-0.5)  # 0.786939


class TestClassNLL:
    def test_fixture(self):
        assert float(L.class_nll(torch.tensor([[0.1, 0.2, 0.7]]), torch.tensor([2]))) == pytest.approx(0.356675, abs=1e-6)
        assert NLL_07 == pytest.approx(0.356675, abs=1e-6)

    def test_one_hot_is_zero(self):
        assert float(L.class_nll(torch.eye(4), torch.arange(4))) == pytest.approx(0.0, abs=1e-6)

    def test_duplicated_rows_same_mean(self):
        p = torch.tensor([[0.3, 0.7]])
        y = torch.tensor([0])
        assert float(L.class_nll(p.repeat(3, 1), y.repeat(3))) == pytest.approx(float(L.class_nll(p, y)))

    def test_log_space_matches(self):
        p = torch.softmax(torch.randn(6, 5), -1)
        y = torch.randint(0, 5, (6,))
        assert float(L.class_nll(p.log(), y, log_space=True)) == pytest.approx(float(L.class_nll(p, y)), rel=1e-5)

    def test_clamp_keeps_zero_probability_finite(self):
        v = float(L.class_nll(torch.tensor([[1.0, 0.0]]), torch.tensor([1])))
        assert v == pytest.approx(-math.log(1e-12), rel=1e-4)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            L.class_nll(torch.tensor([[0.5, 0.5]]), torch.tensor([2]))

    def test_nonnegative_and_permutation_invariant(self):
        p = torch.softmax(torch.randn(10, 3), -1)
        y = torch.randint(0, 3, (10,))
        perm = torch.randperm(10)
        a, b = float(L.class_nll(p, y)), float(L.class_nll(p[perm], y[perm]))
        assert a >= 0 and a == pytest.approx(b, rel=1e-6)


class TestDomainLoss:
    def test_half_is_ln2(self):
        v = float(L.dann_domain_loss(torch.full((4,), 0.5), torch.tensor([1.0, 0, 1, 0])))
        assert v == pytest.approx(LN2, abs=1e-6)

    def test_perfect_discrimination_near_zero(self):
        assert float(L.dann_domain_loss(torch.tensor([1.0, 0.0]), torch.tensor([1.0, 0.0]))) < 1e-6

    def test_symmetric_swap(self):
        p, y = torch.tensor([0.2, 0.9, 0.6]), torch.tensor([1.0, 0.0, 1.0])
        assert float(L.dann_domain_loss(p, y)) == pytest.approx(float(L.dann_domain_loss(1 - p, 1 - y)), rel=1e-6)

    def test_logits_path_matches(self):
        z = torch.randn(8)
        y = torch.randint(0, 2, (8,)).float()
        assert float(L.dann_domain_loss(z, y, logits=True)) == pytest.approx(float(L.dann_domain_loss(torch.sigmoid(z), y)), rel=1e-5)


class TestCoral:
    def test_hand_fixture(self):
        fs = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
        ft = torch.tensor([[0.0, 1.0], [0.0, -1.0]])
        assert float(L.coral_loss(fs, ft)) == pytest.approx(0.5, abs=1e-6)

    def test_identical_is_zero(self):
        f = torch.randn(7, 4)
        assert float(L.coral_loss(f, f)) == pytest.approx(0.0, abs=1e-6)

    def test_row_permutation_and_swap(self):
        a, b = torch.randn(9, 3), torch.randn(6, 3)
        v = float(L.coral_loss(a, b))
        assert float(L.coral_loss(a, b[torch.randperm(6)])) == pytest.approx(v, rel=1e-5)
        assert float(L.coral_loss(b, a)) == pytest.approx(v, rel=1e-6)

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            L.coral_loss(torch.randn(1, 3), torch.randn(4, 3))


class TestMMD:
    def test_singleton_fixture(self):
        v = float(L.mmd_loss(torch.tensor([[0.0]]), torch.tensor([[1.0]]), bandwidths=[1.0]))
        assert v == pytest.approx(0.786939, abs=1e-5)
        assert MMD_SINGLETON == pytest.approx(0.786939, abs=1e-6)

    def test_identical_is_zero(self):
        f = torch.randn(6, 4)
        assert abs(float(L.mmd_loss(f, f))) < 1e-6

    def test_nonnegative_and_symmetric(self):
        for s in range(5):
            g = torch.Generator().manual_seed(s)
            a, b = torch.randn(5, 3, generator=g), torch.randn(7, 3, generator=g) + 0.5
            v = float(L.mmd_loss(a, b))
            assert v >= -1e-6
            assert float(L.mmd_loss(b, a)) == pytest.approx(v, rel=1e-5)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            L.mmd_loss(torch.zeros(0, 3), torch.randn(3, 3))

    def test_bad_bandwidth(self):
        with pytest.raises(ValueError):
            L.mmd_loss(torch.randn(3, 2), torch.randn(3, 2), bandwidths=[0.0])

    def test_median_bandwidths_default(self):
        a, b = torch.randn(5, 3), torch.randn(5, 3)
        m = L.median_bandwidth(a, b)
        explicit = float(L.mmd_loss(a, b, bandwidths=[0.5 * m, m, 2 * m, 4 * m]))
        assert float(L.mmd_loss(a, b)) == pytest.approx(explicit, rel=1e-6)


class TestRecon:
    def test_fixture(self):
        assert float(L.recon_mse(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 1.0]))) == pytest.approx(0.5, abs=1e-6)

    def test_identity_zero_and_homogeneous(self):
        x, y = torch.rand(2, 3, 4, 4), torch.rand(2, 3, 4, 4)
        assert float(L.recon_mse(x, x)) == 0.0
        assert float(L.recon_mse(3 * x, 3 * y)) == pytest.approx(9 * float(L.recon_mse(x, y)), rel=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            L.recon_mse(torch.zeros(2, 3), torch.zeros(3, 2))


class TestComposites:
    def test_da_total(self):
        v = L.da_total(L.LossValue(torch.tensor(1.0)), L.LossValue(torch.tensor(0.5)), 0.1)
        assert float(v) == pytest.approx(1.05, abs=1e-6)
        assert sum(v.terms.values()) == pytest.approx(float(v), abs=1e-6)
        assert float(L.da_total(L.LossValue(torch.tensor(1.0)), L.LossValue(torch.tensor(0.5)), 0.0)) == 1.0

    def test_di_total(self):
        v = L.di_total(L.LossValue(torch.tensor(0.2)), L.LossValue(torch.tensor(2.0)), 0.05)
        assert float(v) == pytest.approx(0.1, abs=1e-6)
        assert sum(v.terms.values()) == pytest.approx(float(v), abs=1e-6)
        assert float(L.di_total(L.LossValue(torch.tensor(0.2)), L.LossValue(torch.tensor(2.0)), 0.0)) == pytest.approx(0.2)

    def test_di_total_monotone_in_adversary_loss(self):
        rec = L.LossValue(torch.tensor(0.3))
        lo = float(L.di_total(rec, L.LossValue(torch.tensor(1.0)), 0.05))
        hi = float(L.di_total(rec, L.LossValue(torch.tensor(2.0)), 0.05))
        assert hi < lo


def loss_cases(seed, dtype=torch.float64):
    """Each case: (loss closure, params, gradient scale for the numerical side)."""
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.randn(*s, generator=g, dtype=dtype).requires_grad_()
    a, b = r(6, 4), r(5, 4)
    logits, y = r(6, 3), torch.randint(0, 3, (6,), generator=g)
    z, w = r(8, 4), r(4)
    dom = torch.tensor([1.0, 0.0] * 4, dtype=dtype)
    x = torch.rand(2, 3, 4, 4, generator=g, dtype=dtype)
    xh = r(2, 3, 4, 4)
    nll = lambda: L.class_nll(torch.softmax(logits, 1), y)
    dann = lambda: L.dann_domain_loss(torch.sigmoid(gradient_reversal(z, 1.0) @ w), dom).value
    return {
        "class_nll": [(lambda: nll().value, [logits], 1.0)],
        # discriminator side sees ordinary gradients; the features upstream of the reversal see negated ones
        "dann_domain_loss": [(dann, [w], 1.0), (dann, [z], -1.0)],
        "coral_loss": [(lambda: L.coral_loss(a, b).value, [a, b], 1.0)],
        "mmd_loss": [(lambda: L.mmd_loss(a, b, bandwidths=[0.5, 1.0, 2.0, 4.0]).value, [a, b], 1.0)],
        "recon_mse": [(lambda: L.recon_mse(x, xh).value, [xh], 1.0)],
        "da_total": [(lambda: L.da_total(nll(), L.coral_loss(a, b), 0.1).value, [logits, a, b], 1.0)],
        "di_total": [(lambda: L.di_total(L.recon_mse(x, xh), nll(), 0.05).value, [xh, logits], 1.0)],
    }


@pytest.mark.parametrize("name", list(loss_cases(0)))
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(name, seed):
    for fn, params, scale in loss_cases(seed)[name]:
        assert finite_diff_check(fn, params, 1e-3, gradient_scale=scale, seed=seed) <= 1e-3
