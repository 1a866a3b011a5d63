import math

import numpy as np
import pytest

from vartext.network import LatentStack, PROB_EPS
from vartext.tensor import Tensor, grad_check
from vartext.vloss import bernoulli_kl, kl_total, ohem_select, recon_loss, total_loss


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def full_mask(shape):
    return np.ones(shape, dtype=bool)


class TestRecon:
    def test_half_probability(self):
        shape = (1, 2, 3, 3)
        loss = recon_loss(t64(np.full(shape, 0.5)), np.ones(shape), full_mask(shape))
        assert loss.item() == pytest.approx(math.log(2), rel=1e-12)

    def test_entropy_at_target(self):
        shape = (1, 2, 2, 2)
        loss = recon_loss(t64(np.full(shape, 0.3)), np.full(shape, 0.3), full_mask(shape)).item()
        expected = 0.3 * math.log(1 / 0.3) + 0.7 * math.log(1 / 0.7)
        assert loss == pytest.approx(expected, rel=1e-12)
        assert loss == pytest.approx(0.61086, abs=1e-5)
        for delta in (-0.05, -0.01, 0.01, 0.05):
            other = recon_loss(t64(np.full(shape, 0.3 + delta)), np.full(shape, 0.3),
                               full_mask(shape)).item()
            assert other > loss

    def test_near_perfect_fit(self):
        y = np.zeros((1, 2, 4, 4))
        y[:, :, :2] = 1.0
        p = np.where(y > 0.5, 1 - PROB_EPS, PROB_EPS)
        loss = recon_loss(t64(p), y, full_mask(y.shape)).item()
        assert loss == pytest.approx(-math.log(1 - PROB_EPS), rel=1e-9)
        assert loss < 1.01e-4

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            recon_loss(t64(np.full((1, 2, 2, 2), 0.5)), np.zeros((1, 2, 2, 2)),
                       np.zeros((1, 2, 2, 2), dtype=bool))

    def test_only_masked_pixels_count(self):
        p = np.full((1, 2, 2, 2), 0.5)
        p[0, 0, 0, 0] = 0.9
        mask = np.zeros(p.shape, dtype=bool)
        mask[0, 0, 0, 0] = True
        loss = recon_loss(t64(p), np.ones(p.shape), mask).item()
        assert loss == pytest.approx(-math.log(0.9))

    def test_minimized_at_target(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            y = rng.uniform(size=(1, 2, 4, 4))
            base = recon_loss(t64(np.clip(y, PROB_EPS, 1 - PROB_EPS)), y, full_mask(y.shape)).item()
            p = np.clip(y + rng.normal(0, 0.1, size=y.shape), PROB_EPS, 1 - PROB_EPS)
            assert base <= recon_loss(t64(p), y, full_mask(y.shape)).item() + 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            y = rng.uniform(size=(1, 2, 3, 3))
            p = rng.uniform(0.05, 0.95, size=y.shape)
            mask = rng.uniform(size=y.shape) > 0.3
            mask[0, 0, 0, 0] = True
            assert grad_check(lambda v: recon_loss(v, y, mask), p) < 1e-6


class TestKL:
    def test_identical_is_zero(self):
        th = np.random.default_rng(0).uniform(0.01, 0.99, size=(1, 2, 4, 4))
        assert bernoulli_kl(t64(th), th).item() == 0.0

    def test_hand_values(self):
        v = bernoulli_kl(t64(np.full((1, 2, 2, 2), 0.5)), np.full((1, 2, 2, 2), 0.25)).item()
        assert v == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), rel=1e-12)
        assert v == pytest.approx(0.14384, abs=1e-5)
        v = bernoulli_kl(t64(np.full((1, 2, 2, 2), 0.9)), np.full((1, 2, 2, 2), 0.1)).item()
        assert v == pytest.approx(0.8 * math.log(9), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bernoulli_kl(t64(np.full((1, 2, 2, 2), 0.5)), np.full((1, 2, 4, 4), 0.5))

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            th = rng.uniform(PROB_EPS, 1 - PROB_EPS, size=(1, 2, 3, 3))
            pr = rng.uniform(size=th.shape)
            assert bernoulli_kl(t64(th), pr).item() >= 0.0

    def test_monte_carlo(self):
        rng = np.random.default_rng(3)
        th = rng.uniform(0.05, 0.95, size=(1, 1, 4, 4))
        pr = rng.uniform(0.05, 0.95, size=th.shape)
        z = rng.uniform(size=(100_000, *th.shape)) < th
        logq = np.where(z, np.log(th), np.log1p(-th)).sum(axis=(1, 2, 3, 4))
        logp = np.where(z, np.log(pr), np.log1p(-pr)).sum(axis=(1, 2, 3, 4))
        mc = (logp - logq).mean() / th.size
        analytic = bernoulli_kl(t64(th), pr).item()
        assert abs(-mc - analytic) <= 0.01 * analytic

    def test_gradient(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            th = rng.uniform(0.05, 0.95, size=(1, 2, 3, 3))
            pr = rng.uniform(0.05, 0.95, size=th.shape)
            assert grad_check(lambda v: bernoulli_kl(v, pr), th) < 1e-6


def make_latents(rng, size=8, match=True):
    thetas, priors = [], []
    for l in range(1, 6):
        s = max(size // 2 ** l, 1)
        pr = rng.uniform(0.05, 0.95, size=(1, 2, s, s))
        priors.append(pr)
        thetas.append(t64(pr if match else rng.uniform(0.05, 0.95, size=pr.shape)))
    return LatentStack(theta=thetas, prior_target=priors)


class TestKLTotal:
    def test_matched_levels(self):
        total, per = kl_total(make_latents(np.random.default_rng(0)))
        assert total.item() == pytest.approx(0.0, abs=1e-14)
        assert per == pytest.approx([0.0] * 5, abs=1e-14)

    def test_single_mismatch_additivity(self):
        lat = make_latents(np.random.default_rng(1))
        lat.theta[2] = t64(np.full(lat.theta[2].shape, 0.5))
        total, per = kl_total(lat)
        assert total.item() == pytest.approx(bernoulli_kl(lat.theta[2], lat.prior_target[2]).item())
        assert total.item() == pytest.approx(per[2])

    def test_empty_stack(self):
        total, per = kl_total(LatentStack())
        assert total is None and per == [0.0] * 5

    def test_missing_prior(self):
        lat = make_latents(np.random.default_rng(2))
        lat.prior_target = lat.prior_target[:3]
        with pytest.raises(ValueError):
            kl_total(lat)


class TestOhem:
    def test_ratio(self):
        y = np.zeros((1, 2, 16, 16))
        y[0, :, 0, :10] = 1.0
        p = np.random.default_rng(0).uniform(0.01, 0.99, size=y.shape)
        mask = ohem_select(p, y)
        for c in range(2):
            assert mask[:, c][y[:, c] > 0.1].all()
            assert mask[:, c].sum() - 10 == 30

    def test_hardest_negatives_chosen(self):
        y = np.zeros((1, 2, 8, 8))
        y[0, :, 0, 0] = 1.0
        p = np.full(y.shape, 0.01)
        p[0, :, 5, 5:8] = 0.9
        mask = ohem_select(p, y)
        assert mask[0, 0, 5, 5:8].all()

    def test_all_positive(self):
        y = np.ones((1, 2, 4, 4))
        mask = ohem_select(np.full(y.shape, 0.5), y)
        assert mask.all()

    def test_zero_positive_fallback(self):
        y = np.zeros((2, 2, 16, 16))
        mask = ohem_select(np.random.default_rng(1).uniform(size=y.shape), y)
        assert mask[:, 0].sum() == 64 and mask[:, 1].sum() == 64

    def test_negatives_capped_by_availability(self):
        y = np.zeros((1, 2, 4, 4))
        y[0, :, :3] = 1.0
        mask = ohem_select(np.full(y.shape, 0.5), y)
        assert mask.all()


class TestTotalLoss:
    def _case(self, rng):
        y = np.zeros((1, 2, 8, 8))
        y[0, :, 2:5, 2:5] = 1.0
        p = rng.uniform(0.05, 0.95, size=y.shape)
        return y, p

    def test_kl_weight_zero(self):
        rng = np.random.default_rng(0)
        y, p = self._case(rng)
        rep = total_loss(t64(p), y, make_latents(rng, match=False), kl_weight=0.0)
        assert rep.total == pytest.approx(rep.recon)
        assert rep.kl > 0

    def test_baseline_no_latents(self):
        y, p = self._case(np.random.default_rng(1))
        rep = total_loss(t64(p), y, LatentStack())
        assert rep.total == rep.recon and rep.kl == 0.0

    def test_perfect(self):
        rng = np.random.default_rng(2)
        y, _ = self._case(rng)
        p = np.where(y > 0.5, 1 - PROB_EPS, PROB_EPS)
        rep = total_loss(t64(p), y, make_latents(rng, match=True))
        assert rep.total <= 2e-4

    def test_report_counts(self):
        y, p = self._case(np.random.default_rng(3))
        rep = total_loss(t64(p), y, LatentStack())
        assert rep.num_pos == 18 and rep.num_neg_selected == 54

    def test_gradient_wrt_pred_and_theta(self):
        rng = np.random.default_rng(4)
        y, p = self._case(rng)
        lat = make_latents(rng, match=False)
        thetas = [t.data.copy() for t in lat.theta]

        def f(pred, *ths):
            stack = LatentStack(theta=list(ths), prior_target=lat.prior_target)
            return total_loss(pred, y, stack).total_tensor

        assert grad_check(f, [p, *thetas]) < 1e-6
