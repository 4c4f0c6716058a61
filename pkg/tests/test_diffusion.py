import numpy as np
import pytest

from ncsim.diffusion import (Schedule, TrainingBatch, build_schedule,
                             batch_scores, dsm_loss, dsm_loss_terms, dsm_target,
                             forward_single_step, forward_transition_sample,
                             reverse_conditional_paths, reverse_conditional_sample)
from ncsim.errors import ConfigError, ContractViolationError, DivergenceError
from ncsim.grid import (Field, Mask, RngStream, build_grid, full_mask,
                        sample_bernoulli_mask)
from ncsim.processes import (GaussianPerturbedScore, GaussianProcessModel,
                             GPParams)


class TestBuildSchedule:
    def test_paper_endpoints_exact(self):
        s = build_schedule(1000, 0.0001, 0.02)
        assert s.beta[0] == 0.0001
        assert s.beta[-1] == 0.02
        assert s.horizon == 1000

    def test_alpha_bar_starts_at_one_and_decreases(self):
        s = build_schedule(100, 1e-4, 0.02)
        assert s.alpha_bar[0] == 1.0
        assert np.all(np.diff(s.alpha_bar) < 0)

    def test_terminal_alpha_bar_nearly_zero(self):
        s = build_schedule(1000, 0.0001, 0.02)
        assert s.alpha_bar[-1] < 1e-4
        log_sum = np.log1p(-s.beta[1:]).sum()
        assert s.alpha_bar[-1] == pytest.approx(np.exp(log_sum), rel=1e-10)

    def test_sigma_bar_definition(self):
        s = build_schedule(50, 1e-3, 0.05)
        assert np.allclose(s.sigma_bar, np.sqrt(1 - s.alpha_bar))
        assert np.allclose(s.weight(np.arange(51)), 1 - s.alpha_bar)

    def test_rejects_invalid_endpoints(self):
        for horizon, b0, bt in [(0, 1e-4, 0.02), (10, 0.0, 0.02),
                                (10, 0.03, 0.02), (10, 1e-4, 1.0)]:
            with pytest.raises(ConfigError):
                build_schedule(horizon, b0, bt)

    def test_fingerprint_distinguishes_schedules(self):
        a = build_schedule(100, 1e-4, 0.02)
        b = build_schedule(100, 1e-4, 0.021)
        assert a.fingerprint() != b.fingerprint()
        assert a.fingerprint() == build_schedule(100, 1e-4, 0.02).fingerprint()


class TestForwardTransition:
    def test_near_identity_at_tiny_beta(self):
        s = Schedule(np.full(3, 1e-12))
        x0 = np.arange(4.0)
        out = forward_transition_sample(x0, 1, s, RngStream(0))
        assert np.allclose(out, x0, atol=1e-5)

    def test_rejects_t_out_of_range(self):
        s = build_schedule(10, 1e-4, 0.02)
        for t in (0, 11):
            with pytest.raises(ConfigError):
                forward_transition_sample(np.zeros(3), t, s, RngStream(0))

    def test_centered_input_has_kernel_variance(self):
        s = build_schedule(100, 1e-4, 0.02)
        t = 60
        out = forward_transition_sample(np.zeros((20_000, 4)), t, s, RngStream(3))
        var = out.var()
        expect = 1 - s.alpha_bar[t]
        assert var == pytest.approx(expect, rel=0.02)

    @pytest.mark.slow
    def test_single_steps_compose_to_direct_kernel(self):
        s = build_schedule(20, 1e-3, 0.2)
        t = 12
        x0 = np.array([1.5, -0.5, 2.0, 0.0])
        draws = 100_000
        rng = RngStream(42)
        direct = forward_transition_sample(np.tile(x0, (draws, 1)), t, s,
                                           rng.child(0))
        stepped = np.tile(x0, (draws, 1))
        for step in range(1, t + 1):
            stepped = forward_single_step(stepped, step, s, rng.child(step))
        se_mean = np.sqrt(direct.var() / draws)
        assert np.abs(direct.mean(0) - stepped.mean(0)).max() < 3 * se_mean * 1.5
        v1, v2 = direct.var(0, ddof=1), stepped.var(0, ddof=1)
        se_var = v1 * np.sqrt(2.0 / draws)
        assert np.abs(v1 - v2).max() < 4 * se_var.max()
        # both match the analytic kernel moments
        assert np.allclose(direct.mean(0), np.sqrt(s.alpha_bar[t]) * x0,
                           atol=4 * se_mean)
        assert np.abs(v1 - (1 - s.alpha_bar[t])).max() < 4 * se_var.max()


def exact_score_for(model, obs, mask, sched):
    cond = model.exact_conditional(obs, mask)
    return cond, GaussianPerturbedScore(cond, mask, sched)


class TestReverseSampler:
    def test_all_ones_mask_returns_observations_without_score_calls(self, grid8):
        calls = []

        def score(x, mask, theta, t):
            calls.append(t)
            return np.zeros_like(x)

        obs = Field(np.arange(float(grid8.n)))
        sched = build_schedule(50, 1e-4, 0.02)
        out = reverse_conditional_sample(obs, full_mask(grid8.n), None, sched,
                                         score, RngStream(1))
        assert out == obs
        assert calls == []

    def test_observed_entries_pinned_bit_exactly(self, grid8):
        model = GaussianProcessModel(grid8, GPParams(3.0, 1.5))
        mask = sample_bernoulli_mask(grid8, 0.2, RngStream(2))
        obs = model.simulate_field(RngStream(3))
        sched = build_schedule(40, 1e-4, 0.02)
        seen = []

        def score(x, m, theta, t):
            seen.append(np.array_equal(x[:, mask.observed_idx],
                                       np.tile(obs.values[mask.observed_idx],
                                               (x.shape[0], 1))))
            return np.zeros_like(x)

        paths = reverse_conditional_paths(obs, mask, None, sched, score,
                                          RngStream(4), count=3)
        assert all(seen)
        assert np.array_equal(paths[:, mask.observed_idx],
                              np.tile(obs.values[mask.observed_idx], (3, 1)))

    def test_exact_score_recovers_conditional_law(self, grid8):
        model = GaussianProcessModel(grid8, GPParams(3.0, 1.5))
        mask = sample_bernoulli_mask(grid8, 0.15, RngStream(5))
        obs = model.simulate_field(RngStream(6))
        sched = build_schedule(300, 1e-4, 0.06)
        cond, score = exact_score_for(model, obs, mask, sched)
        paths = reverse_conditional_paths(obs, mask, None, sched, score,
                                          RngStream(7), count=600)
        samp = paths[:, mask.unobserved_idx]
        sd = np.sqrt(np.diag(cond.cov))
        assert np.abs(samp.mean(0) - cond.mean).max() / sd.min() < 0.2
        emp_cov = np.cov(samp.T)
        rel = np.linalg.norm(emp_cov - cond.cov) / np.linalg.norm(cond.cov)
        assert rel < 0.3

    def test_final_noise_off_reduces_variance(self, grid8):
        model = GaussianProcessModel(grid8, GPParams(3.0, 1.5))
        mask = sample_bernoulli_mask(grid8, 0.15, RngStream(8))
        obs = model.simulate_field(RngStream(9))
        sched = build_schedule(100, 1e-4, 0.05)
        _, score = exact_score_for(model, obs, mask, sched)
        noisy = reverse_conditional_paths(obs, mask, None, sched, score,
                                          RngStream(10), count=800,
                                          final_step_noise=True)
        quiet = reverse_conditional_paths(obs, mask, None, sched, score,
                                          RngStream(10), count=800,
                                          final_step_noise=False)
        ui = mask.unobserved_idx
        assert quiet[:, ui].var(0).mean() < noisy[:, ui].var(0).mean()

    def test_score_contract_violation_detected(self, grid8):
        mask = sample_bernoulli_mask(grid8, 0.3, RngStream(11))
        obs = Field(np.zeros(grid8.n))
        sched = build_schedule(10, 1e-4, 0.02)

        def bad_score(x, m, theta, t):
            return np.ones_like(x)  # nonzero at observed indices

        with pytest.raises(ContractViolationError):
            reverse_conditional_sample(obs, mask, None, sched, bad_score,
                                       RngStream(12))

    def test_divergence_error_names_the_step(self, grid8):
        mask = sample_bernoulli_mask(grid8, 0.3, RngStream(13))
        obs = Field(np.zeros(grid8.n))
        sched = build_schedule(10, 1e-4, 0.02)
        unobs = 1.0 - mask.bits

        def exploding(x, m, theta, t):
            return unobs * x ** 3 * 1e50  # doubly exponential growth

        with pytest.raises(DivergenceError) as err:
            with np.errstate(over="ignore", invalid="ignore"):
                reverse_conditional_sample(obs, mask, None, sched, exploding,
                                           RngStream(14))
        assert err.value.step is not None
        assert str(err.value.step) in str(err.value)


def make_batch(grid, sched, rng, size=16, rho=0.3):
    gen = rng.generator()
    bits = (gen.random((size, grid.n)) < rho).astype(np.uint8)
    x0 = gen.standard_normal((size, grid.n))
    t = gen.integers(1, sched.horizon + 1, size=size)
    eps = gen.standard_normal((size, grid.n)) * (1 - bits)
    a = sched.alpha_bar[t][:, None]
    x_t = np.where(bits == 1, x0, np.sqrt(a) * x0 + sched.sigma_bar[t][:, None] * eps)
    return TrainingBatch(x_t, bits, t, eps)


class TestDsmLoss:
    def test_zero_when_score_equals_target(self, grid4):
        sched = build_schedule(30, 1e-3, 0.05)
        batch = make_batch(grid4, sched, RngStream(15))
        targets = dsm_target(batch, sched)

        def score(x, mask, theta, t):
            row = np.flatnonzero((batch.t == t))[0]
            return targets[row] * (1 - batch.mask_bits[row])

        # evaluate row by row against matching targets
        scores = np.stack([targets[i] * (1 - batch.mask_bits[i])
                           for i in range(batch.size)])
        assert dsm_loss_terms(scores, batch, sched).max() < 1e-20

    def test_zero_score_gives_chi_square_mean(self, grid8):
        sched = build_schedule(30, 1e-3, 0.05)
        batch = make_batch(grid8, sched, RngStream(16), size=4000, rho=0.25)

        def zero_score(x, mask, theta, t):
            return np.zeros_like(x)

        loss = dsm_loss(batch, zero_score, sched)
        unobs_counts = (1 - batch.mask_bits).sum(axis=1)
        expect = unobs_counts.mean()
        se = np.sqrt(np.var(unobs_counts + 0.0) / batch.size + 2 * expect / batch.size)
        assert loss == pytest.approx(expect, abs=4 * se + 1.0)

    def test_weighted_and_epsilon_forms_agree_to_1e12(self, grid8):
        # the discrete-form tractability identity:
        # lambda(t) ||s + eps/sigma||^2 == ||sigma s + eps||^2
        sched = build_schedule(100, 1e-4, 0.02)
        batch = make_batch(grid8, sched, RngStream(17), size=64)
        gen = RngStream(18).generator()
        scores = gen.standard_normal(batch.x_t.shape) * (1 - batch.mask_bits)
        eps_form = dsm_loss_terms(scores, batch, sched)
        sig = sched.sigma_bar[batch.t][:, None]
        lam = sched.weight(batch.t)
        direct = lam * (((scores + batch.eps / sig) * (1 - batch.mask_bits)) ** 2
                        ).sum(axis=1)
        rel = np.abs(eps_form - direct) / np.maximum(direct, 1e-300)
        assert rel.max() < 1e-12

    def test_rejects_t_zero(self, grid4):
        sched = build_schedule(10, 1e-3, 0.05)
        batch = make_batch(grid4, sched, RngStream(19), size=4)
        bad = TrainingBatch(batch.x_t, batch.mask_bits,
                            np.zeros_like(batch.t), batch.eps)
        with pytest.raises(ConfigError):
            dsm_loss_terms(np.zeros_like(batch.x_t), bad, sched)

    def test_permutation_and_duplication_of_batch(self, grid4):
        sched = build_schedule(30, 1e-3, 0.05)
        batch = make_batch(grid4, sched, RngStream(20), size=32)
        gen = RngStream(21).generator()
        scores = gen.standard_normal(batch.x_t.shape) * (1 - batch.mask_bits)
        base = dsm_loss_terms(scores, batch, sched)
        perm = gen.permutation(32)
        permuted = TrainingBatch(batch.x_t[perm], batch.mask_bits[perm],
                                 batch.t[perm], batch.eps[perm])
        assert np.allclose(np.sort(dsm_loss_terms(scores[perm], permuted, sched)),
                           np.sort(base), rtol=1e-15)
        assert abs(dsm_loss_terms(scores[perm], permuted, sched).mean()
                   - base.mean()) < 1e-12 * abs(base.mean())
        doubled = TrainingBatch(np.vstack([batch.x_t] * 2),
                                np.vstack([batch.mask_bits] * 2),
                                np.concatenate([batch.t] * 2),
                                np.vstack([batch.eps] * 2))
        dup = dsm_loss_terms(np.vstack([scores] * 2), doubled, sched)
        assert dup.sum() == pytest.approx(2 * base.sum(), rel=1e-14)
        assert dup.mean() == pytest.approx(base.mean(), rel=1e-14)
