import math

import numpy as np
import pytest
import torch

from conftest import phantom_batch, tiny_config
from x2ct.determinism import STREAM_INIT, stream_seed
from x2ct.diffusion import (
    CHECKPOINT_FORMAT,
    IcmRegressor,
    LossReport,
    NoiseSchedule,
    VolumeDecoder3d,
    build_conditioner,
    build_denoiser,
    build_models,
    build_regressor,
    icm_reg_forward,
    icm_reg_train_step,
    load_checkpoint,
    loss_proj,
    loss_simple,
    make_schedule,
    p_sample_step,
    predict_y0,
    project_consistent,
    q_sample,
    resolve_lambda,
    sample,
    save_checkpoint,
    train_step,
)
from x2ct.errors import TrainingDivergenceError
from x2ct.projections import BiplanarPair, make_biplanar_pair
from x2ct.volumes import CtVolume


def zero_beta_schedule(T=4):
    # identity forward process, bypasses validate() on purpose
    beta = torch.zeros(T, dtype=torch.float64)
    return NoiseSchedule(
        T=T, kind="linear", variance="beta", beta=beta,
        alpha_bar=torch.ones(T, dtype=torch.float64), sigma=torch.zeros(T, dtype=torch.float64),
    )


def build_stack(cfg, seed=0, lr=2e-4):
    model, icm = build_models(cfg, seed)
    sched = make_schedule(cfg.schedule.T, cfg.schedule.kind, cfg.schedule.variance)
    opt = torch.optim.Adam(list(model.parameters()) + list(icm.parameters()), lr=lr)
    return model, icm, sched, opt


class TestSchedule:
    def test_canonical_endpoints_T1000(self):
        s = make_schedule(1000)
        assert abs(float(s.beta[0]) - 1e-4) <= 1e-12
        assert abs(float(s.beta[-1]) - 0.02) <= 1e-12

    def test_scaled_endpoints_T100(self):
        s = make_schedule(100)
        assert abs(float(s.beta[0]) - 1e-3) <= 1e-12
        assert abs(float(s.beta[-1]) - 0.2) <= 1e-12

    def test_single_step_schedule(self):
        s = make_schedule(1)
        np.testing.assert_allclose(s.beta.numpy(), [0.1], atol=1e-12)
        np.testing.assert_allclose(s.alpha_bar.numpy(), [0.9], atol=1e-12)

    def test_short_schedules_stay_valid(self):
        for T in (1, 2, 10, 100, 1000):
            s = make_schedule(T)
            assert s.beta.shape == (T,)
            assert (s.beta > 0).all() and (s.beta < 1).all()
            if T > 1:
                assert (s.alpha_bar.diff() < 0).all()

    def test_clamp_keeps_beta_below_one(self):
        s = make_schedule(10)  # unclamped top would be 2.0
        assert float(s.beta.max()) == 0.999

    def test_float64_tables(self):
        s = make_schedule(100)
        assert s.beta.dtype == torch.float64
        assert s.alpha_bar.dtype == torch.float64
        assert s.sigma.dtype == torch.float64

    def test_beta_variance_mode(self):
        s = make_schedule(100, variance="beta")
        np.testing.assert_allclose(s.sigma.numpy() ** 2, s.beta.numpy(), rtol=1e-12)

    def test_posterior_variance_mode(self):
        s = make_schedule(100, variance="posterior")
        assert float(s.sigma[0]) == 0.0
        prev = np.concatenate([[1.0], s.alpha_bar.numpy()[:-1]])
        want = s.beta.numpy() * (1 - prev) / (1 - s.alpha_bar.numpy())
        np.testing.assert_allclose(s.sigma.numpy() ** 2, want, rtol=1e-12)
        # strictly smaller than the beta choice after the first step
        assert (s.sigma.numpy()[1:] ** 2 < s.beta.numpy()[1:]).all()

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            make_schedule(0)
        with pytest.raises(ValueError):
            make_schedule(10, kind="cosine")
        with pytest.raises(ValueError):
            make_schedule(10, variance="learned")


class TestForwardProcess:
    def test_q_sample_formula(self):
        s = make_schedule(50)
        y0 = torch.full((1, 1, 2, 2, 2), 0.5, dtype=torch.float64)
        eps = torch.full_like(y0, -1.0)
        t = 20
        ab = float(s.alpha_bar[t - 1])
        want = math.sqrt(ab) * 0.5 + math.sqrt(1 - ab) * -1.0
        got = q_sample(y0, t, eps, s)
        np.testing.assert_allclose(got.numpy(), want, rtol=1e-12)

    def test_per_item_timesteps(self):
        s = make_schedule(50)
        y0 = torch.randn(3, 1, 2, 2, 2, dtype=torch.float64)
        eps = torch.randn_like(y0)
        out = q_sample(y0, torch.tensor([1, 25, 50]), eps, s)
        for i, t in enumerate((1, 25, 50)):
            solo = q_sample(y0[i : i + 1], t, eps[i : i + 1], s)
            assert torch.equal(out[i : i + 1], solo)

    def test_roundtrip_every_timestep(self):
        s = make_schedule(50)
        torch.manual_seed(0)
        y0 = torch.randn(1, 1, 4, 4, 4, dtype=torch.float64)
        eps = torch.randn_like(y0)
        for t in range(1, 51):
            y_t = q_sample(y0, t, eps, s)
            back = predict_y0(y_t, t, eps, s)
            assert float((back - y0).abs().max()) <= 1e-5

    def test_paper_exact_mode_formula(self):
        s = make_schedule(50)
        torch.manual_seed(1)
        y_t = torch.randn(1, 1, 2, 2, 2, dtype=torch.float64)
        eps_hat = torch.randn_like(y_t)
        t = 30
        ab = float(s.alpha_bar[t - 1])
        want = (y_t - (1 - ab) * eps_hat) / math.sqrt(ab)
        got = predict_y0(y_t, t, eps_hat, s, mode="paper_exact")
        np.testing.assert_allclose(got.numpy(), want.numpy(), rtol=1e-12)
        # differs from the exact inverse except where both coefficients agree
        std = predict_y0(y_t, t, eps_hat, s, mode="standard")
        assert not torch.allclose(got, std)

    def test_predict_mode_validation(self):
        s = make_schedule(10)
        y = torch.zeros(1, 1, 2, 2, 2)
        with pytest.raises(ValueError):
            predict_y0(y, 1, y, s, mode="other")

    def test_timestep_bounds(self):
        s = make_schedule(10)
        y = torch.zeros(2, 1, 2, 2, 2)
        with pytest.raises(ValueError):
            q_sample(y, torch.tensor([0, 5]), y, s)
        with pytest.raises(ValueError):
            q_sample(y, torch.tensor([5, 11]), y, s)


class TestReverseStep:
    def test_no_noise_at_final_step(self):
        s = make_schedule(10)
        torch.manual_seed(2)
        y = torch.randn(1, 1, 2, 2, 2, dtype=torch.float64)
        eps_hat = torch.randn_like(y)
        noise = torch.randn_like(y)
        with_n = p_sample_step(y, 1, eps_hat, s, noise)
        without = p_sample_step(y, 1, eps_hat, s, None)
        assert torch.equal(with_n, without)

    def test_noise_scaled_by_sigma(self):
        s = make_schedule(10)
        torch.manual_seed(3)
        y = torch.randn(1, 1, 2, 2, 2, dtype=torch.float64)
        eps_hat = torch.randn_like(y)
        noise = torch.randn_like(y)
        t = 5
        mean = p_sample_step(y, t, eps_hat, s, None)
        full = p_sample_step(y, t, eps_hat, s, noise)
        np.testing.assert_allclose(
            (full - mean).numpy(), float(s.sigma[t - 1]) * noise.numpy(), rtol=1e-12
        )

    def test_zero_beta_is_identity(self):
        s = zero_beta_schedule(T=4)
        y = torch.randn(1, 1, 3, 3, 3, dtype=torch.float64)
        for t in (1, 2, 4):
            out = p_sample_step(y, t, torch.randn_like(y), s, None)
            assert torch.equal(out, y)

    def test_single_step_chain_recovers_y0(self):
        # with a perfect noise prediction, T=1 sampling inverts q_sample
        s = make_schedule(1)
        torch.manual_seed(4)
        y0 = torch.randn(1, 1, 4, 4, 4, dtype=torch.float64)
        eps = torch.randn_like(y0)
        y1 = q_sample(y0, 1, eps, s)
        back = p_sample_step(y1, 1, eps, s, torch.randn_like(y0))
        assert float((back - y0).abs().max()) <= 1e-12

    def test_clip_matches_raw_form_when_estimate_in_range(self):
        # the clean-estimate posterior mean is the eps-form mean rewritten,
        # so with nothing to clamp the two must agree
        s = make_schedule(10)
        torch.manual_seed(5)
        y0 = torch.rand(1, 1, 3, 3, 3, dtype=torch.float64) * 1.6 - 0.8
        eps = torch.randn_like(y0)
        for t in (1, 4, 10):
            y_t = q_sample(y0, t, eps, s)
            raw = p_sample_step(y_t, t, eps, s, None)
            clipped = p_sample_step(y_t, t, eps, s, None, clip_y0=True)
            np.testing.assert_allclose(clipped.numpy(), raw.numpy(), atol=1e-12)

    def test_clip_binds_on_out_of_range_estimate(self):
        s = make_schedule(10)
        t = 6
        y = torch.full((1, 1, 2, 2, 2), 3.0, dtype=torch.float64)
        eps_hat = torch.zeros_like(y)  # implied clean estimate far above 1
        raw = p_sample_step(y, t, eps_hat, s, None)
        clipped = p_sample_step(y, t, eps_hat, s, None, clip_y0=True)
        assert not torch.equal(clipped, raw)
        ab_prev = float(s.alpha_bar[t - 2])
        beta = float(s.beta[t - 1])
        ab = float(s.alpha_bar[t - 1])
        want = (ab_prev**0.5 * beta / (1 - ab)) * 1.0 + (
            (1 - beta) ** 0.5 * (1 - ab_prev) / (1 - ab)
        ) * 3.0
        np.testing.assert_allclose(clipped.numpy(), np.full((1, 1, 2, 2, 2), want), rtol=1e-12)

    def test_clip_zero_beta_still_identity(self):
        s = zero_beta_schedule(T=4)
        y = torch.randn(1, 1, 3, 3, 3, dtype=torch.float64)
        for t in (1, 2, 4):
            out = p_sample_step(y, t, torch.randn_like(y), s, None, clip_y0=True)
            assert torch.equal(out, y)

    def test_rejects_out_of_range_t(self):
        s = make_schedule(5)
        y = torch.zeros(1, 1, 2, 2, 2)
        with pytest.raises(ValueError):
            p_sample_step(y, 0, y, s)
        with pytest.raises(ValueError):
            p_sample_step(y, 6, y, s)


class TestLosses:
    def test_loss_simple_value(self):
        eps = torch.zeros(2, 1, 3, 3, 3)
        eps_hat = torch.full_like(eps, 0.5)
        assert abs(float(loss_simple(eps, eps_hat)) - 0.5) <= 1e-7

    def test_loss_proj_manual_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((2, 1, 4, 5, 6))
        b = rng.standard_normal((2, 1, 4, 5, 6))
        want = (
            np.abs(a.mean(axis=2) - b.mean(axis=2)).mean()
            + np.abs(a.mean(axis=3) - b.mean(axis=3)).mean()
            + np.abs(a.mean(axis=4) - b.mean(axis=4)).mean()
        ) / 3.0
        got = loss_proj(torch.from_numpy(a), torch.from_numpy(b))
        assert abs(float(got) - want) <= 1e-12

    def test_loss_proj_zero_on_identical(self):
        x = torch.randn(1, 1, 4, 4, 4)
        assert float(loss_proj(x, x)) == 0.0

    def test_loss_proj_shape_validation(self):
        with pytest.raises(ValueError):
            loss_proj(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 4))
        with pytest.raises(ValueError):
            loss_proj(torch.zeros(1, 1, 4, 4, 4), torch.zeros(1, 1, 4, 4, 2))

    def test_resolve_lambda(self):
        assert resolve_lambda(make_schedule(1)) == 1.0
        assert resolve_lambda(make_schedule(100)) == 0.01
        assert resolve_lambda(make_schedule(1000)) == 0.001


class TestTrainStep:
    def test_report_identity_and_fields(self):
        cfg = tiny_config()
        model, icm, sched, opt = build_stack(cfg)
        batch = phantom_batch(2, 16)
        rep = train_step(batch, model, icm, sched, opt, step=1, seed=0)
        assert isinstance(rep, LossReport)
        assert rep.step == 1
        assert rep.lam == resolve_lambda(sched)
        assert rep.total == rep.simple + rep.lam * rep.proj
        assert rep.simple > 0 and rep.proj > 0

    def test_proj_loss_can_be_disabled(self):
        cfg = tiny_config()
        model, icm, sched, opt = build_stack(cfg)
        batch = phantom_batch(2, 16)
        rep = train_step(batch, model, icm, sched, opt, step=1, seed=0, use_proj_loss=False)
        assert rep.proj == 0.0
        assert rep.total == rep.simple

    def test_bitwise_deterministic(self):
        cfg = tiny_config()
        batch = phantom_batch(2, 16)
        states = []
        for _ in range(2):
            model, icm, sched, opt = build_stack(cfg, seed=7)
            for step in range(1, 4):
                train_step(batch, model, icm, sched, opt, step=step, seed=7)
            states.append((model.state_dict(), icm.state_dict()))
        for a, b in zip(states[0], states[1]):
            for k in a:
                assert torch.equal(a[k], b[k]), k

    def test_divergence_detection(self):
        cfg = tiny_config()
        model, icm, sched, opt = build_stack(cfg)
        y0, front, side = phantom_batch(2, 16)
        y0 = y0.clone()
        y0[0, 0, 0, 0, 0] = float("nan")
        with pytest.raises(TrainingDivergenceError):
            train_step((y0, front, side), model, icm, sched, opt, step=1, seed=0)

    def test_overfit_smoke(self):
        cfg = tiny_config()
        model, icm, sched, opt = build_stack(cfg, seed=0, lr=1e-3)
        batch = phantom_batch(2, 16)
        first = last = None
        for step in range(1, 121):
            rep = train_step(batch, model, icm, sched, opt, step=step, seed=0)
            if step == 1:
                first = rep.total
            last = rep.total
        assert last < 0.6 * first, f"loss barely moved: {first:.4f} -> {last:.4f}"


class TestSampling:
    def make_pair(self, size=16):
        from conftest import normalized_phantom

        return normalized_phantom(seed=1, size=size), None

    def test_shape_range_and_space(self):
        cfg = tiny_config()
        model, icm = build_models(cfg, 0)
        sched = make_schedule(5)
        vol, _ = self.make_pair()
        pair = make_biplanar_pair(vol)
        out = sample(model, icm, pair, sched, seed=0)
        assert isinstance(out, CtVolume)
        assert out.data.shape == (16, 16, 16)
        assert out.value_space == "normalized"
        assert out.data.min() >= -1.0 and out.data.max() <= 1.0

    def test_seed_determinism(self):
        cfg = tiny_config()
        model, icm = build_models(cfg, 0)
        sched = make_schedule(5)
        vol, _ = self.make_pair()
        pair = make_biplanar_pair(vol)
        a = sample(model, icm, pair, sched, seed=11)
        b = sample(model, icm, pair, sched, seed=11)
        np.testing.assert_array_equal(a.data, b.data)
        c = sample(model, icm, pair, sched, seed=12)
        assert not np.array_equal(a.data, c.data)

    def test_restores_training_mode(self):
        cfg = tiny_config()
        model, icm = build_models(cfg, 0)
        model.train()
        icm.train()
        sched = make_schedule(2)
        vol, _ = self.make_pair()
        pair = make_biplanar_pair(vol)
        sample(model, icm, pair, sched, seed=0)
        assert model.training and icm.training

    def test_guidance_changes_output_deterministically(self):
        cfg = tiny_config()
        model, icm = build_models(cfg, 0)
        sched = make_schedule(5)
        vol, _ = self.make_pair()
        pair = make_biplanar_pair(vol)
        guided = sample(model, icm, pair, sched, seed=3)
        plain = sample(model, icm, pair, sched, seed=3, guidance_iters=0)
        assert not np.array_equal(guided.data, plain.data)
        again = sample(model, icm, pair, sched, seed=3)
        np.testing.assert_array_equal(guided.data, again.data)


class TestGuidance:
    def phantom_box(self):
        # air everywhere with a denser box inside; the air border is what
        # anchors the per-view gain fit
        vol = torch.full((1, 1, 6, 5, 4), -1.0)
        vol[0, 0, 2:5, 1:4, 1:3] = 0.5
        return vol

    def observed(self, vol):
        def norm(img):
            lo, hi = img.min(), img.max()
            return (img - lo) / (hi - lo) * 2.0 - 1.0

        front = norm(vol.mean(dim=4)).transpose(-1, -2)
        side = norm(vol.mean(dim=3)).transpose(-1, -2)
        return front, side

    def test_consistent_volume_is_fixed_point(self):
        vol = self.phantom_box()
        front, side = self.observed(vol)
        out = project_consistent(vol.clone(), front, side, iters=4)
        assert float((out - vol).abs().max()) < 1e-6

    def test_projection_reduces_error(self):
        vol = self.phantom_box()
        front, side = self.observed(vol)
        torch.manual_seed(7)
        noisy = (vol + 0.3 * torch.randn_like(vol)).clamp(-1.0, 1.0)
        before = float((noisy - vol).pow(2).mean())
        proj = project_consistent(noisy, front, side, iters=3)
        after = float((proj - vol).pow(2).mean())
        assert after < 0.7 * before

    def test_all_air_is_untouched(self):
        vol = torch.full((1, 1, 4, 4, 4), -1.0)
        front = torch.full((1, 1, 4, 4), -1.0)
        side = torch.full((1, 1, 4, 4), -1.0)
        out = project_consistent(vol.clone(), front, side, iters=2)
        assert torch.equal(out, vol)


class TestIcmReg:
    def test_forward_shape_and_range(self):
        cfg = tiny_config()
        torch.manual_seed(stream_seed(0, STREAM_INIT))
        reg = build_regressor(cfg)
        from conftest import normalized_phantom

        pair = make_biplanar_pair(normalized_phantom(seed=2, size=16))
        out = icm_reg_forward(reg, pair)
        assert out.data.shape == (16, 16, 16)
        assert out.value_space == "normalized"
        assert out.data.min() >= -1.0 and out.data.max() <= 1.0

    def test_train_smoke(self):
        cfg = tiny_config()
        torch.manual_seed(stream_seed(0, STREAM_INIT))
        reg = build_regressor(cfg)
        opt = torch.optim.Adam(reg.parameters(), lr=1e-3)
        batch = phantom_batch(2, 16)
        losses = [
            icm_reg_train_step(batch, reg, opt, step=s, seed=0) for s in range(1, 101)
        ]
        assert losses[-1] < 0.3 * losses[0]

    def test_divergence_detection(self):
        cfg = tiny_config()
        reg = build_regressor(cfg)
        opt = torch.optim.Adam(reg.parameters(), lr=1e-3)
        y0, front, side = phantom_batch(2, 16)
        bad = front.clone()
        bad[0, 0, 0, 0] = float("inf")
        with pytest.raises(TrainingDivergenceError):
            icm_reg_train_step((y0, bad, side), reg, opt, step=1, seed=0)

    def test_decoder_requires_three_levels(self):
        from x2ct.implicit import ConditionSet

        dec = VolumeDecoder3d(4)
        with pytest.raises(ValueError):
            dec(ConditionSet(h=[torch.zeros(1, 4, 4, 4, 4)]))


class TestBuilders:
    def test_ablation_flags_select_conditioner(self):
        from x2ct.implicit import BaselineConditioner, ImplicitConditioner

        base = tiny_config()
        assert isinstance(build_conditioner(base), ImplicitConditioner)
        assert build_conditioner(base).generator.fusion == "modulated"
        cfg = tiny_config(ablation={"no_view_modulators": True})
        assert build_conditioner(cfg).generator.fusion == "plain_sum"
        cfg = tiny_config(ablation={"resnet_fusion": True})
        assert build_conditioner(cfg).generator.fusion == "resnet"
        cfg = tiny_config(ablation={"baseline_conditioning": True})
        assert isinstance(build_conditioner(cfg), BaselineConditioner)
        cfg = tiny_config(ablation={"no_learnable_embedding": True})
        assert build_conditioner(cfg).generator.embedding is None

    def test_build_models_deterministic(self):
        cfg = tiny_config()
        m1, i1 = build_models(cfg, 5)
        m2, i2 = build_models(cfg, 5)
        for k, v in m1.state_dict().items():
            assert torch.equal(v, m2.state_dict()[k])
        for k, v in i1.state_dict().items():
            assert torch.equal(v, i2.state_dict()[k])
        m3, _ = build_models(cfg, 6)
        assert any(
            not torch.equal(v, m3.state_dict()[k]) for k, v in m1.state_dict().items()
        )


class TestCheckpoint:
    def run_and_save(self, tmp_path, mode="diffusion"):
        cfg = tiny_config()
        batch = phantom_batch(2, 16)
        sched = make_schedule(cfg.schedule.T)
        if mode == "diffusion":
            model, icm = build_models(cfg, 0)
            opt = torch.optim.Adam(
                list(model.parameters()) + list(icm.parameters()), lr=cfg.train.lr
            )
            train_step(batch, model, icm, sched, opt, step=1, seed=0)
        else:
            torch.manual_seed(stream_seed(0, STREAM_INIT))
            model = build_regressor(cfg)
            icm = None
            opt = torch.optim.Adam(model.parameters(), lr=cfg.train.lr)
            icm_reg_train_step(batch, model, opt, step=1, seed=0)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(
            path, config=cfg, mode=mode, model=model, icm=icm, optimizer=opt,
            schedule=sched, rng_cursor={"seed": 0, "next_step": 2},
        )
        return cfg, model, icm, opt, sched, path

    def test_diffusion_roundtrip_bitwise(self, tmp_path):
        cfg, model, icm, opt, sched, path = self.run_and_save(tmp_path)
        bundle = load_checkpoint(path)
        assert bundle.mode == "diffusion"
        assert bundle.schedule.T == sched.T
        assert bundle.rng_cursor == {"seed": 0, "next_step": 2}
        assert bundle.ema is None
        assert bundle.config.to_dict() == cfg.to_dict()
        for k, v in model.state_dict().items():
            assert torch.equal(v, bundle.model.state_dict()[k])
        for k, v in icm.state_dict().items():
            assert torch.equal(v, bundle.icm.state_dict()[k])
        # optimizer moments survive
        a = opt.state_dict()["state"]
        b = bundle.optimizer.state_dict()["state"]
        assert set(a) == set(b)
        for idx in a:
            assert torch.equal(a[idx]["exp_avg"], b[idx]["exp_avg"])

    def test_resumed_training_matches_uninterrupted(self, tmp_path):
        cfg, model, icm, opt, sched, path = self.run_and_save(tmp_path)
        batch = phantom_batch(2, 16)
        train_step(batch, model, icm, sched, opt, step=2, seed=0)
        bundle = load_checkpoint(path)
        train_step(batch, bundle.model, bundle.icm, bundle.schedule, bundle.optimizer,
                   step=2, seed=0)
        for k, v in model.state_dict().items():
            assert torch.equal(v, bundle.model.state_dict()[k]), k

    def test_icm_reg_roundtrip(self, tmp_path):
        cfg, model, icm, opt, sched, path = self.run_and_save(tmp_path, mode="icm-reg")
        bundle = load_checkpoint(path)
        assert bundle.mode == "icm-reg"
        assert bundle.icm is None
        assert isinstance(bundle.model, IcmRegressor)
        for k, v in model.state_dict().items():
            assert torch.equal(v, bundle.model.state_dict()[k])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.pt")

    def test_wrong_format(self, tmp_path):
        path = tmp_path / "other.pt"
        torch.save({"format": "something-else"}, path)
        with pytest.raises(ValueError):
            load_checkpoint(path)
