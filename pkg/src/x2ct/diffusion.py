"""Noise schedules, diffusion training and sampling, and the regression variant.

Timesteps are 1-indexed: t runs over [1, T] and indexes beta[t-1].
Schedule tables are precomputed in float64 and cast to the working dtype
at the point of use, so the algebraic identities between q_sample and
predict_y0 hold tightly even for long schedules.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import config as config_mod
from .denoiser import DenoiserUNet3d, ResBlock3d, _norm3d
from .determinism import (
    STREAM_EPS,
    STREAM_INIT,
    STREAM_TIMESTEP,
    STREAM_Z,
    stream_seed,
    torch_generator,
    working_dtype,
)
from .errors import TrainingDivergenceError
from .implicit import BaselineConditioner, ConditionSet, ImplicitConditioner
from .projections import BiplanarPair, mean_project
from .volumes import CtVolume

VARIANCE_MODES = ("beta", "posterior")


@dataclass
class NoiseSchedule:
    """Forward-process tables; all tensors are float64 of length T."""

    T: int
    kind: str
    variance: str
    beta: torch.Tensor
    alpha_bar: torch.Tensor
    sigma: torch.Tensor

    def validate(self) -> None:
        if self.T < 1 or self.beta.shape != (self.T,):
            raise ValueError("schedule length mismatch")
        if ((self.beta <= 0) | (self.beta >= 1)).any():
            raise ValueError("betas must lie strictly inside (0, 1)")
        if (self.alpha_bar.diff() >= 0).any():
            raise ValueError("alpha_bar must be strictly decreasing")


def make_schedule(T: int, kind: str = "linear", variance: str = "beta") -> NoiseSchedule:
    """Linear beta schedule retimed to T steps.

    The canonical 1000-step endpoints (1e-4, 0.02) are scaled by 1000/T
    and clamped below 1, which preserves the total noise budget when T
    is shortened.
    """
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if variance not in VARIANCE_MODES:
        raise ValueError(f"variance must be one of {VARIANCE_MODES}")
    if T < 1:
        raise ValueError("T must be at least 1")
    scale = 1000.0 / T
    beta = torch.linspace(scale * 1e-4, scale * 0.02, T, dtype=torch.float64)
    beta = beta.clamp(max=0.999)
    alpha_bar = torch.cumprod(1.0 - beta, dim=0)
    if variance == "beta":
        sigma2 = beta.clone()
    else:
        prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
        sigma2 = beta * (1.0 - prev) / (1.0 - alpha_bar)
    sched = NoiseSchedule(
        T=T, kind=kind, variance=variance, beta=beta, alpha_bar=alpha_bar,
        sigma=torch.sqrt(sigma2),
    )
    sched.validate()
    return sched


def _gather(table: torch.Tensor, t, T: int, ndim: int) -> torch.Tensor:
    """Look up per-item schedule entries for 1-indexed t, shaped to broadcast."""
    t_idx = torch.as_tensor(t, dtype=torch.int64, device=table.device) - 1
    if (t_idx < 0).any() or (t_idx >= T).any():
        raise ValueError(f"t must lie in [1, {T}]")
    vals = table[t_idx]
    if vals.ndim == 0:
        return vals
    return vals.reshape(vals.shape[0], *([1] * (ndim - 1)))


def q_sample(y0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward marginal: sqrt(a_bar_t) * y0 + sqrt(1 - a_bar_t) * eps."""
    ab = _gather(schedule.alpha_bar, t, schedule.T, y0.ndim)
    c0 = torch.sqrt(ab).to(y0.dtype)
    c1 = torch.sqrt(1.0 - ab).to(y0.dtype)
    return c0 * y0 + c1 * eps


PREDICT_Y0_MODES = ("standard", "paper_exact")


def predict_y0(
    y_t: torch.Tensor,
    t,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
    mode: str = "standard",
) -> torch.Tensor:
    """Invert the forward marginal to estimate the clean volume.

    "standard" divides out the sqrt(1 - a_bar_t) noise coefficient and is
    the exact inverse of q_sample. "paper_exact" applies the coefficient
    (1 - a_bar_t) to eps_hat instead; it is kept behind this flag for
    comparison and is not an exact inverse.
    """
    if mode not in PREDICT_Y0_MODES:
        raise ValueError(f"mode must be one of {PREDICT_Y0_MODES}")
    ab = _gather(schedule.alpha_bar, t, schedule.T, y_t.ndim)
    noise_coef = torch.sqrt(1.0 - ab) if mode == "standard" else (1.0 - ab)
    return (y_t - noise_coef.to(y_t.dtype) * eps_hat) / torch.sqrt(ab).to(y_t.dtype)


def p_sample_step(
    y_t: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
    noise: torch.Tensor | None = None,
    *,
    clip_y0: bool = False,
) -> torch.Tensor:
    """One ancestral reverse step from t to t-1.

    With clip_y0 the posterior mean is formed from the implied clean
    estimate projected into [-1, 1]; identical to the raw form while the
    estimate stays in range, and much more stable on short chains when
    it does not. No noise is added at t=1 regardless of the noise
    argument. A zero beta (test-only schedules) makes the step an exact
    identity in both forms.
    """
    t = int(t)
    if not (1 <= t <= schedule.T):
        raise ValueError(f"t must lie in [1, {schedule.T}]")
    beta = float(schedule.beta[t - 1])
    ab = float(schedule.alpha_bar[t - 1])
    one_m_ab = 1.0 - ab
    dtype = y_t.dtype
    if clip_y0 and one_m_ab > 0:
        y0_hat = (y_t - torch.as_tensor(one_m_ab**0.5, dtype=dtype) * eps_hat) / torch.as_tensor(
            ab**0.5, dtype=dtype
        )
        y0_hat = y0_hat.clamp(-1.0, 1.0)
        ab_prev = float(schedule.alpha_bar[t - 2]) if t > 1 else 1.0
        c0 = ab_prev**0.5 * beta / one_m_ab
        c1 = (1.0 - beta) ** 0.5 * (1.0 - ab_prev) / one_m_ab
        mean = torch.as_tensor(c0, dtype=dtype) * y0_hat + torch.as_tensor(c1, dtype=dtype) * y_t
    else:
        coef = beta / one_m_ab**0.5 if one_m_ab > 0 else 0.0
        mean = (y_t - torch.as_tensor(coef, dtype=dtype) * eps_hat) / torch.as_tensor(
            (1.0 - beta) ** 0.5, dtype=dtype
        )
    if t == 1 or noise is None:
        return mean
    return mean + torch.as_tensor(float(schedule.sigma[t - 1]), dtype=dtype) * noise


def _view_gain_target(obs: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    # The observed radiograph is min-max normalized, so only its shape is
    # trustworthy. Rays at the observed minimum pass through air alone,
    # which pins the offset; a single gain per view remains free and is
    # fitted to the current estimate by least squares.
    f = obs + 1.0
    num = (f * (m + 1.0)).sum(dim=(1, 2, 3), keepdim=True)
    den = (f * f).sum().clamp_min(1e-12)
    return (num / den) * f - 1.0


def project_consistent(
    y0: torch.Tensor,
    front: torch.Tensor,
    side: torch.Tensor,
    iters: int = 3,
) -> torch.Tensor:
    """Pull a clean estimate toward agreement with the observed pair.

    Alternating projection onto the two affine sets whose axis means
    match the air-anchored gain fit of each observed view: front
    (..., H, D) constrains the mean over W, side (..., W, D) the mean
    over H. y0 is (B, 1, D, H, W) and only the components visible to the
    two views are touched.
    """
    fo = front.transpose(-1, -2)
    so = side.transpose(-1, -2)
    for _ in range(iters):
        m = y0.mean(dim=4)
        y0 = y0 - (m - _view_gain_target(fo, m)).unsqueeze(4)
        m = y0.mean(dim=3)
        y0 = y0 - (m - _view_gain_target(so, m)).unsqueeze(3)
    return y0


@torch.no_grad()
def sample(
    model: DenoiserUNet3d,
    icm: nn.Module,
    pair: BiplanarPair,
    schedule: NoiseSchedule,
    seed: int,
    *,
    spacing_mm: tuple = (1.0, 1.0, 1.0),
    dtype: torch.dtype | None = None,
    guidance_iters: int = 3,
) -> CtVolume:
    """Ancestral sampling of one volume conditioned on a biplanar pair.

    The condition grids are computed once and reused across all T steps.
    Each step projects the implied clean estimate onto consistency with
    the observed pair (guidance_iters alternating passes, 0 disables);
    reconstruction from projections is an inverse problem, and holding
    the chain to the measured views corrects drift the denoiser alone
    does not see. The same seed always produces the bit-identical
    volume.
    """
    dtype = dtype or working_dtype()
    was_training = (model.training, icm.training)
    model.eval()
    icm.eval()
    try:
        front = torch.as_tensor(pair.front, dtype=dtype).unsqueeze(0).unsqueeze(0)
        side = torch.as_tensor(pair.side, dtype=dtype).unsqueeze(0).unsqueeze(0)
        d = front.shape[-1]
        h, w = front.shape[-2], side.shape[-2]
        shape = (1, 1, d, h, w)
        cond = icm(front, side, model.feature_shapes((d, h, w)))
        gen = torch_generator(seed, "sample")
        y = torch.randn(shape, generator=gen, dtype=dtype)
        for t in range(schedule.T, 0, -1):
            eps_hat = model(y, t, cond)
            if guidance_iters > 0:
                ab = float(schedule.alpha_bar[t - 1])
                y0_hat = predict_y0(y, t, eps_hat, schedule).clamp(-1.0, 1.0)
                y0_hat = project_consistent(
                    y0_hat, front, side, guidance_iters
                ).clamp(-1.0, 1.0)
                eps_hat = (y - ab**0.5 * y0_hat) / (1.0 - ab) ** 0.5
            noise = torch.randn(shape, generator=gen, dtype=dtype) if t > 1 else None
            y = p_sample_step(y, t, eps_hat, schedule, noise, clip_y0=True)
    finally:
        model.train(was_training[0])
        icm.train(was_training[1])
    vol = y.squeeze(0).squeeze(0).clamp(-1.0, 1.0).to(torch.float32).numpy()
    return CtVolume(vol, spacing_mm, "normalized")


def loss_simple(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between true and predicted noise."""
    return (eps - eps_hat).abs().mean()


def loss_proj(y0: torch.Tensor, y0_hat: torch.Tensor) -> torch.Tensor:
    """Mean projection consistency over the three orthogonal axes.

    Inputs are (B, 1, D, H, W); each axis is collapsed by its mean
    projection and the three mean absolute errors are averaged.
    """
    if y0.ndim != 5 or y0_hat.shape != y0.shape:
        raise ValueError("loss_proj expects matching (B, 1, D, H, W) tensors")
    total = y0.new_zeros(())
    for dim in (2, 3, 4):
        total = total + (mean_project(y0, dim) - mean_project(y0_hat, dim)).abs().mean()
    return total / 3.0


def resolve_lambda(schedule: NoiseSchedule) -> float:
    """Projection-loss weight, tied to the schedule length as 1/T."""
    return 1.0 / schedule.T


@dataclass
class LossReport:
    """Scalar losses from one optimization step; total = simple + lam * proj."""

    step: int
    simple: float
    proj: float
    lam: float
    total: float


def train_step(
    batch: tuple,
    model: DenoiserUNet3d,
    icm: nn.Module,
    schedule: NoiseSchedule,
    optimizer: torch.optim.Optimizer,
    *,
    step: int,
    seed: int,
    lam: float | None = None,
    predict_mode: str = "standard",
    use_proj_loss: bool = True,
) -> LossReport:
    """One conditional-diffusion optimization step.

    batch is (y0, front, side) with y0 normalized (B, 1, D, H, W).
    Timesteps, forward noise, and train-time perturbations (dropout and
    embedding noise) each come from a named stream of (seed, step), so a
    step is reproducible in isolation.
    """
    y0, front, side = batch
    if y0.ndim != 5:
        raise ValueError("y0 must be (B, 1, D, H, W)")
    b = y0.shape[0]
    t = torch.randint(
        1, schedule.T + 1, (b,), generator=torch_generator(seed, STREAM_TIMESTEP, step)
    )
    eps = torch.randn(
        y0.shape, generator=torch_generator(seed, STREAM_EPS, step), dtype=y0.dtype
    )
    torch.manual_seed(stream_seed(seed, STREAM_Z, step))
    model.train()
    icm.train()
    cond = icm(front, side, model.feature_shapes(tuple(y0.shape[2:])))
    y_t = q_sample(y0, t, eps, schedule)
    eps_hat = model(y_t, t, cond)
    l_simple = loss_simple(eps, eps_hat)
    lam = resolve_lambda(schedule) if lam is None else float(lam)
    if use_proj_loss:
        y0_hat = predict_y0(y_t, t, eps_hat, schedule, mode=predict_mode).clamp(-1.0, 1.0)
        l_proj = loss_proj(y0, y0_hat)
    else:
        l_proj = y0.new_zeros(())
    loss = l_simple + lam * l_proj
    if not torch.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite loss at step {step}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    simple_f, proj_f = float(l_simple.detach()), float(l_proj.detach())
    return LossReport(
        step=step, simple=simple_f, proj=proj_f, lam=lam, total=simple_f + lam * proj_f
    )


class _PlainRes3d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.norm1 = _norm3d(in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.norm2 = _norm3d(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class VolumeDecoder3d(nn.Module):
    """Decodes the condition pyramid straight to a volume (regression path)."""

    def __init__(self, cond_channels: int, width: int | None = None):
        super().__init__()
        c = cond_channels
        m = width or 2 * c
        self.block_deep = _PlainRes3d(c, m)
        self.block_mid = _PlainRes3d(m + c, m)
        self.block_full = _PlainRes3d(m + c, m)
        self.out_norm = _norm3d(m)
        self.out_conv = nn.Conv3d(m, 1, 3, padding=1)

    def forward(self, cond: ConditionSet) -> torch.Tensor:
        if len(cond) != 3:
            raise ValueError("VolumeDecoder3d expects a 3-level condition pyramid")
        h1, h2, h3 = cond.h
        x = self.block_deep(h3)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.block_mid(torch.cat([x, h2], dim=1))
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.block_full(torch.cat([x, h1], dim=1))
        return self.out_conv(F.silu(self.out_norm(x)))


class IcmRegressor(nn.Module):
    """Deterministic one-shot reconstructor sharing the conditioning stack."""

    def __init__(self, conditioner: nn.Module, decoder: VolumeDecoder3d):
        super().__init__()
        self.conditioner = conditioner
        self.decoder = decoder

    def forward(self, front: torch.Tensor, side: torch.Tensor, shape: tuple) -> torch.Tensor:
        d, h, w = shape
        stage_shapes = [(d >> i, h >> i, w >> i) for i in range(3)]
        cond = self.conditioner(front, side, stage_shapes)
        return self.decoder(cond)


def icm_reg_forward(regressor: IcmRegressor, pair: BiplanarPair, *, spacing_mm=(1.0, 1.0, 1.0),
                    dtype: torch.dtype | None = None) -> CtVolume:
    """Reconstruct one volume from a biplanar pair with the regression model."""
    dtype = dtype or working_dtype()
    was_training = regressor.training
    regressor.eval()
    try:
        with torch.no_grad():
            front = torch.as_tensor(pair.front, dtype=dtype)[None, None]
            side = torch.as_tensor(pair.side, dtype=dtype)[None, None]
            d = front.shape[-1]
            pred = regressor(front, side, (d, front.shape[-2], side.shape[-2]))
    finally:
        regressor.train(was_training)
    vol = pred.squeeze(0).squeeze(0).clamp(-1.0, 1.0).to(torch.float32).numpy()
    return CtVolume(vol, spacing_mm, "normalized")


def icm_reg_train_step(
    batch: tuple,
    regressor: IcmRegressor,
    optimizer: torch.optim.Optimizer,
    *,
    step: int,
    seed: int,
) -> float:
    """One L1 regression step; returns the scalar loss."""
    y0, front, side = batch
    torch.manual_seed(stream_seed(seed, STREAM_Z, step))
    regressor.train()
    pred = regressor(front, side, tuple(y0.shape[2:]))
    loss = (pred - y0).abs().mean()
    if not torch.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite loss at step {step}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def build_conditioner(cfg, *, dtype: torch.dtype | None = None) -> nn.Module:
    """Construct the conditioning network an ExperimentConfig describes."""
    dtype = dtype or working_dtype()
    m, abl = cfg.model, cfg.ablation
    if abl.baseline_conditioning:
        cond = BaselineConditioner(m.icm_channels, n_levels=3)
    else:
        if abl.resnet_fusion:
            fusion = "resnet"
        elif abl.no_view_modulators:
            fusion = "plain_sum"
        else:
            fusion = "modulated"
        cond = ImplicitConditioner(
            m.icm_channels,
            n_levels=3,
            fusion=fusion,
            use_embedding=not abl.no_learnable_embedding,
            noise_sigma=m.noise_sigma,
            transpose_vw=m.transpose_vw,
            per_level_mlp=m.per_level_mlp,
        )
    return cond.to(dtype)


def build_denoiser(cfg, *, dtype: torch.dtype | None = None) -> DenoiserUNet3d:
    dtype = dtype or working_dtype()
    m = cfg.model
    net = DenoiserUNet3d(
        base_channels=m.base_channels,
        channel_multipliers=tuple(m.channel_multipliers),
        cond_channels=m.icm_channels,
        n_stages=3,
        window=tuple(m.window_size),
        num_heads=m.num_heads,
        time_embed_dim=m.time_embed_dim,
        dropout=m.dropout,
    )
    return net.to(dtype)


def build_regressor(cfg, *, dtype: torch.dtype | None = None) -> IcmRegressor:
    dtype = dtype or working_dtype()
    reg = IcmRegressor(build_conditioner(cfg, dtype=dtype), VolumeDecoder3d(cfg.model.icm_channels))
    return reg.to(dtype)


def build_models(cfg, seed: int, *, dtype: torch.dtype | None = None):
    """Deterministically initialize (denoiser, conditioner) for a config."""
    torch.manual_seed(stream_seed(seed, STREAM_INIT))
    return build_denoiser(cfg, dtype=dtype), build_conditioner(cfg, dtype=dtype)


CHECKPOINT_FORMAT = "x2ct-checkpoint-v1"


def load_ema_weights(ema: dict, model: nn.Module, icm: nn.Module | None) -> None:
    """Copy averaged weights (prefix-keyed "model."/"icm." entries) into
    the live modules. Use for inference; raw weights stay in the
    checkpoint's model_state for resuming."""
    model.load_state_dict(
        {k[len("model."):]: v for k, v in ema.items() if k.startswith("model.")}
    )
    if icm is not None:
        icm.load_state_dict(
            {k[len("icm."):]: v for k, v in ema.items() if k.startswith("icm.")}
        )


@dataclass
class CheckpointBundle:
    config: object
    mode: str
    model: nn.Module
    icm: nn.Module | None
    optimizer: torch.optim.Optimizer
    schedule: NoiseSchedule
    rng_cursor: dict
    ema: dict | None = None


def save_checkpoint(
    path,
    *,
    config,
    mode: str,
    model: nn.Module,
    icm: nn.Module | None,
    optimizer: torch.optim.Optimizer,
    schedule: NoiseSchedule,
    rng_cursor: dict,
    ema: dict | None = None,
) -> None:
    """Serialize everything needed to resume or sample: parameters,
    optimizer state, schedule parameters, config, the RNG cursor, and
    the averaged weights when the trainer keeps them."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "mode": mode,
        "config": config.to_dict(),
        "schedule": {"T": schedule.T, "kind": schedule.kind, "variance": schedule.variance},
        "model_state": model.state_dict(),
        "icm_state": icm.state_dict() if icm is not None else None,
        "optimizer_state": optimizer.state_dict(),
        "rng_cursor": dict(rng_cursor),
        "ema_state": ema,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> CheckpointBundle:
    import os

    if not os.path.exists(path):
        raise FileNotFoundError(str(path))
    payload = torch.load(path, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a recognized checkpoint: {path}")
    cfg = config_mod.ExperimentConfig.from_dict(payload["config"])
    schedule = make_schedule(**payload["schedule"])
    state = payload["model_state"]
    dtype = next(iter(state.values())).dtype
    mode = payload["mode"]
    if mode == "diffusion":
        model = build_denoiser(cfg, dtype=dtype)
        icm = build_conditioner(cfg, dtype=dtype)
        model.load_state_dict(state)
        icm.load_state_dict(payload["icm_state"])
        params = list(model.parameters()) + list(icm.parameters())
    elif mode == "icm-reg":
        model = build_regressor(cfg, dtype=dtype)
        icm = None
        model.load_state_dict(state)
        params = list(model.parameters())
    else:
        raise ValueError(f"unknown checkpoint mode {mode!r}")
    optimizer = torch.optim.Adam(params, lr=cfg.train.lr)
    optimizer.load_state_dict(payload["optimizer_state"])
    return CheckpointBundle(
        config=cfg,
        mode=mode,
        model=model,
        icm=icm,
        optimizer=optimizer,
        schedule=schedule,
        rng_cursor=payload["rng_cursor"],
        ema=payload.get("ema_state"),
    )
