"""Dataset loading and the training loop shared by the CLI and tests."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import diffusion
from .config import ExperimentConfig, save_config
from .determinism import STREAM_DATA, numpy_rng, stream_seed, working_dtype
from .errors import FormatError
from .projections import BiplanarPair, DrrGeometry, load_projection
from .volumes import CtVolume, load_volume

MODES = ("diffusion", "icm-reg")


@dataclass
class DatasetItem:
    item_id: str
    volume: CtVolume
    pair: BiplanarPair


def geometry_from_config(cfg: ExperimentConfig) -> DrrGeometry:
    drr = cfg.drr
    return DrrGeometry(
        mode=drr.mode,
        source_distance_mm=drr.source_distance_mm if drr.mode == "cone" else None,
        step_mm=drr.step_mm,
        exponential=drr.exponential,
        exposure_k=drr.exposure_k,
    )


def write_manifest(path: Path, items: list[dict], **extra) -> None:
    doc = {"items": items, **extra}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {path}") from exc
    if "items" not in doc or not isinstance(doc["items"], list):
        raise FormatError(f"manifest has no item list: {path}")
    return doc


def load_dataset(data_dir) -> list[DatasetItem]:
    """Load a directory of normalized volumes with biplanar projections."""
    data_dir = Path(data_dir)
    doc = read_manifest(data_dir)
    geom = DrrGeometry(**doc["geometry"]) if "geometry" in doc else DrrGeometry()
    items = []
    for entry in doc["items"]:
        for key in ("id", "volume", "front", "side"):
            if key not in entry:
                raise FormatError(f"manifest item missing key {key!r}")
        vol = load_volume(data_dir / entry["volume"])
        if vol.value_space != "normalized":
            raise FormatError(f"dataset volume {entry['id']} is not normalized")
        front, view_f = load_projection(data_dir / entry["front"])
        side, view_s = load_projection(data_dir / entry["side"])
        if (view_f, view_s) != ("front", "side"):
            raise FormatError(f"projection views mislabeled for item {entry['id']}")
        pair = BiplanarPair(front=front, side=side, geometry=geom)
        items.append(DatasetItem(item_id=entry["id"], volume=vol, pair=pair))
    if not items:
        raise FormatError(f"dataset at {data_dir} is empty")
    return items


def dataset_tensors(items: list[DatasetItem], dtype: torch.dtype):
    y0 = torch.stack(
        [torch.as_tensor(it.volume.data, dtype=dtype) for it in items]
    ).unsqueeze(1)
    front = torch.stack(
        [torch.as_tensor(it.pair.front, dtype=dtype) for it in items]
    ).unsqueeze(1)
    side = torch.stack(
        [torch.as_tensor(it.pair.side, dtype=dtype) for it in items]
    ).unsqueeze(1)
    return y0, front, side


class Trainer:
    """Owns the models, optimizer, and log for one training run.

    The run directory receives a config snapshot up front, a JSONL loss
    log while training, and checkpoint.pt at the end (or wherever
    save() is called).
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        data_dir,
        out_dir,
        *,
        mode: str = "diffusion",
        seed: int | None = None,
        dtype: torch.dtype | None = None,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        cfg.validate()
        self.cfg = cfg
        self.mode = mode
        self.seed = cfg.train.seed if seed is None else int(seed)
        self.dtype = dtype or working_dtype()
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, self.out_dir / "config.json")

        self.items = load_dataset(data_dir)
        self.y0, self.front, self.side = dataset_tensors(self.items, self.dtype)
        self.schedule = diffusion.make_schedule(
            cfg.schedule.T, cfg.schedule.kind, cfg.schedule.variance
        )
        torch.manual_seed(stream_seed(self.seed, "init"))
        if mode == "diffusion":
            self.model = diffusion.build_denoiser(cfg, dtype=self.dtype)
            self.icm = diffusion.build_conditioner(cfg, dtype=self.dtype)
            params = list(self.model.parameters()) + list(self.icm.parameters())
        else:
            self.model = diffusion.build_regressor(cfg, dtype=self.dtype)
            self.icm = None
            params = list(self.model.parameters())
        self.optimizer = torch.optim.Adam(params, lr=cfg.train.lr)
        self.ema = self._ema_init()
        self.next_step = 0
        self._log_path = self.out_dir / "train_log.jsonl"
        self._log_lines: list[str] = []

    def _ema_modules(self):
        return (("model.", self.model), ("icm.", self.icm))

    def _ema_init(self):
        if self.mode != "diffusion" or self.cfg.train.ema_decay <= 0:
            return None
        shadow = {}
        for prefix, module in self._ema_modules():
            for name, tensor in module.state_dict().items():
                shadow[prefix + name] = tensor.detach().clone()
        return shadow

    def _ema_update(self) -> None:
        d = self.cfg.train.ema_decay
        for prefix, module in self._ema_modules():
            for name, tensor in module.state_dict().items():
                shadow = self.ema[prefix + name]
                if shadow.dtype.is_floating_point:
                    shadow.mul_(d).add_(tensor.detach(), alpha=1.0 - d)
                else:
                    shadow.copy_(tensor)

    def _batch(self, step: int):
        n = self.y0.shape[0]
        rng = numpy_rng(self.seed, STREAM_DATA, step)
        idx = torch.as_tensor(rng.integers(0, n, size=self.cfg.train.batch_size))
        return self.y0[idx], self.front[idx], self.side[idx]

    def lr_for(self, step: int) -> float:
        """Learning rate at a given step (pure function of the config)."""
        base = self.cfg.train.lr
        if self.cfg.train.lr_schedule == "cosine":
            frac = min(step / max(1, self.cfg.train.iterations), 1.0)
            return base * 0.5 * (1.0 + math.cos(math.pi * frac))
        return base

    def step(self, step: int):
        """Run one optimization step and return its LossReport."""
        lr = self.lr_for(step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        batch = self._batch(step)
        if self.mode == "diffusion":
            report = diffusion.train_step(
                batch,
                self.model,
                self.icm,
                self.schedule,
                self.optimizer,
                step=step,
                seed=self.seed,
                lam=self.cfg.resolved_lambda(),
                predict_mode=self.cfg.loss.predict_y0_mode,
                use_proj_loss=not self.cfg.ablation.no_proj_loss,
            )
        else:
            l1 = diffusion.icm_reg_train_step(
                batch, self.model, self.optimizer, step=step, seed=self.seed
            )
            report = diffusion.LossReport(step=step, simple=l1, proj=0.0, lam=0.0, total=l1)
        if self.ema is not None:
            self._ema_update()
        self.next_step = step + 1
        return report

    def _log(self, report) -> None:
        line = json.dumps(
            {
                "step": report.step,
                "simple": report.simple,
                "proj": report.proj,
                "total": report.total,
                "lr": self.lr_for(report.step),
                "seed": self.seed,
            },
            sort_keys=True,
        )
        self._log_lines.append(line)

    def train(self, callback=None, callback_every: int = 0):
        """Run the configured number of steps.

        callback(trainer, step) is invoked every callback_every steps
        (and after the final step); returning True stops training early.
        Returns the final LossReport (None when iterations == 0).
        """
        report = None
        iters = self.cfg.train.iterations
        for step in range(self.next_step, iters):
            report = self.step(step)
            if step % self.cfg.train.log_every == 0 or step == iters - 1:
                self._log(report)
            if callback is not None and callback_every > 0 and (
                (step + 1) % callback_every == 0 or step == iters - 1
            ):
                if callback(self, step):
                    break
        self.save()
        return report

    def save(self) -> Path:
        self._log_path.write_text(
            "".join(line + "\n" for line in self._log_lines)
        )
        ckpt = self.out_dir / "checkpoint.pt"
        diffusion.save_checkpoint(
            ckpt,
            config=self.cfg,
            mode=self.mode,
            model=self.model,
            icm=self.icm,
            optimizer=self.optimizer,
            schedule=self.schedule,
            rng_cursor={"seed": self.seed, "next_step": self.next_step},
            ema=self.ema,
        )
        return ckpt

    def reconstruct(self, index: int, sample_seed: int) -> CtVolume:
        """Reconstruct one training item.

        Diffusion mode samples with the averaged weights when EMA is on
        (the raw weights are restored bitwise afterwards so training is
        unaffected).
        """
        item = self.items[index]
        spacing = item.volume.spacing_mm
        if self.mode == "diffusion":
            raw = None
            if self.ema is not None:
                raw = {
                    prefix: {
                        k: v.detach().clone()
                        for k, v in module.state_dict().items()
                    }
                    for prefix, module in self._ema_modules()
                }
                diffusion.load_ema_weights(self.ema, self.model, self.icm)
            try:
                return diffusion.sample(
                    self.model,
                    self.icm,
                    item.pair,
                    self.schedule,
                    sample_seed,
                    spacing_mm=spacing,
                    dtype=self.dtype,
                )
            finally:
                if raw is not None:
                    self.model.load_state_dict(raw["model."])
                    self.icm.load_state_dict(raw["icm."])
        return diffusion.icm_reg_forward(
            self.model, item.pair, spacing_mm=spacing, dtype=self.dtype
        )
