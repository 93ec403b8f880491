"""Command-line harness: data synthesis, training, sampling, evaluation.

Every subcommand is deterministic under a fixed --seed: running a
command twice with the same inputs produces byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import diffusion, metrics
from .config import ExperimentConfig, load_config
from .determinism import stream_seed
from .errors import ConfigError, FormatError, TrainingDivergenceError
from .projections import BiplanarPair, drr_project, export_png, load_projection, save_projection
from .trainer import Trainer, geometry_from_config, load_dataset, write_manifest
from .volumes import (
    CtVolume,
    ImplantSpec,
    PhantomSpec,
    clip_and_normalize,
    denormalize,
    generate_phantom,
    load_volume,
    save_volume,
)


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    return cfg


def cmd_make_phantoms(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.n if args.n is not None else cfg.data.n_train
    root = args.seed if args.seed is not None else cfg.data.phantom_seed
    items = []
    for i in range(n):
        spec = PhantomSpec(
            seed=stream_seed(root, "phantom", i),
            size=cfg.data.size,
            n_ellipsoids=cfg.data.n_ellipsoids,
            density_range=tuple(cfg.data.density_range),
            implant=(
                ImplantSpec()
                if cfg.data.implant_every > 0 and i % cfg.data.implant_every == 0
                else None
            ),
            spacing_mm=cfg.data.spacing_mm,
        )
        vol = generate_phantom(spec)
        name = f"phantom_{i:03d}.raw"
        save_volume(vol, out / name)
        items.append({"id": f"phantom_{i:03d}", "volume": name})
    write_manifest(out / "manifest.json", items, value_space="hounsfield", seed=root)
    print(f"wrote {n} phantoms to {out}")
    return 0


def cmd_synthesize_drr(args) -> int:
    cfg = _load_cfg(args)
    data_dir = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    geom = geometry_from_config(cfg)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    items = []
    for entry in manifest["items"]:
        vol = load_volume(data_dir / entry["volume"])
        if vol.value_space == "hounsfield":
            vol = clip_and_normalize(vol)
        base = entry["id"]
        front = drr_project(vol, "front", geom)
        side = drr_project(vol, "side", geom)
        save_volume(vol, out / f"{base}.raw")
        save_projection(front, "front", out / f"{base}_front.raw")
        save_projection(side, "side", out / f"{base}_side.raw")
        items.append(
            {
                "id": base,
                "volume": f"{base}.raw",
                "front": f"{base}_front.raw",
                "side": f"{base}_side.raw",
            }
        )
    write_manifest(
        out / "manifest.json",
        items,
        value_space="normalized",
        geometry=dataclasses.asdict(geom),
    )
    print(f"wrote {len(items)} biplanar pairs to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    trainer = Trainer(cfg, args.data, args.out, mode=args.mode, seed=args.seed)
    report = trainer.train()
    if report is not None:
        print(
            f"finished at step {report.step}: total={report.total:.5f} "
            f"simple={report.simple:.5f} proj={report.proj:.5f}"
        )
    print(f"checkpoint at {Path(args.out) / 'checkpoint.pt'}")
    return 0


def cmd_sample(args) -> int:
    bundle = diffusion.load_checkpoint(args.checkpoint)
    if bundle.ema is not None:
        diffusion.load_ema_weights(bundle.ema, bundle.model, bundle.icm)
    front, view_f = load_projection(args.front)
    side, view_s = load_projection(args.side)
    if (view_f, view_s) != ("front", "side"):
        raise FormatError("projections must be labeled front and side")
    pair = BiplanarPair(front=front, side=side, geometry=geometry_from_config(bundle.config))
    spacing = (bundle.config.data.spacing_mm,) * 3
    seed = args.seed if args.seed is not None else 0
    if bundle.mode == "diffusion":
        vol = diffusion.sample(
            bundle.model, bundle.icm, pair, bundle.schedule, seed, spacing_mm=spacing
        )
    else:
        vol = diffusion.icm_reg_forward(bundle.model, pair, spacing_mm=spacing)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(vol, out)
    print(f"sampled volume -> {out}")
    return 0


def _evaluate_items(bundle, items, seed: int):
    cfg = bundle.config
    rows = []
    for i, item in enumerate(items):
        spacing = item.volume.spacing_mm
        if bundle.mode == "diffusion":
            recon = diffusion.sample(
                bundle.model,
                bundle.icm,
                item.pair,
                bundle.schedule,
                stream_seed(seed, "sample", i),
                spacing_mm=spacing,
            )
        else:
            recon = diffusion.icm_reg_forward(bundle.model, item.pair, spacing_mm=spacing)
        dice_masks = None
        if cfg.eval.with_dice:
            thr = cfg.eval.dice_threshold_hu
            dice_masks = (
                denormalize(recon).data > thr,
                denormalize(item.volume).data > thr,
            )
        report = metrics.compute_report(
            recon.data, item.volume.data, data_range=2.0, dice_masks=dice_masks
        )
        rows.append((item.item_id, report))
    return rows


def _write_metric_rows(rows, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    docs = []
    for item_id, report in rows:
        doc = {"volume_id": item_id}
        doc.update(report.to_dict())
        docs.append(doc)
    (out_dir / "metrics.json").write_text(json.dumps(docs, indent=2, sort_keys=True) + "\n")
    fields = ["volume_id", "psnr_2d_avg", "psnr_3d", "ssim_2d_avg", "ssim_3d", "dice"]
    with (out_dir / "metrics.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for item_id, report in rows:
            d = report.to_dict()
            writer.writerow(
                [item_id] + [_fmt(d[k]) for k in fields[1:]]
            )
    agg = {
        k: float(np.mean([r.to_dict()[k] for _, r in rows]))
        for k in ("psnr_2d_avg", "psnr_3d", "ssim_2d_avg", "ssim_3d")
    }
    (out_dir / "summary.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.6f}"


def cmd_evaluate(args) -> int:
    bundle = diffusion.load_checkpoint(args.checkpoint)
    if bundle.ema is not None:
        diffusion.load_ema_weights(bundle.ema, bundle.model, bundle.icm)
    items = load_dataset(args.data)
    seed = args.seed if args.seed is not None else bundle.config.train.seed
    rows = _evaluate_items(bundle, items, seed)
    _write_metric_rows(rows, Path(args.out))
    mean_psnr = float(np.mean([r.psnr_3d for _, r in rows]))
    print(f"evaluated {len(rows)} volumes, mean psnr_3d={mean_psnr:.3f} dB -> {args.out}")
    return 0


def cmd_render(args) -> int:
    vol = load_volume(args.volume)
    d, h, w = vol.shape
    window = (-1.0, 1.0) if vol.value_space == "normalized" else (-1024.0, 1500.0)
    slices = [
        vol.data[d // 2, :, :],  # axial
        vol.data[:, h // 2, :],  # coronal
        vol.data[:, :, w // 2],  # sagittal
    ]
    gap = 2
    width = max(s.shape[1] for s in slices)
    total_h = sum(s.shape[0] for s in slices) + gap * (len(slices) - 1)
    canvas = np.full((total_h, width), window[0], dtype=np.float64)
    y = 0
    for s in slices:
        canvas[y : y + s.shape[0], : s.shape[1]] = s
        y += s.shape[0] + gap
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_png(canvas, out, value_range=window)
    print(f"rendered {args.volume} -> {out}")
    return 0


ABLATION_VARIANTS = [
    ("baseline", {"baseline_conditioning": True}),
    ("no_proj_loss", {"no_proj_loss": True}),
    ("no_view_modulators", {"no_view_modulators": True}),
    ("no_learnable_embedding", {"no_learnable_embedding": True}),
    ("resnet_fusion", {"resnet_fusion": True}),
    ("full", {}),
]


def run_ablation(cfg: ExperimentConfig, data_dir, out_dir, seed: int | None = None) -> Path:
    """Train every ablation variant from one seed and tabulate PSNR/SSIM.

    Returns the path of the six-row CSV. Each variant trains with the
    identical seed and data; only the ablation flags differ.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root_seed = cfg.train.seed if seed is None else seed
    results = []
    for name, flags in ABLATION_VARIANTS:
        doc = cfg.to_dict()
        doc["ablation"] = {**doc["ablation"], **flags}
        variant_cfg = ExperimentConfig.from_dict(doc)
        run_dir = out_dir / name
        trainer = Trainer(variant_cfg, data_dir, run_dir, mode="diffusion", seed=root_seed)
        trainer.train()
        n_eval = min(len(trainer.items), 2)
        psnrs, ssims = [], []
        for i in range(n_eval):
            recon = trainer.reconstruct(i, stream_seed(root_seed, "ablate-sample", i))
            ref = trainer.items[i].volume.data
            _, p3, _ = metrics.psnr_modes(recon.data, ref)
            _, s3, _ = metrics.ssim_modes(recon.data, ref)
            psnrs.append(p3)
            ssims.append(s3)
        results.append((name, float(np.mean(psnrs)), float(np.mean(ssims))))
    csv_path = out_dir / "ablation.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "psnr", "ssim"])
        for name, p, s in results:
            writer.writerow([name, _fmt(p), _fmt(s)])
    by_name = {name: p for name, p, _ in results}
    direction = "full >= baseline" if by_name["full"] >= by_name["baseline"] else "full < baseline"
    print(f"ablation table -> {csv_path} (psnr direction: {direction})")
    return csv_path


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    run_ablation(cfg, args.data, args.out, seed=args.seed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="x2ct", description="Biplanar X-ray to CT reconstruction harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True, seed=True, out=True):
        if config:
            p.add_argument("--config", help="JSON experiment config", default=None)
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if out:
            p.add_argument("--out", required=True, help="output directory or file")

    p = sub.add_parser("make-phantoms", help="synthesize HU phantom volumes")
    add_common(p)
    p.add_argument("--n", type=int, default=None, help="number of phantoms")
    p.set_defaults(fn=cmd_make_phantoms)

    p = sub.add_parser("synthesize-drr", help="normalize volumes and cast biplanar DRRs")
    add_common(p)
    p.add_argument("--data", required=True, help="directory from make-phantoms")
    p.set_defaults(fn=cmd_synthesize_drr)

    p = sub.add_parser("train", help="train a model on a DRR dataset")
    add_common(p)
    p.add_argument("--data", required=True, help="directory from synthesize-drr")
    p.add_argument("--mode", choices=["diffusion", "icm-reg"], default="diffusion")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="reconstruct one volume from two projections")
    add_common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--front", required=True, help="front projection file")
    p.add_argument("--side", required=True, help="side projection file")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("evaluate", help="reconstruct a dataset and report metrics")
    add_common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("render", help="export center-slice montage as PNG")
    add_common(p, config=False, seed=False)
    p.add_argument("--volume", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("ablate", help="train all ablation variants and tabulate metrics")
    add_common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError, FileNotFoundError, TrainingDivergenceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
