import numpy as np
import pytest
import torch

from x2ct.config import ExperimentConfig
from x2ct.projections import make_biplanar_pair
from x2ct.volumes import PhantomSpec, clip_and_normalize, generate_phantom


def tiny_config(size=16, **overrides) -> ExperimentConfig:
    """Small-but-complete config for fast training tests."""
    doc = ExperimentConfig().to_dict()
    doc["data"].update({"size": size, "n_train": 2})
    doc["model"].update(
        {
            "base_channels": 4,
            "channel_multipliers": [1, 2, 4],
            "icm_channels": 4,
            "window_size": [size >> 2] * 3 if size >> 2 <= 4 else [4, 4, 4],
            "num_heads": 2,
            "time_embed_dim": 16,
            "dropout": 0.0,
        }
    )
    doc["schedule"]["T"] = 20
    doc["train"].update({"iterations": 4, "batch_size": 2})
    for section, vals in overrides.items():
        doc[section].update(vals)
    return ExperimentConfig.from_dict(doc)


def normalized_phantom(seed=0, size=16):
    return clip_and_normalize(generate_phantom(PhantomSpec(seed=seed, size=size)))


@pytest.fixture
def phantom16():
    return normalized_phantom(seed=3, size=16)


def phantom_batch(n, size, dtype=torch.float32, seed0=0):
    """Stacked (y0, front, side) tensors for n distinct phantoms."""
    vols, fronts, sides = [], [], []
    for i in range(n):
        vol = normalized_phantom(seed=seed0 + i, size=size)
        pair = make_biplanar_pair(vol)
        vols.append(torch.as_tensor(vol.data, dtype=dtype))
        fronts.append(torch.as_tensor(pair.front, dtype=dtype))
        sides.append(torch.as_tensor(pair.side, dtype=dtype))
    return (
        torch.stack(vols).unsqueeze(1),
        torch.stack(fronts).unsqueeze(1),
        torch.stack(sides).unsqueeze(1),
    )
