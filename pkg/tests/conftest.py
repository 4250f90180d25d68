from __future__ import annotations

import os
from pathlib import Path

import pytest
import torch

from ciuda.config import build_config
from ciuda.encoders import ToyEncoder

ROOT = Path(__file__).resolve().parents[1]


def reference_text() -> str | None:
    """Text of the method write-up shipped next to the package, if present."""
    path = Path(os.environ.get("CIUDA_REFERENCE_MD", ROOT / "paper.md"))
    return path.read_text() if path.exists() else None


@pytest.fixture
def toy():
    return ToyEncoder(seed=0)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


def small_config(**over):
    """A fast synthetic run: fewer examples and epochs than the acceptance setting."""
    data = {
        "benchmark_id": "synthetic",
        "epochs_per_step": 2,
        "synthetic": {"n_per_class": 40},
    }
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(data.get(k), dict):
            data[k] = {**data[k], **v}
        else:
            data[k] = v
    return build_config(data)


def central_diff(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``f`` at float64 ``x``."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(f(x))
        flat[i] = old - eps
        lo = float(f(x))
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), 1e-12))
