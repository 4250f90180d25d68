"""On-disk feature cache keyed by (backbone, preprocessing hash, image hash)."""
from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np
import torch

from ..encoders.base import Encoder
from ..encoders.preprocessing import array_digest

CACHE_ENV = "CIUDA_CACHE_DIR"
CACHE_VERSION = 1


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "ciuda"))


class FeatureCache:
    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else default_cache_dir()
        self.directory.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    @staticmethod
    def make_key(backbone_id: str, preprocessing_hash: str, image_hash: str) -> str:
        return f"v{CACHE_VERSION}|{backbone_id}|{preprocessing_hash}|{image_hash}"

    def _path(self, key: str) -> Path:
        return self.directory / (hashlib.sha256(key.encode()).hexdigest()[:32] + ".npz")

    def get(self, key: str) -> np.ndarray | None:
        path = self._path(key)
        if path.exists():
            with np.load(path, allow_pickle=False) as z:
                # full key comparison guards against file-name collisions
                if str(z["key"]) == key:
                    self.hits += 1
                    return z["feature"].copy()
        self.misses += 1
        return None

    def put(self, key: str, feature: np.ndarray):
        path = self._path(key)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, key=np.asarray(key), feature=np.asarray(feature))
        os.replace(tmp, path)

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def reset_stats(self):
        self.hits = self.misses = 0


def cache_features(examples, encoder: Encoder, store, cache: FeatureCache | None = None, purpose: str = "cache", batch_size: int = 64) -> dict[str, torch.Tensor]:
    """Features for ``examples``; the encoder only runs on cache misses."""
    spec = encoder.spec
    prep = str(spec.metadata.get("preprocessing", "none"))
    out: dict[str, torch.Tensor] = {}
    pending: list[tuple[str, str, np.ndarray]] = []

    def flush():
        if not pending:
            return
        pixels = torch.stack([encoder.prepare_input(a) for _, _, a in pending])
        z, _ = encoder.encode_batch(pixels)
        for (eid, key, _), vec in zip(pending, z):
            if cache is not None:
                cache.put(key, vec.cpu().numpy())
            out[eid] = vec
        pending.clear()

    for ex in examples:
        arr = store.read(ex, purpose)
        key = FeatureCache.make_key(spec.backbone_id, prep, array_digest(np.asarray(arr)))
        hit = cache.get(key) if cache is not None else None
        if hit is not None:
            out[ex.example_id] = torch.as_tensor(hit, dtype=encoder.dtype)
            continue
        pending.append((ex.example_id, key, arr))
        if len(pending) >= batch_size:
            flush()
    flush()
    return out
