"""Pinned image preprocessing: resize shorter side, center crop, channel normalize."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, IngestionError

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

ARRAY_SUFFIXES = {".npy"}


@dataclass(frozen=True)
class Preprocessing:
    resolution: int = 224
    mean: tuple[float, float, float] = CLIP_MEAN
    std: tuple[float, float, float] = CLIP_STD
    interpolation: str = "bicubic"

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def __call__(self, img) -> np.ndarray:
        from PIL import Image

        img = img.convert("RGB")
        w, h = img.size
        scale = self.resolution / min(w, h)
        nw, nh = max(self.resolution, round(w * scale)), max(self.resolution, round(h * scale))
        img = img.resize((nw, nh), Image.Resampling.BICUBIC)
        left, top = (nw - self.resolution) // 2, (nh - self.resolution) // 2
        img = img.crop((left, top, left + self.resolution, top + self.resolution))
        arr = np.asarray(img, dtype=np.float32) / 255.0
        arr = (arr - np.asarray(self.mean, np.float32)) / np.asarray(self.std, np.float32)
        return arr.transpose(2, 0, 1).copy()


def read_image(path, preprocessing: Preprocessing) -> np.ndarray:
    """Decode ``path`` into a preprocessed pixel array.

    ``.npy`` files are taken as already-preprocessed arrays (the synthetic
    benchmark stores its inputs this way).
    """
    path = Path(path)
    if path.suffix.lower() in ARRAY_SUFFIXES:
        try:
            return np.load(path, allow_pickle=False)
        except (OSError, ValueError) as e:
            raise IngestionError(f"cannot read array {path}: {e}") from e
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            return preprocessing(img)
    except (OSError, UnidentifiedImageError) as e:
        raise IngestionError(f"cannot decode image {path}: {e}") from e


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def array_digest(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode() + str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def check_shape(arr: np.ndarray, expected: tuple[int, ...], backbone_id: str):
    if tuple(arr.shape) != tuple(expected):
        raise ConfigurationError(
            f"{backbone_id} expects input of shape {tuple(expected)}, got {tuple(arr.shape)}"
        )
