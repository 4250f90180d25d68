"""Gaussian-blob benchmark for the toy backend.

Class ``k`` is centred near the text embedding of its bare class name, so
prompting starts out meaningful. The target domain applies one fixed
rotation in feature space.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..encoders.toy import ToyEncoder
from .datasets import Manifest
from .schedules import StepSchedule, build_schedule

SYNTHETIC_CLASSES = [
    "anchor", "bicycle", "candle", "dolphin", "easel", "falcon",
    "guitar", "hammock", "igloo", "jacket", "kettle", "lantern",
    "mitten", "needle", "orchid", "parrot", "quilt", "rocket",
]


@dataclass
class SyntheticBenchmark:
    schedule: StepSchedule
    inputs: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    rotation: np.ndarray

    def manifests(self) -> dict[str, Manifest]:
        out = {}
        for domain in ("source", "target"):
            entries = [
                {
                    "id": f"{domain}/{self.schedule.folder_names[y]}/{i:05d}.npy",
                    "path": f"{domain}/{self.schedule.folder_names[y]}/{i:05d}.npy",
                    "class_folder": self.schedule.folder_names[y],
                    "label": int(y),
                    "sha256": None,
                }
                for i, y in enumerate(self.labels[domain])
            ]
            out[domain] = Manifest("<memory>", domain, entries)
        return out

    def memory(self) -> dict[str, np.ndarray]:
        mem = {}
        for domain in ("source", "target"):
            for i, y in enumerate(self.labels[domain]):
                mem[f"{domain}/{self.schedule.folder_names[y]}/{i:05d}.npy"] = self.inputs[domain][i]
        return mem

    def write(self, root) -> Path:
        root = Path(root)
        for ref, arr in self.memory().items():
            path = root / ref
            path.parent.mkdir(parents=True, exist_ok=True)
            np.save(path, arr)
        return root


def plane_rotation(u: np.ndarray, v: np.ndarray, angle: float) -> np.ndarray:
    """Rotation by ``angle`` radians in the plane spanned by orthonormal ``u``, ``v``; identity elsewhere."""
    c, s = np.cos(angle), np.sin(angle)
    return (
        np.eye(u.shape[0])
        + (c - 1) * (np.outer(u, u) + np.outer(v, v))
        + s * (np.outer(v, u) - np.outer(u, v))
    )


def make_synthetic(
    encoder: ToyEncoder,
    n_steps: int = 3,
    classes_per_step: int = 4,
    n_per_class: int = 200,
    rotation_deg: float = 30.0,
    shared_scale: float = 1.0,
    noise: float = 0.7,
    seed: int = 0,
) -> SyntheticBenchmark:
    """Two domains whose features differ by one fixed rotation.

    Class centres are ``shared_scale * u + c_k`` with ``u`` the mean
    class-name text direction and ``c_k`` the unit class-specific
    remainder. The rotation turns the plane of ``u`` and a random direction
    ``v`` inside the class subspace, so the shift acts mostly as a common
    translation that favours some classes over others.
    """
    C = n_steps * classes_per_step
    if C > len(SYNTHETIC_CLASSES):
        raise ValueError(f"at most {len(SYNTHETIC_CLASSES)} synthetic classes")
    names = SYNTHETIC_CLASSES[:C]
    schedule = build_schedule("synthetic", names, classes_per_step)
    rng = np.random.default_rng(seed)
    D = encoder.spec.feature_dim
    # text embeddings of the bare class tokens, i.e. prompts with empty context
    empty = torch.zeros(1, 0, encoder.spec.prompt_token_dim, dtype=encoder.dtype)
    w = encoder.encode_prompts(empty, [encoder.class_tokens(n) for n in names])[0].numpy()
    u = w.mean(axis=0)
    u /= np.linalg.norm(u)
    c = w - w.mean(axis=0, keepdims=True)
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    centers = shared_scale * u + c
    v = rng.standard_normal(C) @ c
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    rotation = plane_rotation(u, v, np.deg2rad(rotation_deg))
    proj = encoder.projection.numpy()

    inputs, labels = {}, {}
    for domain in ("source", "target"):
        y = np.repeat(np.arange(C), n_per_class)
        feats = centers[y] + noise * rng.standard_normal((len(y), D)) / np.sqrt(D)
        if domain == "target":
            feats = feats @ rotation.T
        # the toy image encoder maps x to normalize(R x)
        inputs[domain] = feats @ proj
        labels[domain] = y
    return SyntheticBenchmark(schedule, inputs, labels, rotation)


def toy_encoder_for_synthetic(seed: int = 0, **kwargs) -> ToyEncoder:
    return ToyEncoder(seed=seed, **kwargs)


def zero_shot_accuracy(encoder: ToyEncoder, bench: SyntheticBenchmark, domain: str, template: str = "a photo of a {}.") -> float:
    w = encoder.embed_handcrafted_classnames(bench.schedule.class_names, template)
    x = torch.as_tensor(bench.inputs[domain])
    z, _ = encoder.encode_batch(x)
    pred = (z @ w.T).argmax(dim=1).numpy()
    return float((pred == bench.labels[domain]).mean() * 100)
