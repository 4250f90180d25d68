"""Download-free backend with closed-form encoders.

Image side: the input vector ``x`` is spread over a 4x4 token grid as
``token_j = (I + E_j) x`` with ``sum_j E_j = 0``, so the patch mean is ``x``
again; the feature is ``normalize(R @ mean_j token_j)`` with ``R`` a fixed
orthonormal matrix. Text side: mean of token embeddings, a fixed linear map,
then L2 normalization. Word embeddings are derived from a hash of the word.
"""
from __future__ import annotations

import hashlib
import re
from typing import Sequence

import numpy as np
import torch

from ..errors import ConfigurationError
from .base import Encoder, EncoderSpec, l2_normalize
from .preprocessing import check_shape

_WORD = re.compile(r"[a-z0-9]+")


def _orthonormal(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((max(n, m), min(n, m))))
    q = q * np.sign(np.diag(r))
    return q if n >= m else q.T


class ToyEncoder(Encoder):
    def __init__(
        self,
        feature_dim: int = 32,
        prompt_token_dim: int = 32,
        patch_grid: tuple[int, int] = (4, 4),
        temperature: float = 0.07,
        seed: int = 0,
        spatial_scale: float = 0.5,
        identity_projection: bool = False,
        identity_text: bool = False,
        has_global_token: bool = False,
        context_length: int = 77,
    ):
        self.spec = EncoderSpec(
            backbone_id=f"toy-d{feature_dim}-t{prompt_token_dim}-s{seed}",
            feature_dim=feature_dim,
            prompt_token_dim=prompt_token_dim,
            patch_grid=tuple(patch_grid),
            has_global_token=has_global_token,
            temperature=temperature,
            context_length=context_length,
            metadata={"input_shape": (feature_dim,), "preprocessing": "identity"},
        )
        self.seed = seed
        rng = np.random.default_rng(seed)
        D, d, T = feature_dim, prompt_token_dim, self.spec.num_patches
        proj = np.eye(D) if identity_projection else _orthonormal(rng, D, D)
        g = rng.standard_normal((T, D, D)) * (spatial_scale / np.sqrt(D))
        spread = g - g.mean(axis=0, keepdims=True)
        if identity_text:
            if d != D:
                raise ConfigurationError("identity_text requires prompt_token_dim == feature_dim")
            text_map = np.eye(D)
        else:
            text_map = _orthonormal(rng, D, d)
        self.projection = torch.as_tensor(proj, dtype=torch.float64)
        self.spread = torch.as_tensor(spread, dtype=torch.float64)
        self.text_map = torch.as_tensor(text_map, dtype=torch.float64)
        self._vocab: dict[str, torch.Tensor] = {}

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64

    # -- image --------------------------------------------------------------
    def prepare_input(self, image) -> torch.Tensor:
        arr = np.asarray(image, dtype=np.float64)
        check_shape(arr, self.spec.metadata["input_shape"], self.spec.backbone_id)
        return torch.as_tensor(arr)

    def tap(self, pixels: torch.Tensor) -> torch.Tensor:
        x = pixels.to(torch.float64).reshape(pixels.shape[0], -1)
        if x.shape[1] != self.spec.feature_dim:
            raise ConfigurationError(f"toy backend expects inputs of size {self.spec.feature_dim}, got {x.shape[1]}")
        patches = x[:, None, :] + torch.einsum("tij,bj->bti", self.spread, x)
        if self.spec.has_global_token:
            patches = torch.cat([patches.mean(dim=1, keepdim=True), patches], dim=1)
        return patches

    def features_from_tap(self, tokens: torch.Tensor) -> torch.Tensor:
        patches = tokens[:, 1:, :] if self.spec.has_global_token else tokens
        return l2_normalize(patches.mean(dim=1) @ self.projection.T)

    # -- text ---------------------------------------------------------------
    def word_embedding(self, word: str) -> torch.Tensor:
        if word not in self._vocab:
            digest = hashlib.sha256(f"{self.seed}:{word}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(self.spec.prompt_token_dim) / np.sqrt(self.spec.prompt_token_dim)
            self._vocab[word] = torch.as_tensor(vec, dtype=torch.float64)
        return self._vocab[word]

    def tokenize(self, text: str) -> list[str]:
        return _WORD.findall(text.lower())

    def class_tokens(self, class_name: str) -> torch.Tensor:
        words = self.tokenize(class_name)
        if not words:
            raise ConfigurationError(f"class name {class_name!r} has no tokens")
        return torch.stack([self.word_embedding(w) for w in words])

    def _project(self, mean_tokens: torch.Tensor) -> torch.Tensor:
        return l2_normalize(mean_tokens @ self.text_map.T)

    def encode_prompts(self, context: torch.Tensor, class_tokens: Sequence[torch.Tensor]) -> torch.Tensor:
        n_ctx = context.shape[1]
        self.check_prompt_length(n_ctx, max(t.shape[0] for t in class_tokens))
        cls_sum = torch.stack([t.sum(dim=0) for t in class_tokens]).to(context.dtype)
        cls_len = torch.tensor([t.shape[0] for t in class_tokens], dtype=context.dtype)
        mean = (context.sum(dim=1)[:, None, :] + cls_sum[None]) / (n_ctx + cls_len)[None, :, None]
        return self._project(mean)

    def encode_bare(self, values: torch.Tensor) -> torch.Tensor:
        return self._project(values.mean(dim=1))

    def embed_handcrafted_classnames(self, class_names: Sequence[str], template: str = "a photo of a {}.") -> torch.Tensor:
        if len(class_names) == 0:
            raise ConfigurationError("class list is empty")
        rows = [torch.stack([self.word_embedding(w) for w in self.tokenize(template.format(n))]).mean(0) for n in class_names]
        return self._project(torch.stack(rows))

    def parameters_for_checksum(self) -> list[torch.Tensor]:
        return [self.projection, self.spread, self.text_map]
