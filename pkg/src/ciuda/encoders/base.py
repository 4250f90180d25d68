from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from ..errors import ConfigurationError


@dataclass(frozen=True)
class EncoderSpec:
    backbone_id: str
    feature_dim: int
    prompt_token_dim: int
    patch_grid: tuple[int, int]
    has_global_token: bool
    temperature: float
    context_length: int = 77
    metadata: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        h, w = self.patch_grid
        if self.feature_dim <= 0 or self.prompt_token_dim <= 0:
            raise ConfigurationError("feature_dim and prompt_token_dim must be positive")
        if h * w < 1:
            raise ConfigurationError(f"patch grid {self.patch_grid} has no patches")
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")

    @property
    def num_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def num_tap_tokens(self) -> int:
        return self.num_patches + int(self.has_global_token)


@dataclass
class VisualFeature:
    vector: torch.Tensor
    source_id: str | None = None


@dataclass
class TapActivations:
    """Layer activations Grad-CAM differentiates against.

    ``tokens`` is ``[T, D_tap]`` for a single image or ``[B, T, D_tap]`` for a
    batch; when ``global_token_present`` the global token sits at index 0.
    """

    tokens: torch.Tensor
    grid: tuple[int, int]
    global_token_present: bool

    def patch_tokens(self) -> torch.Tensor:
        return self.tokens[..., 1:, :] if self.global_token_present else self.tokens


@dataclass
class SoftPrompt:
    context_tokens: torch.Tensor
    class_tokens: torch.Tensor

    def __post_init__(self):
        if self.context_tokens.dim() != 2 or self.context_tokens.shape[0] < 1:
            raise ConfigurationError("a soft prompt needs at least one context token")

    @property
    def length(self) -> int:
        return self.context_tokens.shape[0] + self.class_tokens.shape[0]


class Encoder:
    """Frozen image/text encoder pair.

    Subclasses implement the batched primitives; the single-example helpers
    below are expressed in terms of them.
    """

    spec: EncoderSpec
    # tokens the backend adds around a prompt (start/end markers)
    reserved_tokens: int = 0

    # -- batched primitives -------------------------------------------------
    def prepare_input(self, image) -> torch.Tensor:
        raise NotImplementedError

    def tap(self, pixels: torch.Tensor) -> torch.Tensor:
        """Designated-layer activations ``[B, T, D_tap]`` for a batch of pixels."""
        raise NotImplementedError

    def features_from_tap(self, tokens: torch.Tensor) -> torch.Tensor:
        """Unit-normalized image features ``[B, D]`` computed from tap tokens."""
        raise NotImplementedError

    def encode_prompts(self, context: torch.Tensor, class_tokens: Sequence[torch.Tensor]) -> torch.Tensor:
        """Encode ``[B, T_ctx, d]`` context against every class: returns ``[B, C, D]``."""
        raise NotImplementedError

    def encode_bare(self, values: torch.Tensor) -> torch.Tensor:
        """Encode ``[N, M, d]`` attribute values without class tokens: ``[N, D]``."""
        raise NotImplementedError

    def class_tokens(self, class_name: str) -> torch.Tensor:
        raise NotImplementedError

    def embed_handcrafted_classnames(self, class_names: Sequence[str], template: str = "a photo of a {}.") -> torch.Tensor:
        raise NotImplementedError

    def parameters_for_checksum(self) -> list[torch.Tensor]:
        raise NotImplementedError

    # -- derived ------------------------------------------------------------
    @property
    def dtype(self) -> torch.dtype:
        return torch.float32

    def encode_batch(self, pixels: torch.Tensor, with_grad: bool = False) -> tuple[torch.Tensor, TapActivations]:
        with torch.enable_grad() if with_grad else torch.no_grad():
            tokens = self.tap(pixels)
            if with_grad:
                tokens = tokens.detach().requires_grad_(True)
            z = self.features_from_tap(tokens)
        tap = TapActivations(tokens, self.spec.patch_grid, self.spec.has_global_token)
        return z, tap

    def encode_image(self, image, source_id: str | None = None) -> tuple[VisualFeature, TapActivations]:
        pixels = self.prepare_input(image).unsqueeze(0)
        z, tap = self.encode_batch(pixels, with_grad=True)
        single = TapActivations(tap.tokens[0], tap.grid, tap.global_token_present)
        return VisualFeature(z[0], source_id), single

    def check_prompt_length(self, n_context: int, n_class: int):
        limit = self.spec.context_length
        total = n_context + n_class + self.reserved_tokens
        if total > limit:
            raise ConfigurationError(
                f"prompt of {n_context} context + {n_class} class tokens "
                f"(+{self.reserved_tokens} reserved) = {total} exceeds context length {limit}"
            )

    def encode_text_soft(self, prompt: SoftPrompt) -> torch.Tensor:
        self.check_prompt_length(prompt.context_tokens.shape[0], prompt.class_tokens.shape[0])
        out = self.encode_prompts(prompt.context_tokens.unsqueeze(0), [prompt.class_tokens])
        return out[0, 0]

    def weight_checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters_for_checksum():
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return F.normalize(x, dim=dim, eps=1e-12)
