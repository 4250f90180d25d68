"""Prompt assembly from selected attributes, class probabilities and CAM scores."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .attributes import AttributeDictionary, SelectionResult
from .encoders.base import Encoder, SoftPrompt, VisualFeature, l2_normalize
from .errors import ConfigurationError, ContractViolation

PROVENANCES = ("ss", "st", "tt", "ts")


@dataclass
class ClassProbabilities:
    probs: torch.Tensor
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ContractViolation(f"unknown provenance {self.provenance!r}")


@dataclass
class ClassTextEmbeddings:
    rows: torch.Tensor
    kind: str  # "learned" | "handcrafted"


@dataclass
class CamScores:
    scores: torch.Tensor
    attribute_indices: torch.Tensor
    full: torch.Tensor


def assemble_prompt(selected_values: torch.Tensor, class_tokens: torch.Tensor, context_length: int | None = None, reserved: int = 0) -> SoftPrompt:
    """Concatenate ``[L, M, d]`` attribute values in selection order, then the class tokens."""
    if selected_values.dim() != 3 or selected_values.shape[0] < 1:
        raise ConfigurationError("need at least one selected attribute value of shape [L, M, d]")
    L, M, d = selected_values.shape
    if context_length is not None and L * M + class_tokens.shape[0] + reserved > context_length:
        raise ConfigurationError(
            f"prompt length {L * M} + {class_tokens.shape[0]} (+{reserved}) exceeds context length {context_length}"
        )
    return SoftPrompt(selected_values.reshape(L * M, d), class_tokens)


def gather_context(values: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """Batched ``assemble_prompt`` context: ``values[indices]`` flattened to ``[B, L*M, d]``."""
    B, L = indices.shape
    return values[indices].reshape(B, L * values.shape[1], values.shape[2])


def prompt_embeddings(encoder: Encoder, values: torch.Tensor, indices: torch.Tensor, class_tokens: Sequence[torch.Tensor]) -> torch.Tensor:
    """Class-wise text embeddings ``[B, C, D]`` for each image's selected attributes."""
    return encoder.encode_prompts(gather_context(values, indices), class_tokens)


def _check_tau(tau: float):
    if not tau > 0:
        raise ConfigurationError(f"temperature must be > 0, got {tau}")


def class_probs(z: torch.Tensor, embeddings: torch.Tensor, tau: float) -> torch.Tensor:
    """Softmax over classes of ``cos(row_k, z) / tau``.

    ``z`` is ``[B, D]``; ``embeddings`` is ``[C, D]`` (shared) or ``[B, C, D]``.
    """
    _check_tau(tau)
    z = l2_normalize(z)
    emb = l2_normalize(embeddings)
    if emb.dim() == 2:
        cos = z @ emb.T
    else:
        cos = torch.einsum("bd,bcd->bc", z, emb)
    return torch.softmax(cos / tau, dim=-1)


def class_probabilities(z, embeddings, tau: float, provenance: str = "tt") -> ClassProbabilities:
    vec = z.vector if isinstance(z, VisualFeature) else z
    rows = embeddings.rows if isinstance(embeddings, ClassTextEmbeddings) else embeddings
    if rows.shape[0] == 0:
        raise ConfigurationError("no class embeddings")
    p = class_probs(vec.reshape(1, -1).to(rows.dtype), rows, tau)[0]
    return ClassProbabilities(p, provenance)


def cam_score_matrix(z: torch.Tensor, attribute_embeddings: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-image softmax over all ``N`` bare-attribute embeddings: ``[B, N]``."""
    _check_tau(tau)
    cos = l2_normalize(z) @ l2_normalize(attribute_embeddings).T
    return torch.softmax(cos / tau, dim=-1)


def cam_scores(z, dictionary: AttributeDictionary, selection: SelectionResult, tau: float, encoder: Encoder) -> CamScores:
    vec = z.vector if isinstance(z, VisualFeature) else z
    idx = selection.indices
    if idx.numel() and (int(idx.max()) >= dictionary.N or int(idx.min()) < 0):
        raise ContractViolation("selection does not index into this dictionary")
    with torch.no_grad():
        emb = encoder.encode_bare(dictionary.values)
    full = cam_score_matrix(vec.reshape(1, -1).to(emb.dtype), emb, tau)[0]
    return CamScores(full[idx], idx, full)
