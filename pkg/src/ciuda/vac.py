"""Visual attention consistency: Grad-CAM heatmaps matched across dictionaries by Pearson correlation."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .attributes import AttributeDictionary, SelectionResult
from .encoders.base import Encoder, TapActivations, VisualFeature
from .errors import ContractViolation, SizingError
from .prompts import cam_score_matrix

_FLAT_EPS = 1e-12


@dataclass
class Heatmap:
    values: torch.Tensor
    grid: tuple[int, int]
    attribute_index: int = -1


@dataclass
class MatchResult:
    selected_indices: torch.Tensor
    rho_matrix: torch.Tensor
    per_index_best_rho: torch.Tensor


def _patch_slice(tokens: torch.Tensor, global_token: bool) -> torch.Tensor:
    return tokens[..., 1:, :] if global_token else tokens


def gradcam_heatmap(cam_score: torch.Tensor, tap: TapActivations, attribute_index: int = -1) -> Heatmap:
    """``ReLU(sum_c alpha_c * tokens[j, c])`` with ``alpha`` the patch-mean gradient."""
    if not (tap.tokens.requires_grad and cam_score.requires_grad):
        raise ContractViolation("cam score is not linked to the tap activations")
    (grad,) = torch.autograd.grad(cam_score, tap.tokens, retain_graph=True, allow_unused=True)
    if grad is None:
        raise ContractViolation("cam score is not linked to the tap activations")
    g = _patch_slice(grad, tap.global_token_present)
    tokens = _patch_slice(tap.tokens.detach(), tap.global_token_present)
    alpha = g.mean(dim=-2, keepdim=True)
    values = torch.relu((tokens * alpha).sum(dim=-1))
    return Heatmap(values, tap.grid, attribute_index)


def heatmaps_for_all(encoder: Encoder, tokens: torch.Tensor, attribute_embeddings: torch.Tensor, tau: float) -> torch.Tensor:
    """Heatmaps ``[B, N, h*w]`` of every attribute for every image in the batch.

    ``tokens`` must be a grad-enabled leaf. Each image's CAM score depends on
    its own tokens only, so one backward pass per attribute covers the batch.
    """
    spec = encoder.spec
    with torch.enable_grad():
        z = encoder.features_from_tap(tokens)
        scores = cam_score_matrix(z, attribute_embeddings.detach(), tau)
        N = scores.shape[1]
        grads = []
        for n in range(N):
            (g,) = torch.autograd.grad(scores[:, n].sum(), tokens, retain_graph=n < N - 1)
            grads.append(g)
    g = _patch_slice(torch.stack(grads, dim=1), spec.has_global_token)  # [B, N, P, C]
    patches = _patch_slice(tokens.detach(), spec.has_global_token)  # [B, P, C]
    alpha = g.mean(dim=2)
    return torch.relu(torch.einsum("bpc,bnc->bnp", patches, alpha))


def pearson_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pearson correlation between rows: ``[..., L, P] x [..., N, P] -> [..., L, N]``.

    Rows with zero variance correlate 0 with everything.
    """
    ac = a - a.mean(dim=-1, keepdim=True)
    bc = b - b.mean(dim=-1, keepdim=True)
    an = ac.norm(dim=-1)
    bn = bc.norm(dim=-1)
    a_flat = an <= _FLAT_EPS * (1 + a.abs().amax(dim=-1))
    b_flat = bn <= _FLAT_EPS * (1 + b.abs().amax(dim=-1))
    num = ac @ bc.transpose(-1, -2)
    den = an[..., :, None] * bn[..., None, :]
    rho = torch.where(den > 0, num / den.clamp_min(torch.finfo(den.dtype).tiny), torch.zeros_like(num))
    rho = rho.masked_fill(a_flat[..., :, None] | b_flat[..., None, :], 0.0)
    return rho.clamp(-1.0, 1.0)


def pearson(h_a, h_b) -> float:
    a = h_a.values if isinstance(h_a, Heatmap) else torch.as_tensor(h_a)
    b = h_b.values if isinstance(h_b, Heatmap) else torch.as_tensor(h_b)
    if a.shape != b.shape:
        raise ContractViolation(f"heatmap lengths differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    a, b = a.to(torch.float64), b.to(torch.float64)
    return float(pearson_matrix(a.reshape(1, -1), b.reshape(1, -1))[0, 0])


def match_from_rho(rho: torch.Tensor, L: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Pick ``L`` candidates by their best correlation with any own heatmap.

    ``rho`` is ``[..., L, N]``; returns (indices, their scores), ties toward the lower index.
    """
    L = rho.shape[-2] if L is None else L
    N = rho.shape[-1]
    if L > N:
        raise SizingError(f"cannot select L={L} from N={N} candidates")
    best = rho.max(dim=-2).values
    order = torch.sort(best, dim=-1, descending=True, stable=True)
    return order.indices[..., :L], order.values[..., :L]


def match_cross_domain(own_heatmaps, candidate_heatmaps) -> MatchResult:
    own = torch.stack([h.values if isinstance(h, Heatmap) else torch.as_tensor(h) for h in own_heatmaps]).to(torch.float64)
    cand = torch.stack([h.values if isinstance(h, Heatmap) else torch.as_tensor(h) for h in candidate_heatmaps]).to(torch.float64)
    if own.shape[-1] != cand.shape[-1]:
        raise ContractViolation("own and candidate heatmaps have different grids")
    if own.shape[0] > cand.shape[0]:
        raise SizingError(f"cannot select L={own.shape[0]} from N={cand.shape[0]} candidates")
    rho = pearson_matrix(own, cand)
    idx, best = match_from_rho(rho)
    return MatchResult(idx, rho, best)


def cross_domain_selection(encoder: Encoder, tokens: torch.Tensor, own_values: torch.Tensor, other_values: torch.Tensor, own_indices: torch.Tensor, tau: float, return_maps: bool = False):
    """Batched cross-domain selection for images whose own-dictionary picks are ``own_indices`` ``[B, L]``."""
    with torch.no_grad():
        own_emb = encoder.encode_bare(own_values.detach())
        other_emb = encoder.encode_bare(other_values.detach())
    own_all = heatmaps_for_all(encoder, tokens, own_emb, tau)
    cand = heatmaps_for_all(encoder, tokens, other_emb, tau)
    own = torch.gather(own_all, 1, own_indices[..., None].expand(-1, -1, own_all.shape[-1]))
    rho = pearson_matrix(own, cand)
    idx, best = match_from_rho(rho)
    if return_maps:
        return idx, best, rho, own, cand
    return idx, best, rho


def select_for_image(image_domain: str, z, tap: TapActivations, dictionaries: dict[str, AttributeDictionary], selection_own: SelectionResult, encoder: Encoder, tau: float) -> SelectionResult:
    """L attributes from the dictionary opposite ``image_domain``."""
    if image_domain not in ("source", "target"):
        raise ContractViolation(f"unknown image domain {image_domain!r}")
    other = "target" if image_domain == "source" else "source"
    tokens = tap.tokens
    if tokens.dim() == 2:
        tokens = tokens[None]
    tokens = tokens.detach().requires_grad_(True)
    idx, best, _ = cross_domain_selection(
        encoder, tokens, dictionaries[image_domain].values, dictionaries[other].values, selection_own.indices.reshape(1, -1), tau
    )
    return SelectionResult(idx[0], best[0])


def dump_heatmaps(path, own: torch.Tensor, candidates: torch.Tensor, own_indices: torch.Tensor, grid: tuple[int, int], example_ids=None):
    path = Path(path)
    np.savez_compressed(
        path,
        own=own.detach().cpu().numpy(),
        candidates=candidates.detach().cpu().numpy(),
        own_indices=own_indices.cpu().numpy(),
        grid=np.asarray(grid),
        example_ids=np.asarray(json.dumps(list(example_ids or []))),
    )
    return path
