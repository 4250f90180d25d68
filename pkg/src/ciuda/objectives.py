"""Loss terms, debiased pseudo-labelling, and the per-mode weighted totals."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .encoders.base import l2_normalize
from .errors import ContractViolation, DataError, NumericalError
from .prompts import ClassProbabilities, ClassTextEmbeddings

PROB_FLOOR = 1e-12
MODES = ("joint", "source_pretrain", "target_deploy")
REQUIRED_PARTS = {
    "joint": ("sup_s", "sup_t", "con", "hp", "div"),
    "source_pretrain": ("sup_s", "hp", "div"),
    "target_deploy": ("sup_t", "con", "div"),
}


def _probs(p, provenance: str | None = None) -> torch.Tensor:
    if isinstance(p, ClassProbabilities):
        if provenance is not None and p.provenance != provenance:
            raise ContractViolation(f"expected {provenance} probabilities, got {p.provenance}")
        return p.probs
    if isinstance(p, (list, tuple)):
        return torch.stack([_probs(x, provenance) for x in p])
    return p


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(PROB_FLOOR))


def loss_sup_source(p, labels) -> torch.Tensor:
    p = _probs(p)
    p = p.reshape(-1, p.shape[-1])
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    C = p.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= C):
        raise DataError(f"labels must lie in [0, {C})")
    picked = p.gather(1, labels[:, None])[:, 0]
    return -_safe_log(picked).mean()


@dataclass
class DebiasState:
    q: torch.Tensor
    momentum: float = 0.999
    debias_factor: float = 0.4

    @classmethod
    def uniform(cls, C: int, momentum: float = 0.999, debias_factor: float = 0.4, dtype=torch.float64):
        return cls(torch.full((C,), 1.0 / C, dtype=dtype), momentum, debias_factor)


def debias_and_pseudolabel(p, state: DebiasState, gamma: float):
    """Returns ``(mask, pseudo, new_state)``.

    The debiased scores use the marginal estimate from before this batch;
    the estimate is then moved toward the batch mean of the raw ``p``.
    """
    p = _probs(p).detach()
    p = p.reshape(-1, p.shape[-1])
    q = state.q.to(p.dtype)
    p_hat = p - state.debias_factor * torch.log(q)
    top, pseudo = p_hat.max(dim=-1)
    mask = top >= gamma
    q_new = state.momentum * q + (1 - state.momentum) * p.mean(dim=0)
    return mask, pseudo, DebiasState(q_new, state.momentum, state.debias_factor)


def loss_sup_target(p_tt, mask, pseudo) -> torch.Tensor:
    p = _probs(p_tt)
    p = p.reshape(-1, p.shape[-1])
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any()):
        return p.sum() * 0.0
    picked = p.gather(1, torch.as_tensor(pseudo, dtype=torch.long)[:, None])[:, 0]
    return -_safe_log(picked[mask]).mean()


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    # p * log(p) is taken as 0 where p == 0
    return (p * (_safe_log(p) - _safe_log(q))).sum(dim=-1)


def js_divergence(p, q) -> torch.Tensor:
    p, q = _probs(p), _probs(q)
    if p.shape != q.shape:
        raise ContractViolation(f"distribution shapes differ: {tuple(p.shape)} vs {tuple(q.shape)}")
    m = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)


def loss_con(p_ss, p_st, p_tt, p_ts) -> torch.Tensor:
    src = js_divergence(_probs(p_ss, "ss"), _probs(p_st, "st"))
    tgt = js_divergence(_probs(p_tt, "tt"), _probs(p_ts, "ts"))
    return src.mean() + tgt.mean()


def loss_con_target(p_tt, p_ts) -> torch.Tensor:
    return js_divergence(_probs(p_tt, "tt"), _probs(p_ts, "ts")).mean()


def loss_hp(e_s, w) -> torch.Tensor:
    """Summed absolute difference between learned and hand-crafted class embeddings."""
    if isinstance(e_s, ClassTextEmbeddings):
        if e_s.kind != "learned":
            raise ContractViolation("first argument must hold learned embeddings")
        e_s = e_s.rows
    if isinstance(w, ClassTextEmbeddings):
        if w.kind != "handcrafted":
            raise ContractViolation("second argument must hold hand-crafted embeddings")
        w = w.rows
    if e_s.shape[-2:] != w.shape[-2:]:
        raise ContractViolation(f"embedding shapes differ: {tuple(e_s.shape)} vs {tuple(w.shape)}")
    per = (e_s - w.to(e_s.dtype)).abs().sum(dim=(-2, -1))
    return per.mean() if per.dim() else per


def loss_div(attribute_embeddings: torch.Tensor) -> torch.Tensor:
    """Mean absolute pairwise cosine with the ``1 / (N (N - 1))`` normalizer (all-equal rows give 0.5)."""
    N = attribute_embeddings.shape[0]
    if N < 2:
        return attribute_embeddings.sum() * 0.0
    e = l2_normalize(attribute_embeddings)
    cos = e @ e.T
    iu = torch.triu_indices(N, N, offset=1)
    return cos[iu[0], iu[1]].abs().sum() / (N * (N - 1))


@dataclass
class LossBreakdown:
    sup_s: float
    sup_t: float
    con: float
    hp: float
    div: float
    total: float
    weights: tuple[float, float, float]
    mode: str = "joint"
    total_tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("sup_s", "sup_t", "con", "hp", "div", "total")}


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def total_loss(parts: dict, lam1: float, lam2: float, lam3: float, mode: str = "joint") -> LossBreakdown:
    if mode not in MODES:
        raise ContractViolation(f"unknown mode {mode!r}")
    if min(lam1, lam2, lam3) < 0:
        raise ContractViolation("loss weights must be non-negative")
    missing = [k for k in REQUIRED_PARTS[mode] if parts.get(k) is None]
    if missing:
        raise ContractViolation(f"mode {mode} is missing loss parts: {', '.join(missing)}")
    weights = {"sup_s": 1.0, "sup_t": 1.0, "con": lam1, "hp": lam2, "div": lam3}
    total = sum(weights[k] * parts[k] for k in REQUIRED_PARTS[mode])
    vals = {k: _scalar(parts[k]) if k in REQUIRED_PARTS[mode] else 0.0 for k in weights}
    total_f = _scalar(total)
    if not math.isfinite(total_f):
        raise NumericalError(f"non-finite loss: {vals}")
    return LossBreakdown(**vals, total=total_f, weights=(lam1, lam2, lam3), mode=mode, total_tensor=total if isinstance(total, torch.Tensor) else None)
