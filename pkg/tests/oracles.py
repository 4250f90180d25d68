"""Independent reference computations and random instances shared by the unit and acceptance tests."""
from __future__ import annotations

import math

import mpmath
import torch

from ciuda.encoders import ToyEncoder
from ciuda.encoders.base import TapActivations, l2_normalize
from ciuda.objectives import (
    DebiasState,
    debias_and_pseudolabel,
    loss_con,
    loss_div,
    loss_hp,
    loss_sup_source,
    loss_sup_target,
)
from ciuda.prompts import ClassProbabilities, cam_score_matrix, class_probs, prompt_embeddings
from ciuda.vac import gradcam_heatmap

from .conftest import central_diff, rel_err

f64 = torch.float64


def mp_js(p, q, dps: int = 50) -> float:
    mpmath.mp.dps = dps
    p = [mpmath.mpf(x) for x in p]
    q = [mpmath.mpf(x) for x in q]
    m = [(a + b) / 2 for a, b in zip(p, q)]

    def kl(a, b):
        return mpmath.fsum(x * mpmath.log(x / y) for x, y in zip(a, b) if x > 0)

    return float(kl(p, m) / 2 + kl(q, m) / 2)


class Instance:
    """Random toy-backend instance: two dictionaries' values, a batch of images, class tokens."""

    def __init__(self, seed: int, B: int = 3, C: int = 4, N: int = 4, M: int = 2, L: int = 2):
        g = torch.Generator().manual_seed(seed)
        self.enc = ToyEncoder(feature_dim=16, prompt_token_dim=16, seed=seed % 5)
        self.vs = 0.5 * torch.randn(N, M, 16, generator=g, dtype=f64)
        self.vt = 0.5 * torch.randn(N, M, 16, generator=g, dtype=f64)
        self.z = l2_normalize(torch.randn(B, 16, generator=g, dtype=f64))
        self.idx = torch.stack([torch.randperm(N, generator=g)[:L] for _ in range(B)])
        self.cross = torch.stack([torch.randperm(N, generator=g)[:L] for _ in range(B)])
        self.labels = torch.randint(0, C, (B,), generator=g)
        self.cls = [self.enc.class_tokens(w) for w in ("anchor", "bicycle", "candle", "dolphin easel")[:C]]
        self.w = self.enc.embed_handcrafted_classnames(["anchor", "bicycle", "candle", "dolphin easel"][:C])
        self.tau = 0.5

    def probs(self, values, indices, tag):
        return ClassProbabilities(class_probs(self.z, prompt_embeddings(self.enc, values, indices, self.cls), self.tau), tag)

    # each loss as a function of one dictionary's values
    def sup_s(self, vs):
        return loss_sup_source(self.probs(vs, self.idx, "ss"), self.labels)

    def sup_t(self, vt):
        p = self.probs(vt, self.idx, "tt")
        with torch.no_grad():
            mask, pseudo, _ = debias_and_pseudolabel(self.probs(self.vt, self.idx, "tt"), DebiasState.uniform(len(self.cls)), gamma=0.3)
        mask = mask.clone()
        mask[0] = True
        return loss_sup_target(p, mask, pseudo)

    def con(self, vs):
        return loss_con(
            self.probs(vs, self.idx, "ss"), self.probs(self.vt, self.cross, "st"),
            self.probs(self.vt, self.idx, "tt"), self.probs(vs, self.cross, "ts"),
        )

    def hp(self, vs):
        return loss_hp(prompt_embeddings(self.enc, vs, self.idx, self.cls), self.w)

    def div(self, vs):
        return loss_div(self.enc.encode_bare(vs))

    def cam(self, tokens, n):
        emb = self.enc.encode_bare(self.vt)
        return cam_score_matrix(self.enc.features_from_tap(tokens), emb, self.tau)[0, n]


LOSS_NAMES = ("sup_s", "sup_t", "con", "hp", "div")


def value_gradient_error(inst: Instance, name: str) -> float:
    fn = getattr(inst, name)
    base = inst.vt if name == "sup_t" else inst.vs
    v = base.clone().requires_grad_(True)
    fn(v).backward()
    return rel_err(v.grad, central_diff(fn, base))


def cam_gradient_error(inst: Instance, n: int = 0) -> float:
    tokens = inst.enc.tap(inst.z[:1] * 3.0)
    t = tokens.clone().requires_grad_(True)
    inst.cam(t, n).backward()
    return rel_err(t.grad, central_diff(lambda x: inst.cam(x, n), tokens))


def heatmap_alpha_error(inst: Instance, n: int = 0) -> float:
    """Grad-CAM heatmap against one rebuilt from finite-difference channel weights."""
    tokens = inst.enc.tap(inst.z[:1] * 3.0)
    t = tokens.clone().requires_grad_(True)
    h = gradcam_heatmap(inst.cam(t, n), TapActivations(t, inst.enc.spec.patch_grid, False), n).values[0]
    alpha = central_diff(lambda x: inst.cam(x, n), tokens)[0].mean(dim=0)
    want = torch.relu(tokens[0] @ alpha)
    return float((h - want).abs().max() / max(float(want.abs().max()), 1e-12))


def debias_oracle(p, q, tau_d, gamma, m):
    """Step-by-step recomputation with Python floats."""
    masks, pseudos = [], []
    for row in p:
        hat = [row[k] - tau_d * math.log(q[k]) for k in range(len(q))]
        top = max(hat)
        masks.append(top >= gamma)
        pseudos.append(hat.index(top))
    mean = [sum(r[k] for r in p) / len(p) for k in range(len(q))]
    return masks, pseudos, [m * q[k] + (1 - m) * mean[k] for k in range(len(q))]
