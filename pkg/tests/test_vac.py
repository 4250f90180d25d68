import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ciuda.attributes import AttributeDictionary, select_top_l
from ciuda.encoders import ToyEncoder
from ciuda.encoders.base import TapActivations, l2_normalize
from ciuda.errors import ContractViolation, SizingError
from ciuda.prompts import cam_score_matrix
from ciuda.vac import Heatmap, gradcam_heatmap, heatmaps_for_all, match_cross_domain, match_from_rho, pearson, select_for_image

from .conftest import central_diff, rel_err

f64 = torch.float64


def _np_pearson(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


# -- Grad-CAM -------------------------------------------------------------------

def test_linear_cam_gives_first_channel():
    tokens = torch.randn(16, 5, dtype=f64, requires_grad=True)
    tap = TapActivations(tokens, (4, 4), False)
    h = gradcam_heatmap(tokens[:, 0].sum(), tap)
    assert torch.allclose(h.values, torch.relu(tokens.detach()[:, 0]))
    assert h.grid == (4, 4)


def test_zero_tokens_give_zero_heatmap():
    tokens = torch.zeros(16, 5, dtype=f64, requires_grad=True)
    h = gradcam_heatmap((tokens * torch.arange(5.0)).sum() + (tokens ** 2).sum(), TapActivations(tokens, (4, 4), False))
    assert torch.equal(h.values, torch.zeros(16, dtype=f64))


def test_missing_linkage_is_contract_violation():
    tokens = torch.randn(16, 5, dtype=f64, requires_grad=True)
    other = torch.randn(3, requires_grad=True)
    with pytest.raises(ContractViolation):
        gradcam_heatmap(other.sum(), TapActivations(tokens, (4, 4), False))


def test_global_token_is_excluded():
    tokens = torch.randn(17, 5, dtype=f64, requires_grad=True)
    h = gradcam_heatmap(tokens[:, 1].sum(), TapActivations(tokens, (4, 4), True))
    assert h.values.shape == (16,)
    assert torch.allclose(h.values, torch.relu(tokens.detach()[1:, 1]))


@pytest.mark.parametrize("seed", range(20))
def test_cam_gradient_matches_finite_differences(seed):
    enc = ToyEncoder(seed=seed % 3)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 32, generator=g, dtype=f64)
    emb = l2_normalize(torch.randn(6, 32, generator=g, dtype=f64))
    n = seed % 6
    tokens = enc.tap(x)

    def cam(t):
        return cam_score_matrix(enc.features_from_tap(t), emb, 0.3)[0, n]

    t = tokens.clone().requires_grad_(True)
    h = gradcam_heatmap(cam(t), TapActivations(t, (4, 4), False), n)
    fd = central_diff(cam, tokens)[0]
    alpha_fd = fd.mean(dim=0)
    t.grad = None
    cam(t).backward()
    assert rel_err(t.grad[0], fd) < 1e-4
    assert torch.allclose(h.values, torch.relu(tokens[0] @ alpha_fd), atol=1e-6 * (1 + float(h.values.abs().max())))
    # batched path agrees with the single-attribute path
    batched = heatmaps_for_all(enc, tokens.clone().requires_grad_(True), emb, 0.3)
    assert torch.allclose(batched[0, n], h.values, atol=1e-12)


# -- Pearson --------------------------------------------------------------------

def test_pearson_examples():
    h = torch.tensor([0.0, 1.0, 3.0, 2.0, 5.0], dtype=f64)
    assert pearson(h, h) == pytest.approx(1.0)
    assert pearson(h, h.max() - h) == pytest.approx(-1.0)
    assert pearson(torch.full((5,), 2.0), h) == 0.0
    assert pearson(h, torch.zeros(5)) == 0.0
    with pytest.raises(ContractViolation):
        pearson(h, torch.zeros(4))


@settings(max_examples=100, deadline=None)
@given(
    a=st.lists(st.floats(0, 10), min_size=16, max_size=16),
    b=st.lists(st.floats(0, 10), min_size=16, max_size=16),
    scale=st.floats(0.1, 10),
    shift=st.floats(-5, 5),
)
def test_pearson_bounds_affine_invariance_and_numpy_oracle(a, b, scale, shift):
    ta, tb = torch.tensor(a, dtype=f64), torch.tensor(b, dtype=f64)
    r = pearson(ta, tb)
    assert -1.0 <= r <= 1.0
    if np.std(a) > 1e-6 and np.std(b) > 1e-6:
        assert r == pytest.approx(_np_pearson(a, b), abs=1e-9)
        assert pearson(scale * ta + shift, tb) == pytest.approx(r, abs=1e-9)


# -- matching -------------------------------------------------------------------

def test_match_examples():
    rho = torch.tensor([[0.9, 0.1, 0.2], [0.1, 0.8, 0.3]], dtype=f64)
    idx, _ = match_from_rho(rho)

    def decided_score(subset):
        return sum(float(rho[:, n].max()) for n in subset)

    best = max(itertools.combinations(range(3), 2), key=decided_score)
    assert set(idx.tolist()) == set(best) == {0, 1}
    one = torch.tensor([[0.2, 0.7, -0.1, 0.5]], dtype=f64)
    assert match_from_rho(one)[0].tolist() == [1]


def test_identical_candidates_break_ties_by_index():
    own = [Heatmap(torch.rand(16, dtype=f64), (4, 4)) for _ in range(3)]
    cand = [Heatmap(torch.arange(16, dtype=f64), (4, 4))] * 5
    assert match_cross_domain(own, cand).selected_indices.tolist() == [0, 1, 2]
    with pytest.raises(SizingError):
        match_cross_domain(own, cand[:2])


def test_match_is_permutation_equivariant():
    g = torch.Generator().manual_seed(0)
    own = [torch.rand(16, generator=g, dtype=f64) for _ in range(2)]
    cand = [torch.rand(16, generator=g, dtype=f64) for _ in range(6)]
    perm = [3, 5, 0, 1, 4, 2]
    base = match_cross_domain(own, cand).selected_indices.tolist()
    permuted = match_cross_domain(own, [cand[p] for p in perm]).selected_indices.tolist()
    assert sorted(perm[i] for i in permuted) == sorted(base)


# -- cross-domain selection -----------------------------------------------------

def _dicts(seed, N=6, M=2, same=False):
    g = torch.Generator().manual_seed(seed)
    ks = l2_normalize(torch.randn(N, 32, generator=g, dtype=f64))
    vs = 0.5 * torch.randn(N, M, 32, generator=g, dtype=f64)
    kt = ks.clone() if same else l2_normalize(torch.randn(N, 32, generator=g, dtype=f64))
    vt = vs.clone() if same else 0.5 * torch.randn(N, M, 32, generator=g, dtype=f64)
    return {"source": AttributeDictionary("source", ks, vs), "target": AttributeDictionary("target", kt, vt)}


def test_identical_dictionaries_select_own_attributes(toy):
    dicts = _dicts(0, same=True)
    z, tap = toy.encode_image(np.random.default_rng(0).standard_normal(32))
    own = select_top_l(dicts["target"], z.vector.detach(), 3)
    cross = select_for_image("target", z, tap, dicts, own, toy, 0.07)
    assert set(cross.indices.tolist()) == set(own.indices.tolist())


def test_n_equal_l_selects_everything(toy):
    dicts = _dicts(1, N=4)
    z, tap = toy.encode_image(np.random.default_rng(1).standard_normal(32))
    own = select_top_l(dicts["source"], z.vector.detach(), 4)
    assert sorted(select_for_image("source", z, tap, dicts, own, toy, 0.07).indices.tolist()) == [0, 1, 2, 3]


@pytest.mark.parametrize("seed", range(3))
def test_selection_equals_composition_of_constituents(toy, seed):
    dicts = _dicts(seed + 10)
    z, tap = toy.encode_image(np.random.default_rng(seed).standard_normal(32))
    tau, L = 0.1, 3
    own = select_top_l(dicts["target"], z.vector.detach(), L)
    values_before = {k: d.values.detach().clone() for k, d in dicts.items()}
    got = select_for_image("target", z, tap, dicts, own, toy, tau)

    def maps(dictionary, which):
        emb = toy.encode_bare(dictionary.values.detach())
        out = []
        for n in which:
            t = tap.tokens.detach().clone()[None].requires_grad_(True)
            score = cam_score_matrix(toy.features_from_tap(t), emb, tau)[0, n]
            out.append(gradcam_heatmap(score, TapActivations(t, tap.grid, False), n).values.reshape(-1))
        return out

    own_maps = maps(dicts["target"], own.indices.tolist())
    cand_maps = maps(dicts["source"], range(6))
    rho = [[_np_pearson(a.numpy(), b.numpy()) for b in cand_maps] for a in own_maps]
    score = [max(rho[i][n] for i in range(L)) for n in range(6)]
    want = sorted(range(6), key=lambda n: (-score[n], n))[:L]
    assert got.indices.tolist() == want
    for k, d in dicts.items():
        assert torch.equal(d.values.detach(), values_before[k])
