"""Quick self-check: closed-form properties on the toy backend plus synthetic end-to-end runs."""
from __future__ import annotations

import math
import time
from typing import Callable

import torch

from .attributes import AttributeDictionary, init_keys_kmeanspp, update_target_keys_ema
from .data.schedules import build_schedule
from .objectives import DebiasState, debias_and_pseudolabel, js_divergence, loss_div, loss_hp
from .vac import pearson


def _close(a, b, tol=1e-6):
    return abs(float(a) - float(b)) <= tol


def check_js() -> bool:
    t = lambda *v: torch.tensor(v, dtype=torch.float64)
    return (
        _close(js_divergence(t(1.0, 0.0), t(0.0, 1.0)), math.log(2))
        and _close(js_divergence(t(0.3, 0.7), t(0.3, 0.7)), 0.0)
        and _close(js_divergence(t(0.5, 0.5), t(1.0, 0.0)), js_divergence(t(1.0, 0.0), t(0.5, 0.5)))
    )


def check_pearson() -> bool:
    g = torch.Generator().manual_seed(0)
    a, b = torch.rand(16, generator=g, dtype=torch.float64), torch.rand(16, generator=g, dtype=torch.float64)
    r = pearson(a, b)
    return -1 <= r <= 1 and _close(pearson(3 * a + 2, b), r) and pearson(torch.ones(16), b) == 0.0 and _close(pearson(a, a), 1.0)


def check_kmeans() -> bool:
    pts = torch.eye(4, dtype=torch.float64)
    keys = init_keys_kmeanspp(pts, 4, seed=0)
    hit = sorted(int(i) for i in (keys @ pts.T).argmax(dim=1))
    return hit == [0, 1, 2, 3] and torch.equal(keys, init_keys_kmeanspp(pts, 4, seed=0))


def check_ema() -> bool:
    d = AttributeDictionary("target", torch.tensor([[1.0, 0.0]], dtype=torch.float64), torch.zeros(1, 1, 2, dtype=torch.float64))
    update_target_keys_ema(d, torch.tensor([[0.0, 1.0], [0.0, 1.0]], dtype=torch.float64), mu=0.9)
    want = torch.tensor([0.9, 0.1], dtype=torch.float64)
    return torch.allclose(d.keys[0], want / want.norm(), atol=1e-6)


def check_debias() -> bool:
    state = DebiasState(torch.tensor([0.5, 0.5], dtype=torch.float64), 0.999, 0.4)
    p = torch.tensor([[0.7, 0.3]], dtype=torch.float64)
    mask, pseudo, new = debias_and_pseudolabel(p, state, gamma=0.7)
    return int(pseudo[0]) == 0 and bool(mask[0]) and torch.allclose(new.q, torch.tensor([0.5002, 0.4998], dtype=torch.float64), atol=1e-9)


def check_regularizers() -> bool:
    e = torch.ones(5, 3, dtype=torch.float64)
    w = torch.randn(4, 3, dtype=torch.float64)
    return _close(loss_div(e), 0.5) and _close(loss_hp(w, w), 0.0)


def check_schedules() -> bool:
    return [build_schedule(b).T for b in ("office31", "officehome", "minidomainnet")] == [3, 6, 6]


def check_end_to_end() -> bool:
    from .config import build_config
    from .runner import full_run

    t0 = time.perf_counter()
    joint = full_run(build_config({"benchmark_id": "synthetic"}))
    free = full_run(build_config({"benchmark_id": "synthetic", "mode": "source_free"}))
    rep = joint.report
    s1 = rep.avg_s1
    ok = (
        rep.avg_final >= 95.0
        and s1[-1] >= 0.9 * s1[0]
        and not joint.access_log.rehearsal_violations()
        and free.access_log.count(domain="source", stage="deploy") == 0
        and abs(free.report.avg_final - rep.avg_final) <= 5.0
        and time.perf_counter() - t0 < 300
    )
    print(f"    joint final {rep.avg_final:.2f}, S-1 {s1[0]:.1f} -> {s1[-1]:.1f}; source-free final {free.report.avg_final:.2f}")
    return ok


CHECKS: list[tuple[str, Callable[[], bool]]] = [
    ("js divergence bounds", check_js),
    ("pearson properties", check_pearson),
    ("k-means++ exact clusters", check_kmeans),
    ("key moving average", check_ema),
    ("debias closed form", check_debias),
    ("regularizer closed forms", check_regularizers),
    ("step schedules", check_schedules),
]


def run_selftest(quick: bool = False) -> bool:
    checks = CHECKS if quick else CHECKS + [("synthetic end-to-end", check_end_to_end)]
    failed = []
    for name, fn in checks:
        try:
            ok = bool(fn())
        except Exception as e:  # noqa: BLE001 - report any failure as a failed check
            print(f"    {name}: {type(e).__name__}: {e}")
            ok = False
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        if not ok:
            failed.append(name)
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return not failed
