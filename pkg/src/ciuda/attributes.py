"""Source/target attribute dictionaries: visual keys paired with soft-prompt values."""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.cluster import KMeans

from .encoders.base import VisualFeature, l2_normalize
from .errors import ContractViolation, DegenerateInputError, LoadError, SizingError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6
VALUE_INIT_STD = 0.02


@dataclass
class Attribute:
    key: torch.Tensor
    value: torch.Tensor
    index: int


@dataclass
class SelectionResult:
    indices: torch.Tensor
    scores: torch.Tensor

    def __len__(self):
        return self.indices.shape[-1]


class AttributeDictionary:
    """``N`` attributes of one domain.

    ``keys`` ``[N, D]`` are unit-norm visual prototypes and never receive
    gradients; ``values`` ``[N, M, d]`` is the trainable leaf tensor.
    """

    def __init__(self, domain: str, keys: torch.Tensor, values: torch.Tensor, created_at_step: int = 0, keys_frozen: bool | None = None):
        if domain not in ("source", "target"):
            raise ContractViolation(f"unknown dictionary domain {domain!r}")
        if keys.shape[0] != values.shape[0]:
            raise SizingError(f"{keys.shape[0]} keys but {values.shape[0]} values")
        self.domain = domain
        self.keys = l2_normalize(keys.detach())
        self.values = values.detach().clone().requires_grad_(True)
        self.created_at_step = created_at_step
        self.keys_frozen = domain == "source" if keys_frozen is None else keys_frozen

    @classmethod
    def initialize(cls, domain: str, keys: torch.Tensor, M: int, token_dim: int, seed: int, dtype=None, step: int = 0):
        gen = torch.Generator().manual_seed(seed)
        dtype = dtype or keys.dtype
        values = torch.randn(keys.shape[0], M, token_dim, generator=gen, dtype=torch.float64) * VALUE_INIT_STD
        return cls(domain, keys, values.to(dtype), created_at_step=step)

    @property
    def N(self) -> int:
        return self.keys.shape[0]

    @property
    def M(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.N

    def attributes(self) -> list[Attribute]:
        return [Attribute(self.keys[i], self.values[i], i) for i in range(self.N)]

    def snapshot(self) -> "AttributeDictionary":
        return AttributeDictionary(self.domain, self.keys.clone(), self.values.detach().clone(), self.created_at_step, self.keys_frozen)

    def key_checksum(self) -> str:
        return hashlib.sha256(self.keys.detach().cpu().numpy().tobytes()).hexdigest()

    def value_checksum(self) -> str:
        return hashlib.sha256(self.values.detach().cpu().numpy().tobytes()).hexdigest()


def _as_matrix(features) -> torch.Tensor:
    if isinstance(features, torch.Tensor):
        return features.detach()
    return torch.stack([f.vector.detach() if isinstance(f, VisualFeature) else torch.as_tensor(f) for f in features])


def _check_distinct(x: np.ndarray, N: int):
    distinct = np.unique(x, axis=0).shape[0]
    if distinct < N:
        raise DegenerateInputError(f"only {distinct} distinct points for {N} clusters (deficit {N - distinct})")


def _kmeans(x: np.ndarray, N: int, seed: int, init="k-means++") -> np.ndarray:
    km = KMeans(n_clusters=N, init=init, n_init=1, max_iter=KMEANS_MAX_ITER, tol=KMEANS_TOL, random_state=seed, algorithm="lloyd")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        km.fit(x)
    return km.cluster_centers_


def init_keys_kmeanspp(features, N: int, seed: int = 0) -> torch.Tensor:
    """k-means++ centroids of unit features, re-normalized to the sphere."""
    x = _as_matrix(features)
    if x.shape[0] < N:
        raise SizingError(f"need at least N={N} features for clustering, got {x.shape[0]}")
    arr = x.cpu().numpy().astype(np.float64)
    _check_distinct(arr, N)
    centers = _kmeans(arr, N, seed)
    return l2_normalize(torch.as_tensor(centers, dtype=x.dtype))


def greedy_match(sim: torch.Tensor) -> list[tuple[int, int]]:
    """One-to-one (row, col) pairs taken in order of decreasing similarity.

    Ties resolve toward the lower row, then the lower column.
    """
    n_rows, n_cols = sim.shape
    flat = sim.flatten()
    order = torch.sort(-flat, stable=True).indices
    used_r, used_c, pairs = set(), set(), []
    for idx in order.tolist():
        r, c = divmod(idx, n_cols)
        if r in used_r or c in used_c:
            continue
        pairs.append((r, c))
        used_r.add(r)
        used_c.add(c)
        if len(pairs) == min(n_rows, n_cols):
            break
    return sorted(pairs)


def update_target_keys_ema(dictionary: AttributeDictionary, step_features, mu: float = 0.9, seed: int = 0) -> AttributeDictionary:
    if dictionary.domain != "target":
        raise ContractViolation("moving-average key updates apply to the target dictionary only")
    if not 0 < mu < 1:
        raise SizingError(f"EMA coefficient must lie in (0, 1), got {mu}")
    x = _as_matrix(step_features)
    N = dictionary.N
    if x.shape[0] < N:
        log.warning("skipping target key update: %d features for %d keys", x.shape[0], N)
        return dictionary
    arr = x.cpu().numpy().astype(np.float64)
    try:
        _check_distinct(arr, N)
    except DegenerateInputError as e:
        log.warning("skipping target key update: %s", e)
        return dictionary
    centers = _kmeans(arr, N, seed, init=dictionary.keys.cpu().numpy().astype(np.float64))
    centroids = l2_normalize(torch.as_tensor(centers, dtype=dictionary.keys.dtype))
    keys = dictionary.keys.clone()
    for k, c in greedy_match(keys @ centroids.T):
        keys[k] = mu * keys[k] + (1 - mu) * centroids[c]
    dictionary.keys = l2_normalize(keys)
    return dictionary


def select_top_l_batch(keys: torch.Tensor, z: torch.Tensor, L: int) -> SelectionResult:
    """Top-``L`` keys by cosine for each row of ``z`` (``[B, D]``)."""
    N = keys.shape[0]
    if not 1 <= L <= N:
        raise SizingError(f"L={L} must satisfy 1 <= L <= N={N}")
    cos = l2_normalize(z.detach()) @ keys.T
    scores, indices = torch.sort(cos, dim=-1, descending=True, stable=True)
    return SelectionResult(indices[..., :L], scores[..., :L])


def select_top_l(dictionary: AttributeDictionary, z, L: int) -> SelectionResult:
    vec = z.vector if isinstance(z, VisualFeature) else z
    res = select_top_l_batch(dictionary.keys, vec.reshape(1, -1).to(dictionary.keys.dtype), L)
    return SelectionResult(res.indices[0], res.scores[0])


# -- persistence ---------------------------------------------------------------

def save_dictionary(dictionary: AttributeDictionary, path) -> Path:
    path = Path(path)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "domain": dictionary.domain,
        "created_at_step": dictionary.created_at_step,
        "keys_frozen": dictionary.keys_frozen,
        "N": dictionary.N,
        "M": dictionary.M,
        "D": dictionary.keys.shape[1],
        "token_dim": dictionary.values.shape[2],
        "dtype": str(dictionary.keys.dtype).replace("torch.", ""),
    }
    with open(path, "wb") as f:
        np.savez(
            f,
            meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
            keys=dictionary.keys.detach().cpu().numpy(),
            values=dictionary.values.detach().cpu().numpy(),
        )
    return path


def load_dictionary(path, expected: dict | None = None) -> AttributeDictionary:
    """Load a dictionary file; ``expected`` may pin any of N, M, D, token_dim, domain."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            keys, values = z["keys"], z["values"]
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise LoadError(f"corrupt dictionary file {path}: {e}") from e
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise LoadError(f"dictionary schema version mismatch: expected {SCHEMA_VERSION}, got {meta.get('schema_version')}")
    for name, want in (expected or {}).items():
        if meta.get(name) != want:
            raise LoadError(f"dictionary {name} mismatch: expected {want}, file has {meta.get(name)}")
    if keys.shape != (meta["N"], meta["D"]) or values.shape != (meta["N"], meta["M"], meta["token_dim"]):
        raise LoadError(f"dictionary arrays do not match header in {path}")
    d = AttributeDictionary(meta["domain"], torch.from_numpy(keys.copy()), torch.from_numpy(values.copy()), meta["created_at_step"], meta["keys_frozen"])
    # constructor re-normalizes; keep the stored keys bit-exact
    d.keys = torch.from_numpy(keys.copy())
    return d
