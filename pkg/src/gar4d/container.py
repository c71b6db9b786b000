"""Propagated state pool over historical token groups.

Scoring and cluster selection follow k-NN density peaks: a token's local
density is exp(-mean squared distance to its K nearest neighbors), its
separation is the squared distance to the nearest strictly-denser token
(the densest token instead takes its maximum squared distance to anyone),
and the top rho*separation tokens become cluster centers.

Scoring runs in float64 numpy and is deliberately gradient-free: cluster
assignment is discrete and receives no gradient. Learning happens in the
torch half (dissimilarity scores, weighted merge, attention refinement,
conditioning projection).
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


@dataclass
class ContainerConfig:
    knn: int = 8               # K nearest neighbors for local density
    centers: int = 32          # M cluster centers kept per update
    density_scope: str = "pooled"  # "pooled" | "group": where KNN may look

    def __post_init__(self):
        if self.knn < 1:
            raise ValueError("knn must be >= 1")
        if self.centers < 1:
            raise ValueError("centers must be >= 1")
        if self.density_scope not in ("pooled", "group"):
            raise ValueError(f"unknown density_scope {self.density_scope!r}")


def _pairwise_sq(features: np.ndarray, block: int = 64) -> np.ndarray:
    """Full (N, N) squared-distance matrix, float64, plain subtract/square/sum.

    Row-blocked for cache friendliness; each entry is still an independent
    contiguous length-D reduction, so the result is bit-identical to the
    unblocked broadcast.
    """
    x = np.ascontiguousarray(features, dtype=np.float64)
    n = x.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    for s in range(0, n, block):
        e = min(s + block, n)
        out[s:e] = ((x[s:e, None, :] - x[None, :, :]) ** 2).sum(axis=-1)
    return out


def local_density(features, k: int, groups=None) -> np.ndarray:
    """rho_i = exp(-(sum of the K smallest squared neighbor distances) / K).

    Self is excluded from the neighborhood. If ``groups`` is given, a
    token's neighbors are restricted to its own group. Requires
    2 <= N and 1 <= k <= N - 1 (k <= group size - 1 in per-group mode).
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("local density needs at least two features")
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k <= {n - 1}, got {k}")
    work = _pairwise_sq(x)
    np.fill_diagonal(work, np.inf)
    if groups is not None:
        groups = np.asarray(groups)
        same = groups[:, None] == groups[None, :]
        work = np.where(same, work, np.inf)
        counts = same.sum(axis=1)  # includes self
        if int(counts.min()) <= k:
            raise ValueError(
                f"k={k} exceeds the smallest group ({int(counts.min())} tokens)"
            )
    nearest = np.sort(work, axis=1)[:, :k].copy()
    return np.exp(-(nearest.sum(axis=1) / k))


def separation_score(features, rho) -> np.ndarray:
    """Min squared distance to any strictly denser token; max distance if none."""
    x = np.asarray(features, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    d2 = _pairwise_sq(x)
    higher = rho[None, :] > rho[:, None]  # higher[i, j]: token j strictly denser
    masked = np.where(higher, d2, np.inf)
    has_higher = higher.any(axis=1)
    return np.where(has_higher, masked.min(axis=1), d2.max(axis=1))


@dataclass
class ClusterResult:
    centers: np.ndarray      # (M,) pool indices, in descending-score rank order
    assignment: np.ndarray   # (N,) cluster id in [0, M)
    rho: np.ndarray
    varpi: np.ndarray

    @property
    def scores(self) -> np.ndarray:
        return self.rho * self.varpi

    @property
    def num_clusters(self) -> int:
        return len(self.centers)


def select_and_assign(features, rho, varpi, m: int) -> ClusterResult:
    """Pick the top-m rho*varpi tokens as centers and assign the rest.

    Score ties break toward the lower token index; assignment goes to the
    nearest center in squared distance, ties toward the higher-ranked
    center. Centers always belong to their own cluster.
    """
    x = np.asarray(features, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    varpi = np.asarray(varpi, dtype=np.float64)
    n = x.shape[0]
    if not (1 <= m <= n):
        raise ValueError(f"m must satisfy 1 <= m <= {n}, got {m}")
    order = np.argsort(-(rho * varpi), kind="stable")
    centers = order[:m]
    d2c = ((x[:, None, :] - x[centers][None, :, :]) ** 2).sum(axis=-1)
    assignment = d2c.argmin(axis=1)
    assignment[centers] = np.arange(m)
    return ClusterResult(centers=centers, assignment=assignment, rho=rho, varpi=varpi)


@dataclass
class ContainerState:
    """Pool of historical group token features plus the current merged set."""

    features: torch.Tensor   # (N, D)
    group_ids: np.ndarray    # (N,) 1-based group of each pooled token
    view_ids: np.ndarray     # (N,)
    position_ids: np.ndarray  # (N,) flattened (spatial, chunk) index
    merged: torch.Tensor     # (M', D); empty before the first update
    last_cluster: ClusterResult | None = None

    @property
    def pool_size(self) -> int:
        return self.features.shape[0]


class StateContainer(nn.Module):
    """Learned merge/refine stack over the DPC-selected clusters."""

    def __init__(self, dim: int, out_dim: int, config: ContainerConfig | None = None,
                 n_heads: int = 4):
        super().__init__()
        self.config = config or ContainerConfig()
        self.dim = dim
        self.out_dim = out_dim
        self.n_heads = n_heads
        self.dissim_net = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, 1))
        self.refine_qkv = nn.Linear(dim, 3 * dim)
        self.refine_out = nn.Linear(dim, dim)
        # zero-init output projection: refinement starts as the identity
        nn.init.zeros_(self.refine_out.weight)
        nn.init.zeros_(self.refine_out.bias)
        self.inject_net = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, out_dim))

    def empty_state(self) -> ContainerState:
        empty = torch.zeros((0, self.dim))
        no_ids = np.zeros((0,), dtype=np.int64)
        return ContainerState(empty, no_ids, no_ids.copy(), no_ids.copy(), empty.clone())

    def dissim_scores(self, features: torch.Tensor) -> torch.Tensor:
        """Strictly positive per-token merge weights, (N,)."""
        return F.softplus(self.dissim_net(features).squeeze(-1)) + 1e-8

    def merge(self, features: torch.Tensor, cluster: ClusterResult,
              sigma: torch.Tensor) -> torch.Tensor:
        """Per-cluster convex combination under within-cluster-normalized sigma."""
        if sigma.shape[0] != features.shape[0]:
            raise ValueError("sigma length must match feature count")
        out = []
        for c in range(cluster.num_clusters):
            idx = torch.as_tensor(np.nonzero(cluster.assignment == c)[0])
            w = sigma[idx]
            w = w / w.sum()
            out.append((w.unsqueeze(-1) * features[idx]).sum(dim=0))
        return torch.stack(out)

    def refine(self, merged: torch.Tensor) -> torch.Tensor:
        """Multi-head self-attention + residual over the merged vectors."""
        m, d = merged.shape
        if m == 0:
            return merged
        q, k, v = self.refine_qkv(merged).chunk(3, dim=-1)
        hd = d // self.n_heads
        q = q.view(m, self.n_heads, hd).transpose(0, 1)
        k = k.view(m, self.n_heads, hd).transpose(0, 1)
        v = v.view(m, self.n_heads, hd).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        mixed = (attn @ v).transpose(0, 1).reshape(m, d)
        return merged + self.refine_out(mixed)

    def update(self, state: ContainerState, new_features: torch.Tensor,
               group_id: int, view_ids, position_ids) -> ContainerState:
        """Extend the pool with a finished group and recompute the merged set."""
        new_features = new_features.reshape(-1, self.dim)
        g = new_features.shape[0]
        pool = torch.cat([state.features, new_features], dim=0)
        group_ids = np.concatenate([state.group_ids, np.full(g, group_id, dtype=np.int64)])
        view_ids = np.concatenate([state.view_ids, np.asarray(view_ids, dtype=np.int64)])
        position_ids = np.concatenate(
            [state.position_ids, np.asarray(position_ids, dtype=np.int64)]
        )

        n = pool.shape[0]
        if n == 1:
            # degenerate pool (only reachable in toy setups): skip clustering
            merged = self.refine(pool)
            return ContainerState(pool, group_ids, view_ids, position_ids, merged, None)

        feats64 = pool.detach().numpy()
        if self.config.density_scope == "group":
            counts = np.bincount(group_ids)
            min_count = int(counts[counts > 0].min())
            k_eff = max(min(self.config.knn, min_count - 1), 1)
            rho = local_density(feats64, k_eff, groups=group_ids)
        else:
            k_eff = min(self.config.knn, n - 1)
            rho = local_density(feats64, k_eff)
        varpi = separation_score(feats64, rho)
        cluster = select_and_assign(feats64, rho, varpi, min(self.config.centers, n))

        sigma = self.dissim_scores(pool)
        merged = self.refine(self.merge(pool, cluster, sigma))
        return ContainerState(pool, group_ids, view_ids, position_ids, merged, cluster)

    def inject(self, state: ContainerState) -> torch.Tensor:
        """Project the merged set into conditioning vectors, (M', out_dim)."""
        if state.merged.shape[0] == 0:
            return state.merged.new_zeros((0, self.out_dim))
        return self.inject_net(state.merged)
