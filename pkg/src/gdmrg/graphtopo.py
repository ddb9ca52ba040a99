"""
Disease co-occurrence graph construction.

    M   = Y^T Y                              (count_cooccurrence)
    M'  = M_ij / sqrt(M_ii M_jj)             (geometric_normalize)
    A   = 1[M' > t_phi], off-diagonal        (threshold_edges, nearest-rank t_phi)
    Ã   = D^-1/2 (A + I) D^-1/2              (normalize_adjacency)
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class CoocCounts:
    m: np.ndarray  # int64, symmetric, M_ii = positive count of i

    @property
    def n_nodes(self) -> int:
        return self.m.shape[0]


@dataclass(frozen=True)
class NormalizedAdjacency:
    a_tilde: np.ndarray
    a_thresh: np.ndarray
    phi: float
    threshold: float | None
    retained_edges: int
    mode: str = "tki"


def count_cooccurrence(binary: np.ndarray, n_nodes: int | None = None) -> CoocCounts:
    y = np.asarray(binary)
    if y.ndim != 2:
        if y.size == 0 and n_nodes is not None:
            y = y.reshape(0, n_nodes)
        else:
            raise ValueError(f"binary labels must be 2-D (n, n_nodes), got shape {y.shape}")
    if y.size and not np.isin(y, (0, 1)).all():
        bad = np.argwhere(~np.isin(y, (0, 1)))[0]
        raise ValueError(f"non-binary label {y[tuple(bad)]!r} at row {bad[0]}, column {bad[1]}")
    y = y.astype(np.int64)
    return CoocCounts(m=y.T @ y)


def geometric_normalize(counts: CoocCounts | np.ndarray) -> np.ndarray:
    """M'_ij = M_ij / sqrt(M_ii M_jj); rows/cols of never-seen diseases are 0."""
    m = counts.m if isinstance(counts, CoocCounts) else np.asarray(counts)
    m = m.astype(np.float64)
    diag = np.diag(m)
    denom = np.sqrt(np.outer(diag, diag))
    out = np.zeros_like(m)
    np.divide(m, denom, out=out, where=denom > 0)
    return out


def nearest_rank_threshold(m_prime: np.ndarray, phi: float) -> float | None:
    """phi-th nearest-rank percentile of the strictly-upper-triangle entries."""
    if not 0.0 <= phi < 100.0:
        raise ValueError(f"phi must be in [0, 100), got {phi}")
    n = m_prime.shape[0]
    values = np.sort(m_prime[np.triu_indices(n, k=1)])
    if values.size == 0:
        return None
    rank = max(1, math.ceil(phi * values.size / 100.0 - 1e-9))
    return float(values[rank - 1])


def threshold_edges(m_prime: np.ndarray, phi: float) -> tuple[np.ndarray, float | None]:
    """Binary symmetric edge matrix (zero diagonal); ties with the threshold are dropped."""
    n = m_prime.shape[0]
    t = nearest_rank_threshold(m_prime, phi)
    a = np.zeros((n, n), dtype=np.float64)
    if t is None:
        return a, None
    iu = np.triu_indices(n, k=1)
    a[iu] = (m_prime[iu] > t).astype(np.float64)
    return a + a.T, t


def normalize_adjacency(a_thresh: np.ndarray) -> np.ndarray:
    a_hat = a_thresh + np.eye(a_thresh.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return d_inv_sqrt[:, None] * a_hat * d_inv_sqrt[None, :]


def build_adjacency(m_prime: np.ndarray, phi: float = 90.0) -> NormalizedAdjacency:
    a_thresh, t = threshold_edges(m_prime, phi)
    return NormalizedAdjacency(
        a_tilde=normalize_adjacency(a_thresh),
        a_thresh=a_thresh,
        phi=float(phi),
        threshold=t,
        retained_edges=int(np.triu(a_thresh, k=1).sum()),
    )


def vanilla_adjacency(counts: CoocCounts | np.ndarray) -> NormalizedAdjacency:
    """Raw counts with self-loops, row-normalized (no geometric scaling, no threshold)."""
    m = counts.m if isinstance(counts, CoocCounts) else np.asarray(counts)
    a_hat = m.astype(np.float64) + np.eye(m.shape[0])
    a_tilde = a_hat / a_hat.sum(axis=1, keepdims=True)
    off = (m > 0).astype(np.float64)
    np.fill_diagonal(off, 0.0)
    return NormalizedAdjacency(
        a_tilde=a_tilde,
        a_thresh=off,
        phi=float("nan"),
        threshold=None,
        retained_edges=int(np.triu(off, k=1).sum()),
        mode="vanilla",
    )


def spectral_radius(a: np.ndarray, steps: int = 200, seed: int = 0) -> float:
    """Power-iteration estimate of the largest eigenvalue magnitude."""
    v = np.random.default_rng(seed).random(a.shape[0]) + 0.1
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(steps):
        w = a @ v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


def mc_cooccurrence_oracle(gen_config, n_mc: int, seed: int, use_latent: bool = False) -> CoocCounts:
    """Monte-Carlo co-occurrence counts of the synthetic generator's labels."""
    from .datagen import sample_labels_batch
    from .numcore import Rng

    if n_mc < 1:
        raise ValueError(f"n_mc must be >= 1, got {n_mc}")
    latent, binary = sample_labels_batch(gen_config, Rng(seed).numpy_generator(), n_mc)
    return count_cooccurrence(latent if use_latent else binary)


def dump_matrices(stages: Mapping[str, np.ndarray], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, mat in stages.items():
        path = out_dir / f"{name}.csv"
        fmt = "%d" if np.issubdtype(np.asarray(mat).dtype, np.integer) else "%.17g"
        np.savetxt(path, np.asarray(mat), delimiter=",", header=f"stage={name}", fmt=fmt)
        written.append(path)
    return written
