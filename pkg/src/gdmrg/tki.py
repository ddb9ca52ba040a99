"""
Topological knowledge internalization: a two-layer GCN over Ã whose output
is reshaped into the main classifier's weight tensor W [N_d, 4, D_h].

    H1 = Dropout(ReLU(Ã H0 W0))
    W  = Reshape(Ã H1 W1)
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import DataError, ShapeError
from .labels import N_STATES, ClinicalState, node_key
from .numcore import DTYPE, Rng, dropout, matmul, relu


def tki_forward(
    a_tilde: torch.Tensor,
    h0: torch.Tensor,
    w_gcn0: torch.Tensor,
    w_gcn1: torch.Tensor,
    dropout_rate: float = 0.0,
    training: bool = False,
) -> torch.Tensor:
    n = a_tilde.shape[0]
    if a_tilde.shape != (n, n) or h0.shape[0] != n:
        raise ShapeError("tki_forward", a_tilde.shape, h0.shape, "Ã must be N_d x N_d matching H0 rows")
    if w_gcn1.shape[1] % N_STATES:
        raise ShapeError("tki_forward", w_gcn1.shape, (w_gcn1.shape[0], N_STATES), "columns must be C * D_h")
    h1 = dropout(relu(matmul(matmul(a_tilde, h0), w_gcn0)), dropout_rate, training)
    flat = matmul(matmul(a_tilde, h1), w_gcn1)
    return flat.reshape(n, N_STATES, -1)


class TopologicalInternalization(nn.Module):
    """
    Emits W from (Ã, H0). With use_graph=False the module degenerates to a
    free W parameter (the "w/o graph" ablation); Ã is then unused.
    """

    def __init__(
        self,
        a_tilde: np.ndarray | torch.Tensor,
        h0: torch.Tensor,
        d_g: int,
        d_h: int,
        dropout_rate: float = 0.1,
        train_embeddings: bool = True,
        use_graph: bool = True,
    ):
        super().__init__()
        a = torch.as_tensor(np.asarray(a_tilde), dtype=DTYPE)
        self.register_buffer("a_tilde", a)
        self.n_nodes = a.shape[0]
        self.d_h = d_h
        self.use_graph = use_graph
        self.dropout_rate = dropout_rate
        if use_graph:
            d_e = h0.shape[1]
            self.h0 = nn.Parameter(h0.to(DTYPE).clone(), requires_grad=train_embeddings)
            self.w_gcn0 = nn.Parameter(torch.empty(d_e, d_g, dtype=DTYPE))
            self.w_gcn1 = nn.Parameter(torch.empty(d_g, N_STATES * d_h, dtype=DTYPE))
            nn.init.xavier_uniform_(self.w_gcn0)
            nn.init.xavier_uniform_(self.w_gcn1)
        else:
            self.w_free = nn.Parameter(torch.empty(self.n_nodes, N_STATES, d_h, dtype=DTYPE))
            nn.init.normal_(self.w_free, std=d_h ** -0.5)

    def forward(self) -> torch.Tensor:
        if not self.use_graph:
            return self.w_free
        return tki_forward(self.a_tilde, self.h0, self.w_gcn0, self.w_gcn1, self.dropout_rate, self.training)


def mean_centered_cosine(w: torch.Tensor | np.ndarray, state: ClinicalState | int = ClinicalState.POS) -> np.ndarray:
    """Cosine similarity of per-disease vectors after removing the cross-disease mean."""
    arr = w.detach().cpu().numpy() if isinstance(w, torch.Tensor) else np.asarray(w)
    vecs = arr[:, int(state), :].astype(np.float64)
    centered = vecs - vecs.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    scale = np.max(np.abs(vecs)) if vecs.size else 0.0
    alive = norms > 1e-12 * max(scale, 1.0)
    unit = np.zeros_like(centered)
    unit[alive] = centered[alive] / norms[alive, None]
    s = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(s, 1.0)
    return s


def pair_similarity(s: np.ndarray, names, a: str, b: str) -> float:
    names = list(names)
    return float(s[names.index(a), names.index(b)])


def pgm_from_similarity(s: np.ndarray, path: str | Path) -> Path:
    """Binary 8-bit PGM, linear map [-1, 1] -> [0, 255]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.rint((np.clip(s, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def load_or_init_embeddings(
    path: str | Path | None,
    d_e: int,
    seed: int,
    names,
) -> torch.Tensor:
    """
    Node embeddings H0 in the given node order.

    File format: one line per node, `Node_Name v1 ... v_de` (spaces inside
    names written as underscores). Without a file: N(0, 0.02^2), seeded.
    """
    names = list(names)
    if path is None:
        gen = Rng(seed).derive(0xE3B).numpy_generator()
        return torch.as_tensor(gen.normal(0.0, 0.02, size=(len(names), d_e)), dtype=DTYPE)

    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding file not found: {path}")
    wanted = {node_key(n): i for i, n in enumerate(names)}
    rows: dict[int, np.ndarray] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        if key not in wanted:
            raise DataError(f"{path}:{lineno}: unknown node '{key}'")
        if len(parts) - 1 != d_e:
            raise DataError(f"{path}:{lineno}: expected {d_e} values for '{key}', got {len(parts) - 1}")
        if wanted[key] in rows:
            raise DataError(f"{path}:{lineno}: duplicate node '{key}'")
        try:
            rows[wanted[key]] = np.array([float(v) for v in parts[1:]], dtype=np.float64)
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e

    missing = [node_key(n) for i, n in enumerate(names) if i not in rows]
    if missing:
        raise DataError(f"{path}: missing node(s) {', '.join(missing)} (file has {len(rows)} lines)")
    return torch.as_tensor(np.stack([rows[i] for i in range(len(names))]), dtype=DTYPE)
