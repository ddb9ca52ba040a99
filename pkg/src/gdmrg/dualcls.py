"""
Dual-stream classifier.

Main stream: logits[b, d, c] = <W[d, c, :], x_b> + bias[d, c], with W coming
from the GCN (weight tying), trained with 4-state cross-entropy (or WFL).
Auxiliary stream: f_cond = ReLU(A x), p = sigmoid(B f_cond), trained with a
binary loss (T-ASL, ASL, MBCE) and thresholded with per-class OTS.

T-ASL, as implemented here:

    p~  = clamp(p, delta, 1 - delta)          # no gradient outside the band
    p_m = max(p~ - m, 0)
    L   = -mean[ y (1 - p~)^g+ log p~ + (1 - y) p_m^g- log(1 - p_m) ]
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, ShapeError
from .labels import N_STATES, ClinicalState
from .numcore import DTYPE, linear, relu, sigmoid

DEFAULT_OTS_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
MAIN_LOSSES = ("ce", "wfl")
AUX_LOSSES = ("none", "mbce", "asl", "tasl")


# ---------------- main stream ----------------

def main_forward(x: torch.Tensor, w: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.dim() != 2 or w.dim() != 3 or x.shape[1] != w.shape[2]:
        raise ShapeError("main_forward", x.shape, w.shape, "x is B x D_h, W is N_d x 4 x D_h")
    logits = torch.einsum("bh,dch->bdc", x, w)
    if bias is not None:
        logits = logits + bias
    return logits


class MainHead(nn.Module):
    """Holds only the per-(disease, state) bias; the weights arrive from the GCN."""

    def __init__(self, n_nodes: int):
        super().__init__()
        self.bias = nn.Parameter(torch.zeros(n_nodes, N_STATES, dtype=DTYPE))

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        return main_forward(x, w, self.bias)


def _check_states(states: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    if states.shape != logits.shape[:2]:
        raise ShapeError("main_ce_loss", logits.shape, states.shape)
    states = states.long()
    if states.numel() and (states.min() < 0 or states.max() >= N_STATES):
        bad = states[(states < 0) | (states >= N_STATES)][0].item()
        raise ValueError(f"state label {bad} out of range 0..{N_STATES - 1}")
    return states


def main_ce_loss(logits: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
    states = _check_states(states, logits)
    log_p = torch.log_softmax(logits, dim=-1)
    return -log_p.gather(-1, states.unsqueeze(-1)).mean()


def state_class_weights(states: np.ndarray, clip: tuple[float, float] = (0.1, 50.0)) -> np.ndarray:
    """Inverse-frequency (disease, state) weights n / (C * count), clipped."""
    states = np.asarray(states, dtype=np.int64)
    n, n_nodes = states.shape
    counts = np.stack([(states == c).sum(axis=0) for c in range(N_STATES)], axis=1).astype(np.float64)
    w = np.full_like(counts, clip[1])
    np.divide(n, N_STATES * counts, out=w, where=counts > 0)
    return np.clip(w, *clip)


def weighted_focal_loss(
    logits: torch.Tensor,
    states: torch.Tensor,
    weights: torch.Tensor | np.ndarray | None = None,
    gamma: float = 2.0,
) -> torch.Tensor:
    """-w[d, c] (1 - p_c)^gamma log p_c, averaged over batch and diseases."""
    states = _check_states(states, logits)
    log_p = torch.log_softmax(logits, dim=-1).gather(-1, states.unsqueeze(-1)).squeeze(-1)
    focal = (1.0 - log_p.exp()).clamp(min=0.0).pow(gamma) if gamma > 0 else 1.0
    loss = -focal * log_p
    if weights is not None:
        w = torch.as_tensor(np.asarray(weights), dtype=logits.dtype)
        loss = loss * w.gather(1, states.T).T
    return loss.mean()


def main_loss(kind: str, logits: torch.Tensor, states: torch.Tensor, class_weights=None) -> torch.Tensor:
    if kind == "ce":
        return main_ce_loss(logits, states)
    if kind == "wfl":
        return weighted_focal_loss(logits, states, class_weights)
    raise ConfigError(f"unknown main loss '{kind}' (choose from {', '.join(MAIN_LOSSES)})")


# ---------------- auxiliary stream ----------------

class AuxHead(nn.Module):
    def __init__(self, d_x: int, d_f: int, n_nodes: int):
        super().__init__()
        self.hidden = linear(d_x, d_f)
        self.out = linear(d_f, n_nodes)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f_cond = relu(self.hidden(x))
        return f_cond, sigmoid(self.out(f_cond))


def aux_forward(x: torch.Tensor, head: AuxHead) -> tuple[torch.Tensor, torch.Tensor]:
    return head(x)


@dataclass(frozen=True)
class TaslConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    margin: float = 0.05
    delta: float = 0.05

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ConfigError(f"focusing exponents must be >= 0, got {self.gamma_pos}, {self.gamma_neg}")
        if not 0.0 <= self.margin < 1.0:
            raise ConfigError(f"asl margin must be in [0, 1), got {self.margin}")
        if not 0.0 < self.delta < 0.5:
            raise ConfigError(f"tasl delta must be in (0, 0.5), got {self.delta}")


def _check_binary(p: torch.Tensor, y: torch.Tensor, op: str) -> torch.Tensor:
    if p.shape != y.shape:
        raise ShapeError(op, p.shape, y.shape)
    y = y.to(p.dtype)
    if y.numel() and not torch.all((y == 0) | (y == 1)):
        raise ValueError(f"{op}: targets must be binary")
    return y


def _focus(base: torch.Tensor, gamma: float) -> torch.Tensor | float:
    # pow(0, 0) has a NaN gradient
    return base.pow(gamma) if gamma > 0 else 1.0


def _asymmetric(p: torch.Tensor, y: torch.Tensor, cfg: TaslConfig, eps: float) -> torch.Tensor:
    p_m = (p - cfg.margin).clamp(min=0.0)
    pos = y * _focus(1.0 - p, cfg.gamma_pos) * torch.log(p.clamp(min=eps))
    neg = (1.0 - y) * _focus(p_m, cfg.gamma_neg) * torch.log((1.0 - p_m).clamp(min=eps))
    return -(pos + neg).mean()


def tasl_loss(p: torch.Tensor, y: torch.Tensor, cfg: TaslConfig = TaslConfig()) -> torch.Tensor:
    y = _check_binary(p, y, "tasl_loss")
    p_t = torch.clamp(p, cfg.delta, 1.0 - cfg.delta)
    return _asymmetric(p_t, y, cfg, eps=0.0)


def asl_loss(p: torch.Tensor, y: torch.Tensor, cfg: TaslConfig = TaslConfig(), eps: float = 1e-8) -> torch.Tensor:
    """Asymmetric loss without the probability band (logs floored at eps)."""
    y = _check_binary(p, y, "asl_loss")
    return _asymmetric(p, y, cfg, eps=eps)


def mbce_loss(p: torch.Tensor, y: torch.Tensor, states: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Binary cross-entropy over entries whose state is not BLA; 0 when none remain."""
    y = _check_binary(p, y, "mbce_loss")
    if states.shape != p.shape:
        raise ShapeError("mbce_loss", p.shape, states.shape)
    keep = (states != int(ClinicalState.BLA)).to(p.dtype)
    n = keep.sum()
    if n == 0:
        return p.sum() * 0.0
    bce = -(y * torch.log(p.clamp(min=eps)) + (1.0 - y) * torch.log((1.0 - p).clamp(min=eps)))
    return (bce * keep).sum() / n


def aux_loss(
    kind: str,
    p: torch.Tensor,
    y: torch.Tensor,
    states: torch.Tensor,
    cfg: TaslConfig = TaslConfig(),
) -> torch.Tensor:
    if kind == "tasl":
        return tasl_loss(p, y, cfg)
    if kind == "asl":
        return asl_loss(p, y, cfg)
    if kind == "mbce":
        return mbce_loss(p, y, states)
    if kind == "none":
        return p.sum() * 0.0
    raise ConfigError(f"unknown aux loss '{kind}' (choose from {', '.join(AUX_LOSSES)})")


# ---------------- thresholds and prompts ----------------

def _f1(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = float(np.sum(pred & truth))
    fp = float(np.sum(pred & ~truth))
    fn = float(np.sum(~pred & truth))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def ots(val_probs: np.ndarray, val_binary: np.ndarray, grid: Sequence[float] = DEFAULT_OTS_GRID) -> np.ndarray:
    """Per-class F1-maximizing threshold from the grid (ties -> smallest value)."""
    probs = np.asarray(val_probs, dtype=np.float64)
    truth = np.asarray(val_binary).astype(bool)
    if probs.shape != truth.shape or probs.ndim != 2:
        raise ShapeError("ots", probs.shape, truth.shape)
    grid = sorted(float(g) for g in grid)
    if not grid or not all(0.0 < g < 1.0 for g in grid):
        raise ConfigError(f"ots grid must be non-empty with values in (0, 1), got {grid}")

    tau = np.full(probs.shape[1], 0.5)
    for d in range(probs.shape[1]):
        if not truth[:, d].any():
            continue
        scores = [_f1(probs[:, d] >= t, truth[:, d]) for t in grid]
        tau[d] = grid[int(np.argmax(scores))]
    return tau


def decide_and_prompt(
    logits: torch.Tensor,
    p: torch.Tensor,
    tau: np.ndarray | Sequence[float] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    p_np = p.detach().cpu().numpy()
    tau = np.full(p_np.shape[1], 0.5) if tau is None else np.asarray(tau, dtype=np.float64)
    if tau.shape != (p_np.shape[1],):
        raise ShapeError("decide_and_prompt", p_np.shape, tau.shape)
    decisions = (p_np >= tau[None, :]).astype(np.int64)
    # argmax returns the first maximum, i.e. the lowest state code on ties
    prompt = logits.detach().argmax(dim=-1).cpu().numpy().astype(np.int64)
    return decisions, prompt


def write_thresholds(tau: np.ndarray, names: Sequence[str], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if len(tau) != len(names):
        raise ShapeError("write_thresholds", (len(tau),), (len(names),))
    path.write_text("".join(f"{n}\t{float(t):.17g}\n" for n, t in zip(names, tau)), encoding="utf-8")
    return path


def read_thresholds(path: str | Path, names: Sequence[str]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"threshold file not found: {path}")
    found: dict[str, float] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        name, sep, value = line.rpartition("\t")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected 'name<TAB>value'")
        try:
            found[name] = float(value)
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
    missing = [n for n in names if n not in found]
    if missing:
        raise DataError(f"{path}: missing threshold(s) for {', '.join(missing)}")
    return np.array([found[n] for n in names], dtype=np.float64)
