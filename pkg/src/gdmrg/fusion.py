"""
Diagnosis-guided spatial attention (DGSA) and the convex gating fusion.

Queries are patch queries shifted by the projected diagnostic feature,
Q_i = P_q(V_i) + P_qc(f_cond), so the block keeps its B x N x D shape while
every position sees the diagnostic signal.
"""
from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .numcore import Dropout, linear, norm, relu, scaled_dot_attention, sigmoid
from .vision import gap


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, d_kv: int | None = None):
        super().__init__()
        if d % heads:
            raise ConfigError(f"model width {d} is not divisible by {heads} heads")
        d_kv = d if d_kv is None else d_kv
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.fc_q = linear(d, d)
        self.fc_k = linear(d_kv, d)
        self.fc_v = linear(d_kv, d)
        self.fc_o = linear(d, d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        mask: torch.Tensor | None = None,
        query_bias: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """
        query [B, Tq, d], key/value [B, Tk, d_kv]; query_bias [B, d] is added to
        every projected query. Returns (output [B, Tq, d], weights [B, h, Tq, Tk]).
        """
        if query.shape[0] != key.shape[0] or key.shape[:2] != value.shape[:2]:
            raise ShapeError("attention", query.shape, key.shape)
        q = self.fc_q(query)
        if query_bias is not None:
            if query_bias.shape != (query.shape[0], self.d):
                raise ShapeError("attention.query_bias", query_bias.shape, (query.shape[0], self.d))
            q = q + query_bias[:, None, :]
        out, weights = scaled_dot_attention(self._split(q), self._split(self.fc_k(key)), self._split(self.fc_v(value)), mask)
        b, _, t, _ = out.shape
        return self.fc_o(out.transpose(1, 2).reshape(b, t, self.d)), weights


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.fc_1 = linear(d, hidden)
        self.fc_2 = linear(hidden, d)
        self.dropout = Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc_2(self.dropout(relu(self.fc_1(x))))


class DgsaBlock(nn.Module):
    """Attention + residual + LN, FFN + residual + LN (post-norm)."""

    def __init__(self, d: int, d_f: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.cond_proj = linear(d_f, d)
        self.attn = MultiHeadAttention(d, heads)
        self.ln1 = norm(d)
        self.ffn = FeedForward(d, 2 * d, dropout)
        self.ln2 = norm(d)
        self.dropout = Dropout(dropout)

    def forward(self, v: torch.Tensor, f_cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a, weights = self.attn(v, v, v, query_bias=self.cond_proj(f_cond))
        x = self.ln1(v + self.dropout(a))
        x = self.ln2(x + self.dropout(self.ffn(x)))
        return x, weights


class DiagnosisGuidedAttention(nn.Module):
    def __init__(self, d: int, d_f: int, heads: int = 4, n_blocks: int = 1, dropout: float = 0.0):
        super().__init__()
        self.d = d
        self.d_f = d_f
        self.blocks = nn.ModuleList(DgsaBlock(d, d_f, heads, dropout) for _ in range(n_blocks))

    def forward(self, f_cond: torch.Tensor, v_spatial: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if v_spatial.dim() != 3 or v_spatial.shape[-1] != self.d:
            raise ShapeError("dgsa", v_spatial.shape, (-1, -1, self.d))
        if f_cond.shape != (v_spatial.shape[0], self.d_f):
            raise ShapeError("dgsa", f_cond.shape, (v_spatial.shape[0], self.d_f))
        x, weights = v_spatial, None
        for block in self.blocks:
            x, weights = block(x, f_cond)
        return x, weights


def dgsa(f_cond: torch.Tensor, v_spatial: torch.Tensor, module: DiagnosisGuidedAttention) -> torch.Tensor:
    return module(f_cond, v_spatial)[0]


class FusionGate(nn.Module):
    """g = sigmoid(MLP([GAP(V_spatial), GAP(V_attn)])), one scalar per item."""

    def __init__(self, d: int, init_bias: float = -2.0):
        super().__init__()
        self.fc_1 = linear(2 * d, max(d // 2, 1))
        self.fc_2 = linear(max(d // 2, 1), 1)
        nn.init.constant_(self.fc_2.bias, init_bias)

    def forward(self, v_spatial: torch.Tensor, v_attn: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([gap(v_spatial), gap(v_attn)], dim=-1)
        return sigmoid(self.fc_2(relu(self.fc_1(pooled)))).squeeze(-1)


def gate_fuse(
    v_spatial: torch.Tensor,
    v_attn: torch.Tensor,
    gate: FusionGate,
    cap: float = 1.0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """V_fused = (1 - g) V_spatial + g V_attn with g capped by the curriculum."""
    if v_spatial.shape != v_attn.shape:
        raise ShapeError("gate_fuse", v_spatial.shape, v_attn.shape)
    g = gate(v_spatial, v_attn)
    if cap < 1.0:
        g = torch.clamp(g, max=cap)
    fused = v_spatial + g[:, None, None] * (v_attn - v_spatial)
    # rounding can step one ulp outside the sources
    lo = torch.minimum(v_spatial, v_attn).detach()
    hi = torch.maximum(v_spatial, v_attn).detach()
    fused = torch.clamp(fused, lo, hi)
    return fused, g


def curriculum_cap(step: int, ramp_steps: int, start: float = 0.2) -> float:
    """Gate cap rising linearly start -> 1 over the first ramp_steps joint steps."""
    if ramp_steps <= 0:
        return 1.0
    return start + (1.0 - start) * min(step / ramp_steps, 1.0)
