"""
Patch encoder (stand-in for the CNN backbone), global average pooling and
Diagnostic Semantic Enhancement:

    v_proj = P v_global
    w_c    = sigmoid(A2 ReLU(A1 v_proj))      # squeeze-and-excitation, width D_x / r
    x      = v_proj + v_proj * w_c
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .numcore import linear, relu, sigmoid


class PatchEncoder(nn.Module):
    """Affine map D_in -> D shared over patches; identity mode needs D_in == D."""

    def __init__(self, d_in: int, d: int, identity: bool = False):
        super().__init__()
        if identity and d_in != d:
            raise ConfigError(f"identity patch encoder needs feat_dim == patch_dim, got {d_in} vs {d}")
        self.d_in = d_in
        self.d = d
        self.identity = identity
        self.proj = None if identity else linear(d_in, d)

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        if raw.dim() != 3 or raw.shape[-1] != self.d_in:
            raise ShapeError("encode", raw.shape, (-1, -1, self.d_in))
        if self.proj is None:
            return raw
        return self.proj(raw)


def gap(v_spatial: torch.Tensor) -> torch.Tensor:
    if v_spatial.dim() != 3 or v_spatial.shape[1] < 1:
        raise ShapeError("gap", v_spatial.shape, (-1, "N>=1", -1))
    return v_spatial.mean(dim=1)


@dataclass
class EnhancedFeature:
    x: torch.Tensor
    v_proj: torch.Tensor
    w_c: torch.Tensor


class DiagnosticEnhancement(nn.Module):
    def __init__(self, d: int, d_x: int, reduction: int = 4, enabled: bool = True):
        super().__init__()
        if d_x % reduction:
            raise ConfigError(f"D_x={d_x} is not divisible by SE reduction {reduction}")
        self.enabled = enabled
        self.proj = linear(d, d_x)
        self.squeeze = linear(d_x, d_x // reduction)
        self.excite = linear(d_x // reduction, d_x)

    def forward(self, v_global: torch.Tensor) -> EnhancedFeature:
        v_proj = self.proj(v_global)
        if not self.enabled:
            return EnhancedFeature(x=v_proj, v_proj=v_proj, w_c=torch.zeros_like(v_proj))
        w_c = sigmoid(self.excite(relu(self.squeeze(v_proj))))
        return EnhancedFeature(x=v_proj + v_proj * w_c, v_proj=v_proj, w_c=w_c)


def dse_forward(v_global: torch.Tensor, block: DiagnosticEnhancement) -> EnhancedFeature:
    return block(v_global)
