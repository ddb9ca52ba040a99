"""
End-to-end wiring of the report generator:

    raw patches -> PatchEncoder -> V_spatial -> GAP -> DSE -> x
    x -> main head (W from TKI) -> 4-state logits -> prompt
    x -> aux head -> (f_cond, p)
    (f_cond, V_spatial) -> DGSA -> gate -> V_fused -> decoder
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import RunConfig
from .decoder import ReportDecoder
from .dualcls import AuxHead, MainHead
from .errors import DataError
from .fusion import DiagnosisGuidedAttention, FusionGate, gate_fuse
from .numcore import DTYPE, ParamStore, load_checkpoint, save_checkpoint
from .tki import TopologicalInternalization, load_or_init_embeddings
from .labels import disease_names
from .vision import DiagnosticEnhancement, PatchEncoder, gap


@dataclass
class ClassifierOutput:
    logits: torch.Tensor      # B x N_d x 4
    p: torch.Tensor           # B x N_d
    f_cond: torch.Tensor      # B x D_f
    v_spatial: torch.Tensor   # B x N x D
    x: torch.Tensor           # B x D_x


@dataclass
class FusionOutput:
    v_fused: torch.Tensor
    g: torch.Tensor | None
    attn: torch.Tensor | None  # B x h x N x N


def group_of(name: str) -> str:
    if name.startswith("encoder."):
        return "encoder"
    if name.startswith("decoder."):
        return "decoder"
    return "new_modules"


class GdmrgModel(nn.Module):
    def __init__(self, cfg: RunConfig, a_tilde: np.ndarray | None, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        n = cfg.n_nodes
        if a_tilde is None:
            a_tilde = np.eye(n)
        h0 = load_or_init_embeddings(cfg.embedding_path, cfg.d_e, cfg.seed, disease_names(n))
        self.encoder = PatchEncoder(cfg.feat_dim, cfg.patch_dim, cfg.identity_encoder)
        self.dse = DiagnosticEnhancement(cfg.patch_dim, cfg.d_x, cfg.se_reduction, enabled=cfg.use_dse)
        self.tki = TopologicalInternalization(
            a_tilde, h0, cfg.d_g, cfg.d_x,
            dropout_rate=cfg.gcn_dropout,
            train_embeddings=cfg.train_embeddings,
            use_graph=cfg.graph_mode != "none",
        )
        self.main_head = MainHead(n)
        self.aux_head = AuxHead(cfg.d_x, cfg.aux_width, n)
        if cfg.use_dgsa:
            self.dgsa = DiagnosisGuidedAttention(cfg.patch_dim, cfg.aux_width, cfg.dgsa_heads, cfg.dgsa_blocks, cfg.dropout)
            self.gate = FusionGate(cfg.patch_dim, cfg.gate_init_bias)
        else:
            self.dgsa = None
            self.gate = None
        self.decoder = ReportDecoder(
            vocab_size, d_mem=cfg.patch_dim, d_m=cfg.d_m, heads=cfg.dec_heads,
            n_layers=cfg.dec_layers, max_len=cfg.max_len, dropout=cfg.dropout,
        )

    def classify(self, raw: torch.Tensor) -> ClassifierOutput:
        v_spatial = self.encoder(raw.to(DTYPE))
        x = self.dse(gap(v_spatial)).x
        logits = self.main_head(x, self.tki())
        f_cond, p = self.aux_head(x)
        return ClassifierOutput(logits, p, f_cond, v_spatial, x)

    def fuse(self, out: ClassifierOutput, cap: float = 1.0) -> FusionOutput:
        if self.dgsa is None:
            return FusionOutput(out.v_spatial, None, None)
        v_attn, attn = self.dgsa(out.f_cond, out.v_spatial)
        v_fused, g = gate_fuse(out.v_spatial, v_attn, self.gate, cap)
        return FusionOutput(v_fused, g, attn)

    def param_store(self, include_decoder: bool = True) -> ParamStore:
        store = ParamStore.from_module(self, group_of)
        if not include_decoder:
            for name in [k for k in store.params if k.startswith("decoder.")]:
                del store.params[name]
                del store.groups[name]
        return store

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(self.state_dict(), path)

    def load(self, path: str | Path) -> "GdmrgModel":
        state = load_checkpoint(path)
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if missing or unexpected:
            raise DataError(f"{path}: checkpoint does not match the model (missing={missing[:3]}, unexpected={unexpected[:3]})")
        for k, v in state.items():
            if v.shape != own[k].shape:
                raise DataError(f"{path}: '{k}' has shape {tuple(v.shape)}, model expects {tuple(own[k].shape)}")
        self.load_state_dict({k: v.to(own[k].dtype) for k, v in state.items()})
        return self
