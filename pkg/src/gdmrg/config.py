"""
Run configuration: one flat dataclass, loaded from a flat YAML file whose
`### section` comment headers only group keys for reading, then overridden
by `--key value` command-line flags.

사용법:
    cfg = load_config("src/train/gdmrg_desk.yaml", {"phi": "70", "aux-loss": "asl"})
    save_config(cfg, run_dir / "effective_config.yaml")
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .dualcls import AUX_LOSSES, MAIN_LOSSES, TaslConfig
from .decoder import MASK_MODES
from .errors import ConfigError
from .labels import N_CORE, N_DISEASES

GRAPH_MODES = ("tki", "vanilla", "none")


def _opt(default, section: str, doc: str = ""):
    return field(default=default, metadata={"section": section, "doc": doc})


@dataclass
class RunConfig:
    # data
    data_dir: str = _opt("data", "data", "dataset root holding train/ val/ test/")
    n_train: int = _opt(2000, "data")
    n_val: int = _opt(500, "data")
    n_test: int = _opt(500, "data")
    n_patches: int = _opt(16, "data", "patches per image (N)")
    feat_dim: int = _opt(32, "data", "raw patch feature width (D_in)")
    eta: float = _opt(0.05, "data", "POS -> NEG label-noise rate")
    blank_rate: float = _opt(0.7, "data")
    unc_rate: float = _opt(0.02, "data")
    sigma: float = _opt(1.0, "data", "feature noise std")
    template_seed: int = _opt(1234, "data")
    unc_positive: bool = _opt(False, "data", "map UNC to 1 in binary ground truth")

    # model
    n_nodes: int = _opt(18, "model", "14 (core) or 18 (core + anatomy)")
    patch_dim: int = _opt(32, "model", "encoded patch width (D)")
    identity_encoder: bool = _opt(False, "model")
    d_x: int = _opt(32, "model", "enhanced feature width (D_x = D_h)")
    se_reduction: int = _opt(4, "model")
    d_f: int = _opt(0, "model", "aux hidden width, 0 means D_x")
    d_e: int = _opt(32, "model", "node embedding width")
    d_g: int = _opt(64, "model", "GCN hidden width")
    embedding_path: str | None = _opt(None, "model", "optional node embedding file")
    train_embeddings: bool = _opt(True, "model")
    gcn_dropout: float = _opt(0.1, "model")
    dgsa_heads: int = _opt(4, "model")
    dgsa_blocks: int = _opt(1, "model")
    d_m: int = _opt(64, "model", "decoder width")
    dec_heads: int = _opt(4, "model")
    dec_layers: int = _opt(2, "model")
    max_len: int = _opt(64, "model")
    dropout: float = _opt(0.1, "model")

    # ablation
    graph_mode: str = _opt("tki", "ablation", "tki | vanilla | none")
    phi: float = _opt(90.0, "ablation", "edge percentile in [0, 100)")
    use_dse: bool = _opt(True, "ablation")
    use_dgsa: bool = _opt(True, "ablation")
    use_ots: bool = _opt(True, "ablation")
    main_loss: str = _opt("ce", "ablation", "ce | wfl")
    aux_loss: str = _opt("tasl", "ablation", "none | mbce | asl | tasl")
    mask_mode: str = _opt("full", "ablation", "full | prompt_masked")

    # loss
    gamma_pos: float = _opt(0.0, "loss")
    gamma_neg: float = _opt(4.0, "loss")
    asl_margin: float = _opt(0.05, "loss")
    tasl_delta: float = _opt(0.05, "loss")
    lambda_cls: float = _opt(1.0, "loss")
    lambda_lm: float = _opt(1.0, "loss")

    # train
    lr: float = _opt(1.0e-3, "train", "base learning rate")
    lr_mult_encoder: float = _opt(0.1, "train")
    lr_mult_new_modules: float = _opt(1.0, "train")
    lr_mult_decoder: float = _opt(0.5, "train")
    weight_decay: float = _opt(0.01, "train")
    beta1: float = _opt(0.9, "train")
    beta2: float = _opt(0.999, "train")
    plateau_factor: float = _opt(0.5, "train")
    plateau_patience: int = _opt(2, "train")
    min_lr: float = _opt(1.0e-6, "train")
    batch_size: int = _opt(32, "train")
    stage1_epochs: int = _opt(15, "train")
    stage2_epochs: int = _opt(15, "train")
    curriculum_steps: int = _opt(500, "train", "gate cap ramp length K (joint steps)")
    gate_cap_start: float = _opt(0.2, "train")
    gate_init_bias: float = _opt(-2.0, "train")

    # eval
    beam_width: int = _opt(3, "eval")
    show_prompt: bool = _opt(False, "eval")
    dump_attention: bool = _opt(False, "eval")

    # run
    seed: int = _opt(0, "run")
    out_dir: str = _opt("runs/gdmrg", "run")

    def validate(self) -> "RunConfig":
        def need(ok: bool, msg: str):
            if not ok:
                raise ConfigError(msg)

        need(self.n_nodes in (N_CORE, N_DISEASES), f"n_nodes must be {N_CORE} or {N_DISEASES}, got {self.n_nodes}")
        need(self.graph_mode in GRAPH_MODES, f"graph_mode must be one of {GRAPH_MODES}, got '{self.graph_mode}'")
        need(self.main_loss in MAIN_LOSSES, f"main_loss must be one of {MAIN_LOSSES}, got '{self.main_loss}'")
        need(self.aux_loss in AUX_LOSSES, f"aux_loss must be one of {AUX_LOSSES}, got '{self.aux_loss}'")
        need(self.mask_mode in MASK_MODES, f"mask_mode must be one of {MASK_MODES}, got '{self.mask_mode}'")
        need(0.0 <= self.phi < 100.0, f"phi must be in [0, 100), got {self.phi}")
        for name in ("n_train", "n_val", "n_test", "stage1_epochs", "stage2_epochs", "curriculum_steps"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("n_patches", "feat_dim", "patch_dim", "d_x", "d_e", "d_g", "d_m", "batch_size", "beam_width",
                     "dgsa_heads", "dgsa_blocks", "dec_heads", "dec_layers", "se_reduction"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1, got {getattr(self, name)}")
        need(self.d_x % self.se_reduction == 0, f"d_x={self.d_x} must be divisible by se_reduction={self.se_reduction}")
        need(self.patch_dim % self.dgsa_heads == 0, f"patch_dim={self.patch_dim} must be divisible by dgsa_heads={self.dgsa_heads}")
        need(self.d_m % self.dec_heads == 0, f"d_m={self.d_m} must be divisible by dec_heads={self.dec_heads}")
        need(not self.identity_encoder or self.feat_dim == self.patch_dim, "identity_encoder needs feat_dim == patch_dim")
        need(self.max_len >= self.n_nodes + 2, f"max_len={self.max_len} cannot hold BOS + {self.n_nodes} prompt tokens + EOS")
        for name in ("dropout", "gcn_dropout"):
            need(0.0 <= getattr(self, name) < 1.0, f"{name} must be in [0, 1), got {getattr(self, name)}")
        need(self.plateau_patience >= 1, f"plateau_patience must be >= 1, got {self.plateau_patience}")
        need(self.lr > 0, f"lr must be > 0, got {self.lr}")
        need(0.0 < self.plateau_factor < 1.0, f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        need(0.0 < self.gate_cap_start <= 1.0, f"gate_cap_start must be in (0, 1], got {self.gate_cap_start}")
        need(self.lambda_cls >= 0 and self.lambda_lm >= 0, "loss weights must be >= 0")
        self.tasl()
        return self

    @property
    def aux_width(self) -> int:
        return self.d_f or self.d_x

    def tasl(self) -> TaslConfig:
        return TaslConfig(self.gamma_pos, self.gamma_neg, self.asl_margin, self.tasl_delta)

    def lr_multipliers(self) -> dict[str, float]:
        return {"encoder": self.lr_mult_encoder, "new_modules": self.lr_mult_new_modules, "decoder": self.lr_mult_decoder}

    def gen_config(self):
        from .datagen import GenConfig

        return GenConfig(
            eta=self.eta, blank_rate=self.blank_rate, unc_rate=self.unc_rate,
            n_patches=self.n_patches, feat_dim=self.feat_dim, sigma=self.sigma, template_seed=self.template_seed,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()


FIELD_NAMES = {f.name for f in fields(RunConfig)}


def _normalize_key(key: str) -> str:
    return key.lstrip("-").replace("-", "_")


def _coerce(name: str, value: Any) -> Any:
    f = RunConfig.__dataclass_fields__[name]
    default = f.default
    if isinstance(value, str) and not isinstance(default, str):
        value = yaml.safe_load(value)
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{name}: a value is required")
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ConfigError(f"{name}: expected an integer, got {value!r}")
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ConfigError(f"{name}: expected a number, got {value!r}")
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: bad value {value!r} ({e})") from e


def config_from_mapping(values: Mapping[str, Any], base: RunConfig | None = None) -> RunConfig:
    current = dataclasses.asdict(base or RunConfig())
    for raw_key, value in values.items():
        key = _normalize_key(str(raw_key))
        if key not in FIELD_NAMES:
            raise ConfigError(f"unknown config key '{raw_key}'")
        current[key] = _coerce(key, value)
    return RunConfig(**current).validate()


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a flat 'key: value' mapping")
        for key, value in loaded.items():
            if isinstance(value, (dict, list)):
                raise ConfigError(f"{path}: '{key}' must be a scalar (flat configs only)")
        values.update(loaded)
    cfg = config_from_mapping(values)
    if overrides:
        cfg = config_from_mapping(overrides, base=cfg)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines: list[str] = []
    section = None
    for f in fields(RunConfig):
        if f.metadata["section"] != section:
            section = f.metadata["section"]
            lines.append(("\n" if lines else "") + f"### {section}")
        dumped = yaml.safe_dump({f.name: getattr(cfg, f.name)}, default_flow_style=False).strip()
        doc = f.metadata.get("doc")
        lines.append(f"{dumped} # {doc}" if doc else dumped)
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path
