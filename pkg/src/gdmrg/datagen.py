"""
Synthetic long-tailed multi-label chest-finding generator.

Generative story per sample (id i, stream splitmix64(seed ^ i)):

    z ~ N(0, I_k)
    y_d = 1[ sigmoid(A_d . z + b_d) > u_d ]           latent finding
    state_d = POS (y=1, kept w.p. 1 - eta, else NEG)
            | NEG / BLA (y=0, BLA w.p. blank_rate)
            | UNC (independent overwrite w.p. unc_rate)
    patches = sum_d y_d T_d on d's support patches + N(0, sigma^2)
    report  = template clauses for the POS set

b_d is calibrated so that E[y_d] equals the configured prevalence.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from .errors import ConfigError, DataError
from .labels import DISEASES, N_DISEASES, ClinicalState, binary_from_states
from .numcore import Rng
from .utils.prompt_loader import ReportClauses, load_report_clauses

DATASET_MAGIC = "GDMRG1"
SPLITS = ("train", "val", "test")

DEFAULT_PREVALENCES = {
    "No Finding": 0.30,
    "Enlarged Cardiomediastinum": 0.04,
    "Cardiomegaly": 0.28,
    "Lung Opacity": 0.30,
    "Lung Lesion": 0.03,
    "Edema": 0.15,
    "Consolidation": 0.05,
    "Pneumonia": 0.06,
    "Atelectasis": 0.25,
    "Pneumothorax": 0.04,
    "Pleural Effusion": 0.27,
    "Pleural Other": 0.01,
    "Fracture": 0.02,
    "Support Devices": 0.30,
    "Aorta": 0.12,
    "Bone": 0.05,
    "Hemidiaphragm": 0.08,
    "Lung Volume": 0.10,
}

# factor -> {disease: loading}
DEFAULT_FACTORS = (
    {  # cardio-pleural cluster
        "Cardiomegaly": 1.5, "Pleural Effusion": 1.5, "Atelectasis": 1.2, "Edema": 1.2,
        "Enlarged Cardiomediastinum": 1.0, "Aorta": 0.8, "Lung Volume": 0.8, "Hemidiaphragm": 0.6,
        "No Finding": -1.5,
    },
    {"Cardiomegaly": 2.0, "Pneumothorax": -2.0},  # exclusive pair
    {  # parenchymal
        "Lung Opacity": 1.5, "Consolidation": 1.5, "Pneumonia": 1.5, "Lung Lesion": 0.8, "Pleural Other": 0.8,
    },
    {"Pneumothorax": 1.5, "Fracture": 1.5, "Bone": 1.2, "Support Devices": 0.5},  # trauma / devices
)

def default_loadings() -> np.ndarray:
    a = np.zeros((N_DISEASES, len(DEFAULT_FACTORS)))
    for k, factor in enumerate(DEFAULT_FACTORS):
        for name, value in factor.items():
            a[DISEASES.index(name), k] = value
    return a


@dataclass
class GenConfig:
    prevalences: tuple[float, ...] = tuple(DEFAULT_PREVALENCES[d] for d in DISEASES)
    loadings: np.ndarray = field(default_factory=default_loadings)
    eta: float = 0.05
    blank_rate: float = 0.7
    unc_rate: float = 0.02
    n_patches: int = 16
    feat_dim: int = 32
    sigma: float = 1.0
    amplitude: float = 1.0
    support_size: int = 3
    template_seed: int = 1234
    comorbid_pair: tuple[str, str] = ("Cardiomegaly", "Pleural Effusion")
    exclusive_pair: tuple[str, str] = ("Cardiomegaly", "Pneumothorax")

    def __post_init__(self):
        self.loadings = np.asarray(self.loadings, dtype=np.float64)
        if len(self.prevalences) != N_DISEASES:
            raise ConfigError(f"need {N_DISEASES} prevalences, got {len(self.prevalences)}")
        if not all(0.0 < p < 1.0 for p in self.prevalences):
            raise ConfigError("prevalences must lie in (0, 1)")
        if self.loadings.ndim != 2 or self.loadings.shape[0] != N_DISEASES:
            raise ConfigError(f"loadings must be {N_DISEASES} x k, got {self.loadings.shape}")
        for name in ("eta", "blank_rate", "unc_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if not 1 <= self.support_size <= self.n_patches:
            raise ConfigError(f"support_size must be in [1, n_patches], got {self.support_size}")
        for name in (*self.comorbid_pair, *self.exclusive_pair):
            if name not in DISEASES:
                raise ConfigError(f"unknown disease '{name}' in planted pairs")
        self.biases = calibrate_biases(np.asarray(self.prevalences), self.loadings)
        self.templates, self.supports = make_templates(self)

    @property
    def k(self) -> int:
        return self.loadings.shape[1]

    def manifest(self) -> dict:
        return {
            "diseases": list(DISEASES),
            "prevalences": dict(zip(DISEASES, map(float, self.prevalences))),
            "biases": dict(zip(DISEASES, map(float, self.biases))),
            "loadings": self.loadings.tolist(),
            "comorbid_pair": list(self.comorbid_pair),
            "exclusive_pair": list(self.exclusive_pair),
            "supports": {d: self.supports[i].tolist() for i, d in enumerate(DISEASES)},
            **{k: v for k, v in asdict(self).items() if k not in ("prevalences", "loadings", "comorbid_pair", "exclusive_pair")},
        }


def calibrate_biases(prevalences: np.ndarray, loadings: np.ndarray, n_points: int = 64) -> np.ndarray:
    """
    b_d with E_z[sigmoid(A_d . z + b_d)] = pi_d, z ~ N(0, I).

    A_d . z ~ N(0, |A_d|^2), so the expectation is one-dimensional and is taken
    by Gauss-Hermite quadrature; b_d is found by bisection (the map is monotone).
    """
    x, w = np.polynomial.hermite.hermgauss(n_points)
    w = w / np.sqrt(np.pi)
    scale = np.sqrt(2.0) * np.linalg.norm(loadings, axis=1)
    biases = np.empty(len(prevalences))
    for d, target in enumerate(prevalences):
        lo, hi = -40.0, 40.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            mean = float(np.sum(w / (1.0 + np.exp(-(scale[d] * x + mid)))))
            if mean < target:
                lo = mid
            else:
                hi = mid
        biases[d] = 0.5 * (lo + hi)
    return biases


def make_templates(config: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-disease feature template (RMS = amplitude) and its support patch indices."""
    gen = Rng(config.template_seed).derive(0x7E).numpy_generator()
    raw = gen.normal(size=(N_DISEASES, config.feat_dim))
    rms = np.sqrt(np.mean(raw ** 2, axis=1, keepdims=True))
    templates = config.amplitude * raw / rms
    supports = np.stack([
        np.sort(gen.choice(config.n_patches, size=config.support_size, replace=False))
        for _ in range(N_DISEASES)
    ])
    return templates, supports


# ---------------- labels ----------------

def _states_from_latent(config: GenConfig, y: np.ndarray, u_flip, u_blank, u_unc) -> np.ndarray:
    states = np.where(y == 1, ClinicalState.POS, ClinicalState.NEG).astype(np.int64)
    states[(y == 1) & (u_flip < config.eta)] = ClinicalState.NEG
    states[(y == 0) & (u_blank < config.blank_rate)] = ClinicalState.BLA
    states[u_unc < config.unc_rate] = ClinicalState.UNC
    return states


def sample_labels(config: GenConfig, rng: np.random.Generator, return_latent: bool = False):
    """One sample's (states, binary) [, latent y]."""
    z = rng.standard_normal(config.k)
    prob = 1.0 / (1.0 + np.exp(-(config.loadings @ z + config.biases)))
    y = (prob > rng.random(N_DISEASES)).astype(np.int64)
    u = rng.random((3, N_DISEASES))
    states = _states_from_latent(config, y, u[0], u[1], u[2])
    binary = binary_from_states(states)
    return (states, binary, y) if return_latent else (states, binary)


def sample_labels_batch(config: GenConfig, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized draw of n samples from the same distribution. Returns (latent y, binary)."""
    z = rng.standard_normal((n, config.k))
    prob = 1.0 / (1.0 + np.exp(-(z @ config.loadings.T + config.biases)))
    y = (prob > rng.random((n, N_DISEASES))).astype(np.int64)
    u = rng.random((3, n, N_DISEASES))
    states = _states_from_latent(config, y, u[0], u[1], u[2])
    return y, binary_from_states(states)


# ---------------- features / reports ----------------

def render_features(latent: np.ndarray, config: GenConfig, rng: np.random.Generator) -> np.ndarray:
    patches = config.sigma * rng.standard_normal((config.n_patches, config.feat_dim))
    for d in np.flatnonzero(latent):
        patches[config.supports[d]] += config.templates[d]
    return patches


def render_report(states: Sequence[int], clauses: ReportClauses | None = None) -> list[str]:
    clauses = clauses or load_report_clauses()
    states = np.asarray(states)
    names = DISEASES[: len(states)]
    words: list[str] = []
    positives = [d for d, s in zip(names, states) if s == ClinicalState.POS]
    for d in positives:
        words.extend(clauses.positive[d])
    if not positives:
        words.extend(clauses.normal)
    for d, s in zip(names, states):
        if s == ClinicalState.NEG and d in clauses.negative:
            words.extend(clauses.negative[d])
    return words


@dataclass
class SyntheticSample:
    id: int
    states: np.ndarray
    binary: np.ndarray
    features: np.ndarray
    report: list[str]


def make_sample(sample_id: int, config: GenConfig, seed: int, clauses: ReportClauses | None = None) -> SyntheticSample:
    rng = Rng(seed).derive(sample_id).numpy_generator()
    states, binary, latent = sample_labels(config, rng, return_latent=True)
    features = render_features(latent, config, rng).astype(np.float32)
    return SyntheticSample(sample_id, states, binary, features, render_report(states, clauses))


# ---------------- dataset files ----------------

@dataclass
class Dataset:
    ids: np.ndarray
    states: np.ndarray            # n x 18 int
    features: np.ndarray          # n x N x D_in float32
    reports: list[list[str]]
    names: tuple[str, ...] = DISEASES

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> SyntheticSample:
        return SyntheticSample(int(self.ids[i]), self.states[i], binary_from_states(self.states[i]), self.features[i], self.reports[i])

    def __iter__(self) -> Iterator[SyntheticSample]:
        return (self[i] for i in range(len(self)))

    def binary(self, unc_positive: bool = False) -> np.ndarray:
        return binary_from_states(self.states, unc_positive)

    @classmethod
    def from_samples(cls, samples: Sequence[SyntheticSample], n_patches: int, feat_dim: int) -> "Dataset":
        if not samples:
            return cls(np.zeros(0, np.int64), np.zeros((0, N_DISEASES), np.int64), np.zeros((0, n_patches, feat_dim), np.float32), [])
        return cls(
            ids=np.array([s.id for s in samples], dtype=np.int64),
            states=np.stack([s.states for s in samples]).astype(np.int64),
            features=np.stack([s.features for s in samples]).astype(np.float32),
            reports=[list(s.report) for s in samples],
        )


def write_dataset(data: Dataset | Sequence[SyntheticSample], out_dir: str | Path, n_patches: int | None = None, feat_dim: int | None = None) -> Path:
    if not isinstance(data, Dataset):
        data = Dataset.from_samples(list(data), n_patches or 0, feat_dim or 0)
    n, n_p, d_in = data.features.shape
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    meta = [f"magic={DATASET_MAGIC}", f"n_samples={n}", f"n_patches={n_p}", f"feat_dim={d_in}", f"n_diseases={len(data.names)}", *data.names]
    (out_dir / "dataset.meta").write_text("\n".join(meta) + "\n", encoding="utf-8")

    labels = pd.DataFrame(data.states, columns=list(data.names))
    labels.insert(0, "id", data.ids)
    labels.to_csv(out_dir / "labels.csv", index=False)

    (out_dir / "features.bin").write_bytes(data.features.astype("<f4").tobytes(order="C"))
    (out_dir / "reports.txt").write_text("".join(" ".join(r) + "\n" for r in data.reports), encoding="utf-8")
    return out_dir


def _read_meta(path: Path) -> tuple[dict[str, str], list[str]]:
    if not path.exists():
        raise DataError(f"missing dataset metadata: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"magic={DATASET_MAGIC}":
        found = lines[0] if lines else "<empty>"
        raise DataError(f"{path}: expected magic '{DATASET_MAGIC}' at line 1 (byte offset 0), found '{found}'")
    fields: dict[str, str] = {}
    idx = 1
    while idx < len(lines) and "=" in lines[idx]:
        key, _, value = lines[idx].partition("=")
        fields[key] = value
        idx += 1
    for key in ("n_samples", "n_patches", "feat_dim", "n_diseases"):
        if key not in fields:
            raise DataError(f"{path}: missing '{key}='")
    return fields, [l for l in lines[idx:] if l]


def read_dataset(split_dir: str | Path) -> Dataset:
    split_dir = Path(split_dir)
    if not split_dir.is_dir():
        raise DataError(f"missing split directory: {split_dir}")
    fields, names = _read_meta(split_dir / "dataset.meta")
    n, n_p, d_in, n_d = (int(fields[k]) for k in ("n_samples", "n_patches", "feat_dim", "n_diseases"))
    if len(names) != n_d:
        raise DataError(f"{split_dir / 'dataset.meta'}: n_diseases={n_d} but {len(names)} names listed")

    labels_path = split_dir / "labels.csv"
    if not labels_path.exists():
        raise DataError(f"missing labels file: {labels_path}")
    labels = pd.read_csv(labels_path)
    if list(labels.columns) != ["id", *names]:
        raise DataError(f"{labels_path}: header does not match the disease list in dataset.meta")
    if len(labels) != n:
        raise DataError(f"{labels_path}: {len(labels)} rows, dataset.meta says n_samples={n}")

    feat_path = split_dir / "features.bin"
    if not feat_path.exists():
        raise DataError(f"missing features file: {feat_path}")
    blob = feat_path.read_bytes()
    expected = 4 * n * n_p * d_in
    if len(blob) != expected:
        kind = "truncated" if len(blob) < expected else "has trailing bytes"
        raise DataError(f"{feat_path}: {kind} at byte offset {min(len(blob), expected)} (expected {expected} bytes)")
    features = np.frombuffer(blob, dtype="<f4").reshape(n, n_p, d_in).astype(np.float32)

    report_path = split_dir / "reports.txt"
    if not report_path.exists():
        raise DataError(f"missing reports file: {report_path}")
    reports = [line.split() for line in report_path.read_text(encoding="utf-8").splitlines()]
    if len(reports) != n:
        raise DataError(f"{report_path}: {len(reports)} lines, dataset.meta says n_samples={n}")

    return Dataset(
        ids=labels["id"].to_numpy(dtype=np.int64),
        states=labels[names].to_numpy(dtype=np.int64),
        features=features,
        reports=reports,
        names=tuple(names),
    )


def read_splits(data_dir: str | Path, splits: Sequence[str] = SPLITS) -> dict[str, Dataset]:
    data_dir = Path(data_dir)
    return {s: read_dataset(data_dir / s) for s in splits}


# ---------------- probe / split generation ----------------

def linear_probe_auc(
    features: np.ndarray,
    binary: np.ndarray,
    seed: int = 0,
    classes: Sequence[int] | None = None,
    weight_decay: float = 1e-3,
    train_frac: float = 0.7,
) -> dict[int, float]:
    """Held-out AUC of an L2 logistic probe on patch-averaged features, per class."""
    from .evalkit import auc

    x = np.asarray(features, dtype=np.float64).mean(axis=1)
    y = np.asarray(binary, dtype=np.float64)
    order = Rng(seed).derive(0x9B).numpy_generator().permutation(len(x))
    cut = int(train_frac * len(x))
    tr, te = order[:cut], order[cut:]
    mu, sd = x[tr].mean(axis=0), x[tr].std(axis=0) + 1e-12
    x_tr = torch.as_tensor((x[tr] - mu) / sd)
    x_te = torch.as_tensor((x[te] - mu) / sd)

    out: dict[int, float] = {}
    for d in (range(y.shape[1]) if classes is None else classes):
        y_tr = torch.as_tensor(y[tr, d])
        w = torch.zeros(x.shape[1], dtype=torch.float64, requires_grad=True)
        b = torch.zeros((), dtype=torch.float64, requires_grad=True)
        opt = torch.optim.LBFGS([w, b], max_iter=100, line_search_fn="strong_wolfe")

        def closure():
            opt.zero_grad()
            loss = torch.nn.functional.binary_cross_entropy_with_logits(x_tr @ w + b, y_tr) + weight_decay * (w ** 2).sum()
            loss.backward()
            return loss

        opt.step(closure)
        with torch.no_grad():
            out[int(d)] = auc((x_te @ w + b).numpy(), y[te, d])
    return out


def generate_splits(
    config: GenConfig,
    sizes: dict[str, int],
    seed: int,
    out_dir: str | Path | None = None,
    probe: bool = True,
) -> tuple[dict[str, Dataset], dict]:
    """
    사용법:
        splits, manifest = generate_splits(GenConfig(), {"train": 2000, "val": 500, "test": 500}, seed=0, out_dir="data")

    ids are consecutive across splits so every sample has its own stream.
    """
    clauses = load_report_clauses()
    splits: dict[str, Dataset] = {}
    next_id = 0
    for split in SPLITS:
        n = int(sizes.get(split, 0))
        if n < 0:
            raise ConfigError(f"{split} size must be >= 0, got {n}")
        samples = [
            make_sample(i, config, seed, clauses)
            for i in tqdm(range(next_id, next_id + n), desc=f"gen {split}", leave=False)
        ]
        next_id += n
        splits[split] = Dataset.from_samples(samples, config.n_patches, config.feat_dim)

    train = splits["train"]
    manifest = {"seed": seed, "sizes": {s: len(d) for s, d in splits.items()}, **config.manifest()}
    if len(train):
        manifest["empirical_prevalence"] = dict(zip(DISEASES, train.binary().mean(axis=0).round(4).tolist()))
    if probe and len(train) >= 20:
        head = [d for d, p in enumerate(config.prevalences) if p >= 0.2]
        scores = linear_probe_auc(train.features, train.binary(), seed=seed, classes=head)
        manifest["probe_auc"] = {DISEASES[d]: round(v, 4) for d, v in scores.items()}
        low = {DISEASES[d]: v for d, v in scores.items() if not v >= 0.9}
        if low:
            print(f"[경고] linear probe AUC < 0.9: {low}")

    if out_dir is not None:
        out_dir = Path(out_dir)
        for split, data in splits.items():
            write_dataset(data, out_dir / split)
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, ensure_ascii=False), encoding="utf-8")
    return splits, manifest
