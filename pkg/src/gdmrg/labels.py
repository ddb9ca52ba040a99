from __future__ import annotations

from enum import IntEnum

import numpy as np

# CheXpert canonical order, then the four anatomical attributes.
CORE_DISEASES = (
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
)
ANATOMY_ATTRIBUTES = ("Aorta", "Bone", "Hemidiaphragm", "Lung Volume")
DISEASES = CORE_DISEASES + ANATOMY_ATTRIBUTES

N_CORE = len(CORE_DISEASES)
N_DISEASES = len(DISEASES)


class ClinicalState(IntEnum):
    POS = 0
    NEG = 1
    BLA = 2
    UNC = 3

    @property
    def token(self) -> str:
        return f"[{self.name}]"


N_STATES = len(ClinicalState)


def node_key(name: str) -> str:
    """Whitespace-free node name used in embedding files."""
    return name.replace(" ", "_")


def disease_names(n_nodes: int) -> tuple[str, ...]:
    if n_nodes not in (N_CORE, N_DISEASES):
        raise ValueError(f"n_nodes must be {N_CORE} or {N_DISEASES}, got {n_nodes}")
    return DISEASES[:n_nodes]


def binary_from_states(states: np.ndarray, unc_positive: bool = False) -> np.ndarray:
    """POS -> 1, NEG/BLA -> 0, UNC -> 0 (or 1 with unc_positive)."""
    states = np.asarray(states)
    if states.size and (states.min() < 0 or states.max() >= N_STATES):
        raise ValueError(f"state codes must be in 0..{N_STATES - 1}")
    out = states == ClinicalState.POS
    if unc_positive:
        out |= states == ClinicalState.UNC
    return out.astype(np.int64)
