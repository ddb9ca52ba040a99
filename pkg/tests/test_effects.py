"""
Direction-of-effect checks on the long-tailed synthetic data (3 seeds each).

    pytest -m slow tests/test_effects.py
"""
from pathlib import Path

import numpy as np
import pytest
import torch

from gdmrg import pipeline
from gdmrg.config import RunConfig, load_config
from gdmrg.labels import ClinicalState, disease_names
from gdmrg.tki import mean_centered_cosine, pair_similarity

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
CONFIG = Path(__file__).resolve().parents[1] / "src" / "train" / "gdmrg_acceptance.yaml"


def _summary(res: pipeline.EvalResult) -> dict[str, float]:
    complex_ce = res.report.complex_ce
    return {**res.report.summary(), "complex_f1": complex_ce.micro_f1 if complex_ce is not None else 0.0}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Per seed: the full model, its OTS-off evaluation, and the no-TKI and CE/MBCE variants."""
    out: dict[int, dict] = {}
    for seed in SEEDS:
        root = tmp_path_factory.mktemp(f"seed{seed}")
        cfg = load_config(CONFIG, {"seed": seed, "data_dir": str(root / "data"), "out_dir": str(root / "runs")})
        pipeline.gen_data(cfg)
        splits = pipeline.load_splits(cfg)

        full = pipeline.train(cfg, splits, root / "full")
        on = pipeline.evaluate(cfg, root / "full", splits=splits, trained=(full.model, full.vocab))
        off = pipeline.evaluate(cfg.replace(use_ots=False), root / "full", root / "full_fixed",
                                splits=splits, trained=(full.model, full.vocab))
        no_tki = pipeline.train_and_evaluate(cfg.replace(graph_mode="none"), splits, root / "no_tki")
        mbce = pipeline.train_and_evaluate(cfg.replace(aux_loss="mbce"), splits, root / "mbce")

        full.model.eval()
        with torch.no_grad():
            sim = mean_centered_cosine(full.model.tki(), ClinicalState.POS)
        gen = cfg.gen_config()
        names = disease_names(cfg.n_nodes)
        out[seed] = {
            "comorbid": pair_similarity(sim, names, *gen.comorbid_pair),
            "exclusive": pair_similarity(sim, names, *gen.exclusive_pair),
            "full": _summary(on),
            "fixed": _summary(off),
            "no_tki": _summary(no_tki),
            "mbce": _summary(mbce),
        }
    return out


def _mean(runs, variant: str, key: str) -> float:
    return float(np.mean([runs[s][variant][key] for s in SEEDS]))


def test_comorbid_pair_is_closer_than_exclusive_pair(runs):
    for seed in SEEDS:
        assert runs[seed]["comorbid"] > runs[seed]["exclusive"], (seed, runs[seed]["comorbid"], runs[seed]["exclusive"])


def test_topology_helps_multi_finding_studies(runs):
    assert _mean(runs, "full", "complex_f1") >= _mean(runs, "no_tki", "complex_f1")


def test_tasl_beats_masked_bce_under_label_noise(runs):
    assert _mean(runs, "full", "f1") >= _mean(runs, "mbce", "f1")


def test_threshold_search_raises_recall(runs):
    for seed in SEEDS:
        assert runs[seed]["full"]["recall"] >= runs[seed]["fixed"]["recall"], seed
    assert _mean(runs, "full", "recall") > _mean(runs, "fixed", "recall")


def test_gradient_suite_on_default_shapes():
    table = pipeline.gradcheck(RunConfig().validate(), seeds=20, max_entries=2)
    assert len(set(table["seed"])) == 20
    assert table["passed"].all(), table[~table["passed"]]
