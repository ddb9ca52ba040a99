import json
import math

import numpy as np
import pytest

from gdmrg.datagen import (
    DATASET_MAGIC,
    Dataset,
    GenConfig,
    calibrate_biases,
    generate_splits,
    linear_probe_auc,
    make_sample,
    read_dataset,
    render_features,
    render_report,
    sample_labels,
    sample_labels_batch,
    write_dataset,
)
from gdmrg.errors import ConfigError, DataError
from gdmrg.graphtopo import count_cooccurrence, geometric_normalize
from gdmrg.labels import DISEASES, N_DISEASES, ClinicalState
from gdmrg.numcore import Rng
from gdmrg.utils.prompt_loader import load_report_clauses, parse_report_clauses

NEG, BLA, POS = ClinicalState.NEG, ClinicalState.BLA, ClinicalState.POS


def test_bias_calibration_hits_prevalence():
    loadings = np.array([[1.5, 0.0], [0.0, 2.0], [0.0, 0.0]])
    prev = np.array([0.3, 0.02, 0.5])
    biases = calibrate_biases(prev, loadings)
    z = np.random.default_rng(0).standard_normal((200_000, 2))
    empirical = (1.0 / (1.0 + np.exp(-(z @ loadings.T + biases)))).mean(axis=0)
    np.testing.assert_allclose(empirical, prev, atol=3e-3)
    assert biases[2] == pytest.approx(0.0, abs=1e-9)


def test_latent_prevalence_matches_config():
    cfg = GenConfig()
    latent, _ = sample_labels_batch(cfg, np.random.default_rng(1), 50_000)
    for d in (DISEASES.index("Cardiomegaly"), DISEASES.index("Pleural Other")):
        p = cfg.prevalences[d]
        sigma = math.sqrt(p * (1 - p) / 50_000)
        assert abs(latent[:, d].mean() - p) < 4 * sigma


def test_no_noise_means_binary_equals_pos():
    cfg = GenConfig(eta=0.0, unc_rate=0.0)
    rng = np.random.default_rng(2)
    for _ in range(50):
        states, binary, latent = sample_labels(cfg, rng, return_latent=True)
        assert not (states == ClinicalState.UNC).any()
        np.testing.assert_array_equal(binary, (states == POS).astype(int))
        np.testing.assert_array_equal(binary, latent)


def test_label_noise_only_flips_positive_to_negative():
    cfg = GenConfig(eta=0.5, unc_rate=0.0)
    rng = np.random.default_rng(3)
    for _ in range(100):
        states, binary, latent = sample_labels(cfg, rng, return_latent=True)
        assert (binary <= latent).all()
        assert (states[latent == 0] != POS).all()


def test_planted_pairs_show_in_cooccurrence():
    cfg = GenConfig()
    latent, _ = sample_labels_batch(cfg, np.random.default_rng(4), 40_000)
    mp = geometric_normalize(count_cooccurrence(latent))
    prev = latent.mean(axis=0)
    a, b = (DISEASES.index(n) for n in cfg.comorbid_pair)
    c, e = (DISEASES.index(n) for n in cfg.exclusive_pair)
    assert mp[a, b] > math.sqrt(prev[a] * prev[b])
    assert mp[c, e] < math.sqrt(prev[c] * prev[e])


def test_zero_noise_single_disease_features_are_template():
    cfg = GenConfig(sigma=0.0)
    latent = np.zeros(N_DISEASES, dtype=int)
    latent[2] = 1
    patches = render_features(latent, cfg, np.random.default_rng(0))
    for patch in range(cfg.n_patches):
        expected = cfg.templates[2] if patch in cfg.supports[2] else np.zeros(cfg.feat_dim)
        np.testing.assert_array_equal(patches[patch], expected)


def test_no_findings_features_are_noise():
    cfg = GenConfig()
    gen = np.random.default_rng(5)
    patches = np.stack([render_features(np.zeros(N_DISEASES, dtype=int), cfg, gen) for _ in range(200)])
    assert abs(patches.mean()) < 0.02


def test_normal_report_with_negations():
    states = np.full(N_DISEASES, BLA)
    for name in ("Cardiomegaly", "Lung Opacity", "Atelectasis", "Pleural Effusion", "Edema"):
        states[DISEASES.index(name)] = NEG
    words = render_report(states)
    assert " ".join(words) == (
        "no acute cardiopulmonary process . heart size is normal . lungs are clear . "
        "no atelectasis . no pleural effusion ."
    )


def test_positive_clauses_in_canonical_order():
    states = np.full(N_DISEASES, BLA)
    states[DISEASES.index("Pleural Effusion")] = POS
    states[DISEASES.index("Cardiomegaly")] = POS
    text = " ".join(render_report(states))
    assert text == "the heart is enlarged . a pleural effusion is seen ."
    assert render_report(states) == render_report(states.copy())


def test_fourteen_node_states_use_core_names():
    states = np.full(14, BLA)
    states[0] = POS
    assert " ".join(render_report(states)) == "no acute disease is identified ."


def test_clause_file_validation():
    with pytest.raises(DataError, match="no positive clause"):
        parse_report_clauses("## positive\nCardiomegaly | big heart .\n## normal\nsummary | ok .\n")
    with pytest.raises(DataError, match="unknown section"):
        parse_report_clauses("## impression\n")
    assert load_report_clauses().normal == ("no", "acute", "cardiopulmonary", "process", ".")


def test_make_sample_is_deterministic_per_id():
    cfg = GenConfig()
    a, b, c = make_sample(7, cfg, 0), make_sample(7, cfg, 0), make_sample(8, cfg, 0)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.states, b.states)
    assert not np.array_equal(a.features, c.features)
    assert a.features.dtype == np.float32


def test_dataset_round_trip(tmp_path):
    cfg = GenConfig(n_patches=4, feat_dim=6)
    data = Dataset.from_samples([make_sample(i, cfg, 3) for i in range(10)], 4, 6)
    back = read_dataset(write_dataset(data, tmp_path / "train"))
    np.testing.assert_array_equal(back.features, data.features)
    np.testing.assert_array_equal(back.states, data.states)
    np.testing.assert_array_equal(back.ids, data.ids)
    assert back.reports == data.reports
    assert back.names == DISEASES


def test_empty_dataset_round_trip(tmp_path):
    data = Dataset.from_samples([], 4, 6)
    back = read_dataset(write_dataset(data, tmp_path / "empty"))
    assert len(back) == 0
    assert back.features.shape == (0, 4, 6)


def test_bad_magic_names_expected(tmp_path):
    split = write_dataset(Dataset.from_samples([make_sample(0, GenConfig(), 0)], 16, 32), tmp_path / "s")
    meta = split / "dataset.meta"
    meta.write_text(meta.read_text().replace(DATASET_MAGIC, "GDMRG0"))
    with pytest.raises(DataError, match="GDMRG1"):
        read_dataset(split)


def test_truncated_features_report_offset(tmp_path):
    split = write_dataset(Dataset.from_samples([make_sample(0, GenConfig(), 0)], 16, 32), tmp_path / "s")
    feats = split / "features.bin"
    feats.write_bytes(feats.read_bytes()[:100])
    with pytest.raises(DataError, match="truncated at byte offset 100"):
        read_dataset(split)


def test_missing_split_directory(tmp_path):
    with pytest.raises(DataError):
        read_dataset(tmp_path / "nope")


def test_config_validation():
    with pytest.raises(ConfigError):
        GenConfig(prevalences=(0.1,) * 3)
    with pytest.raises(ConfigError):
        GenConfig(eta=1.5)
    with pytest.raises(ConfigError):
        GenConfig(support_size=20, n_patches=16)


def test_generate_splits_writes_manifest(tmp_path):
    splits, manifest = generate_splits(GenConfig(n_patches=4, feat_dim=6), {"train": 6, "val": 3, "test": 2}, 0, tmp_path, probe=False)
    assert [len(splits[s]) for s in ("train", "val", "test")] == [6, 3, 2]
    assert splits["val"].ids.tolist() == [6, 7, 8]
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk["sizes"] == {"train": 6, "val": 3, "test": 2}
    assert on_disk["comorbid_pair"] == ["Cardiomegaly", "Pleural Effusion"]


def test_linear_probe_on_separable_features():
    gen = Rng(0).numpy_generator()
    y = (gen.random((300, 1)) < 0.4).astype(int)
    x = gen.normal(size=(300, 2, 3))
    x[:, :, 0] += 3.0 * y
    scores = linear_probe_auc(x, y, seed=0)
    assert scores[0] > 0.95


@pytest.mark.slow
def test_default_head_classes_are_learnable():
    splits, manifest = generate_splits(GenConfig(), {"train": 2000, "val": 0, "test": 0}, 0)
    assert min(manifest["probe_auc"].values()) >= 0.9
