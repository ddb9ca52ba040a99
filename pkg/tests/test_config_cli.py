import dataclasses
from pathlib import Path

import pytest
import yaml

from gdmrg import cli
from gdmrg.config import RunConfig, config_from_mapping, dump_config, load_config, save_config
from gdmrg.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parents[1] / "src" / "train"


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.phi == 90.0 and cfg.aux_loss == "tasl" and cfg.n_nodes == 18
    assert cfg.aux_width == cfg.d_x
    assert cfg.lr_multipliers() == {"encoder": 0.1, "new_modules": 1.0, "decoder": 0.5}


def test_every_field_is_documented_by_section():
    for f in dataclasses.fields(RunConfig):
        assert f.metadata["section"] in {"data", "model", "ablation", "loss", "train", "eval", "run"}


def test_load_flat_yaml_with_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("### ablation\nphi: 70\naux_loss: asl\n### train\nbatch_size: 8\n", encoding="utf-8")
    cfg = load_config(path, {"aux-loss": "mbce", "--use-ots": "false", "lr": "5e-4"})
    assert cfg.phi == 70.0 and isinstance(cfg.phi, float)
    assert cfg.aux_loss == "mbce"
    assert cfg.use_ots is False
    assert cfg.lr == 5e-4
    assert cfg.batch_size == 8


@pytest.mark.parametrize(
    "values, message",
    [
        ({"bogus": 1}, "unknown config key"),
        ({"phi": 100}, "phi must be in"),
        ({"aux_loss": "bce"}, "aux_loss must be one of"),
        ({"batch_size": 2.5}, "expected an integer"),
        ({"use_dse": "maybe"}, "expected true/false"),
        ({"n_nodes": 16}, "n_nodes must be"),
        ({"plateau_patience": 0}, "plateau_patience"),
        ({"gamma_neg": -1}, "focusing exponents"),
        ({"d_x": 30, "se_reduction": 4}, "divisible"),
    ],
)
def test_invalid_values_are_rejected(values, message):
    with pytest.raises(ConfigError, match=message):
        config_from_mapping(values)


def test_nested_yaml_is_rejected(tmp_path):
    path = tmp_path / "nested.yaml"
    path.write_text("train:\n  lr: 0.1\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="flat"):
        load_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")


def test_effective_config_round_trip(tmp_path):
    cfg = RunConfig(phi=72.5, aux_loss="asl", embedding_path=None, show_prompt=True, min_lr=3e-7).validate()
    text = dump_config(cfg)
    assert "### ablation" in text
    assert yaml.safe_load(text)["phi"] == 72.5
    assert load_config(save_config(cfg, tmp_path / "effective_config.yaml")) == cfg


def test_replace_validates():
    with pytest.raises(ConfigError):
        RunConfig().replace(graph_mode="gat")
    assert RunConfig().replace(graph_mode="vanilla").graph_mode == "vanilla"


def test_shipped_configs_load():
    for name in ("gdmrg_desk.yaml", "gdmrg_full_dims.yaml", "gdmrg_acceptance.yaml"):
        load_config(CONFIG_DIR / name)


def test_full_size_config_dimensions():
    cfg = load_config(CONFIG_DIR / "gdmrg_full_dims.yaml")
    assert (cfg.d_e, cfg.d_g, cfg.d_x) == (300, 1024, 512)
    assert cfg.aux_width == 512
    assert (cfg.n_patches, cfg.patch_dim) == (49, 2048)


# ---------------- CLI ----------------

def _args(*argv):
    return cli.build_parser().parse_args(list(argv))


def test_cli_flags_mirror_config_keys():
    args = _args("train", "--phi", "70", "--aux_loss", "asl", "--no-ots", "--no-tki", "--show-prompt")
    assert cli.overrides_from_args(args) == {
        "phi": "70", "aux_loss": "asl", "use_ots": False, "graph_mode": "none", "show_prompt": True,
    }


def test_cli_bool_flag_accepts_explicit_value():
    assert cli.overrides_from_args(_args("evaluate", "--unc-positive", "false")) == {"unc_positive": "false"}


def test_cli_unknown_flag_exits_with_usage_error():
    with pytest.raises(SystemExit) as err:
        cli.main(["train", "--bogus", "1"])
    assert err.value.code == 2


def test_cli_config_error_exit_code(tmp_path, capsys):
    assert cli.main(["train", "--phi", "150", "--data-dir", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "[ERROR]" in capsys.readouterr().err


def test_cli_data_error_exit_code(tmp_path, capsys):
    assert cli.main(["train", "--data-dir", str(tmp_path / "missing")]) == cli.EXIT_DATA
    assert "gen-data" in capsys.readouterr().err


def test_parse_phis():
    assert cli.parse_phis("50, 70 90") == [50.0, 70.0, 90.0]
    with pytest.raises(ConfigError):
        cli.parse_phis("50,100")
    with pytest.raises(ConfigError):
        cli.parse_phis("")


def _tiny_flags(tmp_path):
    return [
        "--data-dir", str(tmp_path / "data"), "--out-dir", str(tmp_path / "runs"),
        "--n-train", "64", "--n-val", "32", "--n-test", "16",
        "--n-patches", "4", "--feat-dim", "8", "--patch-dim", "8", "--d-x", "8", "--se-reduction", "2",
        "--d-e", "6", "--d-g", "8", "--dgsa-heads", "2", "--d-m", "16", "--dec-heads", "2", "--dec-layers", "1",
        "--max-len", "48", "--batch-size", "16", "--stage1-epochs", "1", "--stage2-epochs", "1",
        "--curriculum-steps", "4", "--beam-width", "1",
    ]


def test_cli_end_to_end(tmp_path):
    flags = _tiny_flags(tmp_path)
    assert cli.main(["gen-data", *flags]) == cli.EXIT_OK
    assert (tmp_path / "data" / "manifest.json").exists()
    assert cli.main(["train", *flags]) == cli.EXIT_OK
    assert cli.main(["evaluate", *flags, "--show-prompt", "--dump-attention"]) == cli.EXIT_OK
    runs = tmp_path / "runs"
    for name in ("model.ckpt", "train_log.csv", "effective_config.yaml", "metrics.csv", "tau.txt",
                 "generated_reports.txt", "roc_curves.csv", "attention_first_batch.csv"):
        assert (runs / name).exists(), name
    first = (runs / "generated_reports.txt").read_text().splitlines()[0]
    assert first.startswith("[")
    assert cli.main(["viz-topology", *flags, "--sim-slice", "all"]) == cli.EXIT_OK
    assert (runs / "topology" / "w_similarity_unc.csv").exists()


def test_cli_gradcheck_passes_on_tiny_shapes(tmp_path, capsys):
    flags = _tiny_flags(tmp_path)
    assert cli.main(["gradcheck", *flags, "--seeds", "1", "--max-entries", "1"]) == cli.EXIT_OK
    assert "[OK]" in capsys.readouterr().out
