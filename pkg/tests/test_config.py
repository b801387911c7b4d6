"""Config parsing, validation, round-trip, grid runner, CLI."""

import json

import numpy as np
import pytest

import fedpai.cli as cli
from fedpai.cli import main, run_grid
from fedpai.config import build_spec, config_to_text, expand_cells, parse_config
from fedpai.errors import ConfigError

MINIMAL = "strategy = fedavg\nrounds = 5\n"

SMALL_GRID = """
# tiny grid for runner tests
strategy = fedavg, fedpai_u_client
rounds = 2
num_clients = 4
clients_per_round = 0.5
local_epochs = 1
batch_size = 8
kappa = 0.5, 0.25
alpha = 0.5
seeds = 0, 1
dataset_classes = 3
dataset_samples_per_class = 20
dataset_input_dim = 6
model_hidden = 8
grasp_batch_size = 8
"""


def test_minimal_config_paper_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.strategies == ("fedavg",)
    assert cfg.rounds == 5
    assert cfg.num_clients == 100
    assert cfg.clients_per_round == 0.1
    assert cfg.local_epochs == 10
    assert cfg.lr == 0.1
    assert cfg.lr_decay_factor == 0.1
    assert cfg.batch_size == 32


def test_kappa_zero_rejected_with_range_message():
    with pytest.raises(ConfigError, match=r"kappa must be in \(0,1\]"):
        parse_config(MINIMAL + "kappa = 0\n")


def test_alpha_grid_parses_three_settings():
    cfg = parse_config(MINIMAL + "alpha = 0.1, 0.8, 1.0\n")
    assert cfg.alphas == (0.1, 0.8, 1.0)
    cfg = parse_config(MINIMAL + "alpha = iid, 0.1\n")
    assert cfg.alphas == (None, 0.1)


def test_sparsity_alias():
    cfg = parse_config(MINIMAL + "sparsity = 0.98, 0.5\n")
    assert cfg.kappas == pytest.approx((0.02, 0.5))
    with pytest.raises(ConfigError, match="not both"):
        parse_config(MINIMAL + "sparsity = 0.5\nkappa = 0.5\n")


def test_unknown_and_duplicate_keys_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(MINIMAL + "frobnicate = 3\n")
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_config(MINIMAL + "rounds = 6\n")


def test_missing_required_key():
    with pytest.raises(ConfigError, match="rounds"):
        parse_config("strategy = fedavg\n")


def test_bad_value_reports_field_value_range():
    with pytest.raises(ConfigError) as err:
        parse_config(MINIMAL + "clients_per_round = 1.5\n")
    text = str(err.value)
    assert "clients_per_round" in text and "1.5" in text and "(0,1]" in text


def test_comments_and_blank_lines_ignored():
    cfg = parse_config("# hello\n\nstrategy = fedavg  # trailing\nrounds = 3\n")
    assert cfg.rounds == 3


def test_config_roundtrip():
    cfg = parse_config(SMALL_GRID)
    assert parse_config(config_to_text(cfg)) == cfg


def test_expand_cells_product():
    cfg = parse_config(SMALL_GRID)
    cells = expand_cells(cfg)
    assert len(cells) == 2 * 2 * 1 * 2
    assert len({c.name for c in cells}) == len(cells)


def test_build_spec_cnn_requires_square():
    with pytest.raises(ConfigError, match="perfect square"):
        build_spec(parse_config(MINIMAL + "model = cnn\ndataset_input_dim = 7\n"))
    spec = build_spec(parse_config(MINIMAL + "model = cnn\ndataset_input_dim = 16\nmodel_channels = 4\n"))
    assert spec.input_shape == (1, 4, 4)


def test_run_grid_counts_and_manifest(tmp_path):
    cfg = parse_config(SMALL_GRID)
    out = tmp_path / "results"
    assert run_grid(cfg, str(out)) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["grid_size"] == 8
    assert len(manifest["cells"]) == 8
    assert all(e["status"] == "done" for e in manifest["cells"].values())
    assert len(list(out.glob("*.csv"))) == 8
    assert len(list(out.glob("*.jsonl"))) == 8
    assert all("final_accuracy" in e for e in manifest["cells"].values())


def test_run_grid_resumes_only_missing(tmp_path, monkeypatch):
    cfg = parse_config(SMALL_GRID)
    out = tmp_path / "results"
    assert run_grid(cfg, str(out)) == 0

    calls = []
    real = cli.run_cell

    def counting(config, cell, outdir):
        calls.append(cell.name)
        return real(config, cell, outdir)

    monkeypatch.setattr(cli, "run_cell", counting)
    assert run_grid(cfg, str(out)) == 0
    assert calls == []  # everything cached
    victim = sorted(out.glob("*.csv"))[0]
    victim.unlink()
    assert run_grid(cfg, str(out)) == 0
    assert len(calls) == 1


def test_run_grid_records_cell_failures(tmp_path):
    # 30 clients cannot be fed from 16 training samples: every cell fails
    bad = parse_config(
        "strategy = fedavg\nrounds = 1\nnum_clients = 30\n"
        "dataset_classes = 2\ndataset_samples_per_class = 10\ndataset_input_dim = 4\n"
    )
    out = tmp_path / "bad"
    assert run_grid(bad, str(out)) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert all(e["status"] == "failed" for e in manifest["cells"].values())
    assert all("error" in e for e in manifest["cells"].values())


def test_run_grid_emits_channel_mask_bitmaps(tmp_path):
    cfg = parse_config(
        "strategy = fedpai_s\nrounds = 5\nnum_clients = 4\nclients_per_round = 1.0\n"
        "local_epochs = 1\nbatch_size = 8\nkappa = 0.5\nebt_epsilon = 1.0\n"
        "dataset_classes = 3\ndataset_samples_per_class = 20\ndataset_input_dim = 6\n"
        "model_hidden = 8\n"
    )
    out = tmp_path / "structured"
    assert run_grid(cfg, str(out)) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    entry = next(iter(manifest["cells"].values()))
    with open(entry["files"]["mask"], encoding="utf-8") as f:
        mask = json.load(f)
    assert set(mask) == {"kept_fraction", "layers"}
    assert all(bit in (0, 1) for bits in mask["layers"].values() for bit in bits)


def test_cli_validate_ok(tmp_path, capsys):
    path = tmp_path / "ok.cfg"
    path.write_text(SMALL_GRID)
    assert main(["validate", str(path)]) == 0
    assert "8 cells" in capsys.readouterr().out


def test_cli_validate_config_error_exit_1(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text(MINIMAL + "kappa = 0\n")
    assert main(["validate", str(path)]) == 1
    assert "kappa" in capsys.readouterr().err


def test_cli_run_and_curves(tmp_path, capsys):
    path = tmp_path / "grid.cfg"
    path.write_text(SMALL_GRID)
    out = tmp_path / "res"
    assert main(["run", str(path), "--output-dir", str(out)]) == 0
    curves = tmp_path / "curves"
    assert main(["curves", str(out), "--out", str(curves), "--svg"]) == 0
    assert list(curves.glob("acc_vs_round__*.dat"))
    assert list(curves.glob("acc_vs_sparsity__*.dat"))
    assert (curves / "acc_vs_round.svg").exists()
    dat = sorted(curves.glob("acc_vs_round__*.dat"))[0].read_text().splitlines()
    assert dat[0].startswith("#")
    assert len(dat) == 1 + 2  # header + one line per round


def test_cli_env_var_output_root(tmp_path, monkeypatch):
    path = tmp_path / "grid.cfg"
    path.write_text(SMALL_GRID.replace("fedavg, fedpai_u_client", "fedavg")
                    .replace("kappa = 0.5, 0.25", "kappa = 0.5")
                    .replace("seeds = 0, 1", "seeds = 0"))
    target = tmp_path / "env_out"
    monkeypatch.setenv(cli.ENV_OUTPUT_DIR, str(target))
    assert main(["run", str(path)]) == 0
    assert (target / "manifest.json").exists()


def test_cli_partition_stats(capsys):
    assert main([
        "partition-stats", "--alpha", "0.1", "--clients", "5", "--seed", "1",
        "--classes", "4", "--samples-per-class", "50", "--dim", "4",
    ]) == 0
    out = capsys.readouterr().out
    assert "mean max-class-share" in out
    assert main([
        "partition-stats", "--alpha", "iid", "--clients", "5",
        "--classes", "4", "--samples-per-class", "50", "--dim", "4",
    ]) == 0


def test_cli_partition_stats_bad_alpha_exit_1(capsys):
    assert main(["partition-stats", "--alpha", "-1", "--clients", "5"]) == 1


def test_run_grid_parallel_workers(tmp_path):
    cfg = parse_config(SMALL_GRID + "workers = 2\n")
    out = tmp_path / "par"
    assert run_grid(cfg, str(out)) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["cells"]) == 8
    # parallel and serial runs agree cell by cell (pure functions of seed)
    serial = tmp_path / "ser"
    assert run_grid(parse_config(SMALL_GRID), str(serial)) == 0
    m2 = json.loads((serial / "manifest.json").read_text())
    for name, entry in manifest["cells"].items():
        assert m2["cells"][name]["final_accuracy"] == entry["final_accuracy"]
