import csv

import numpy as np
import pytest
import yaml

from fedklpr import cli, wire
from fedklpr.agg import ClientReport
from fedklpr.fed import ExperimentConfig
from fedklpr.params import Layer, MaskLayer, ParamVector, PruneMask

TINY = """
num_clients: 2
rounds: 2
local_epochs: 1
net: {input_dim: 8, hidden_dims: [16], embed_dim: 8}
data: {train_ids: [10, 8], cameras: [2, 3], test_ids: 8}
prune: {acc_threshold: 0.0, delta_rd: 1.0, delta_ep: 1.0}
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


def test_print_defaults_roundtrips(capsys):
    assert cli.main(["--print-defaults"]) == 0
    text = capsys.readouterr().out
    assert cli.config_from_dict(yaml.safe_load(text)) == ExperimentConfig()
    assert cli.main(["run", "--print-defaults"]) == 0


def test_unknown_key_named(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("prune: {target: 0.5}\n")
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) != 0
    assert "prune.target" in capsys.readouterr().err


def test_gamma_delta_names_both_keys(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("agg: {gamma_agg: 0.5, delta_agg: 0.4}\n")
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) != 0
    err = capsys.readouterr().err
    assert "agg.gamma_agg" in err and "agg.delta_agg" in err


def test_type_errors_named():
    with pytest.raises(cli.ConfigError, match="rounds"):
        cli.config_from_dict({"rounds": "many"})
    with pytest.raises(cli.ConfigError, match="net.hidden_dims"):
        cli.config_from_dict({"net": {"hidden_dims": 3}})


def test_missing_config_file(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert cli.main(["run", str(missing), "--out", str(tmp_path / "o")]) != 0
    assert str(missing) in capsys.readouterr().err


def test_seed_env_override(tiny_cfg):
    assert cli.load_config(tiny_cfg, env={"FEDKLPR_SEED": "18446744073709551615"}).seed == 2**64 - 1
    assert cli.load_config(tiny_cfg, env={}).seed == 0
    for bad in ("-1", "18446744073709551616", "x"):
        with pytest.raises(cli.ConfigError):
            cli.load_config(tiny_cfg, env={"FEDKLPR_SEED": bad})


def test_run_outputs_and_rerun_identity(tiny_cfg, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", str(tiny_cfg), "--out", str(a)]) == 0
    assert cli.main(["run", str(tiny_cfg), "--out", str(b)]) == 0
    with open(a / "rounds.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 and list(rows[0]) == cli.CSV_FIELDS
    for name in ("rounds.csv", "summary.json", "run_log.jsonl", "config.yaml"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert len((a / "run_log.jsonl").read_text().splitlines()) == 4
    capsys.readouterr()
    assert cli.main(["report", str(a)]) == 0
    first = capsys.readouterr().out
    assert cli.main(["report", str(b)]) == 0
    assert capsys.readouterr().out == first and first.count("\n") == 4


def test_report_missing_files(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path)]) != 0
    assert "rounds.csv" in capsys.readouterr().err


def test_inspect_valid_message(tiny_cfg, tmp_path, capsys):
    cli.main(["run", str(tiny_cfg), "--out", str(tmp_path / "o")])
    msgs = sorted((tmp_path / "o" / "messages").glob("*.fklp"))
    assert len(msgs) == 2
    capsys.readouterr()
    assert cli.main(["inspect", str(msgs[0])]) == 0
    out = capsys.readouterr().out
    rep = wire.decode(msgs[0].read_bytes())
    assert f"total bytes {msgs[0].stat().st_size}" in out
    # prunable-layer sparsity agrees with the header ratio
    bits = rep.mask.prunable_flat()
    cleared = np.count_nonzero(~rep.mask.flat()[bits])
    assert abs(cleared / bits.sum() - rep.pruning_ratio) <= 1 / bits.sum()


@pytest.mark.parametrize("content,code", [(b"", "bad-magic"), (None, "truncated")])
def test_inspect_errors(tmp_path, capsys, content, code):
    if content is None:
        p = ParamVector([Layer("w", (2, 2), np.ones(4, np.float32), True)])
        m = PruneMask([MaskLayer("w", np.ones(4, bool), True)])
        content = wire.encode(ClientReport(0, 1, p, m, 0.0, 0.0))[:-3]
    f = tmp_path / "m.fklp"
    f.write_bytes(content)
    assert cli.main(["inspect", str(f)]) == 1
    assert code in capsys.readouterr().err


def test_summary_reduction_arithmetic():
    cfg = ExperimentConfig()
    dense = cli.dense_model_bytes(cfg)
    rows = [
        {"round": 1, "client": 0, "rank1": 0.5, "mAP": 0.4, "pruning_ratio": 0.0, "klaw": 0.0, "weight": 1.0,
         "upload_bytes": dense, "download_bytes": dense},
    ]
    s = cli.summarize(cfg, rows)
    assert s["upload_reduction"] == 0.0 and s["cc_reduction"] == 0.0
    # a 1000-value layer at 70% sparsity costs 1325 bytes instead of 4000
    assert 1 - wire.layer_body_bytes(1000, 300) / 4000 == pytest.approx(0.66875)
