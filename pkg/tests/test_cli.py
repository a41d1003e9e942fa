import json
import re

import numpy as np
import pytest

from decnas import cli, config, cost, experiment, nn

TINY = """\
[run]
seed = 5
model = convnet-small
pretrain_rounds = 3
fl_tune_rounds = 2
clients_per_round = 6
tune = all

[data]
num_samples = 400
input_size = 16
num_clients = 20
classes_per_client = 2

[search]
groups = 3
round_schedule = 1-:2
batch_size = 8
delta = 0.1
decay = 0.9
final_budget = 0.75
"""


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "out"
    assert cli.main(["run-search", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


# ------------------------------------------------------------------ config


def test_defaults_round_trip():
    cfg = config.defaults()
    again = config.parse(cfg.to_text())
    assert again.echo() == cfg.echo()


@pytest.mark.parametrize("text,line", [
    ("[run]\nseed = 1\nbogus = 2\n", 3),
    ("[nope]\n", 1),
    ("seed = 1\n", 1),
    ("[run]\n\n# comment\nseed = x\n", 4),
    ("[search]\ngrouping = maybe\n", 2),
    ("[search]\nround_schedule = 1-5\n", 2),
    ("[run]\nseed 1\n", 2),
    ("[run]\nseed = 1\nseed = 2\n", 3),
    ("[baseline]\nfactors = 0.5,1.5\n", 2),
    ("[run]\nmodel = resnet\n", 2),
])
def test_config_errors_are_line_precise(text, line):
    with pytest.raises(config.ConfigError) as exc:
        config.parse(text, "x.cfg")
    assert exc.value.line == line
    assert f"x.cfg:{line}:" in str(exc.value)


def test_config_values():
    cfg = config.parse("[search]\ngrouping = off\nround_schedule = 1-3:4,4-:6  # tiers\n[baseline]\nfactors = 0.5, 0.75\n")
    assert cfg.get("search", "grouping") is False
    assert cfg.get("search", "round_schedule") == ((1, 3, 4), (4, None, 6))
    assert cfg.get("baseline", "factors") == (0.5, 0.75)


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[run]\nseed = 1\nunknown_key = 3\n")
    assert cli.main(["run-search", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "bad.cfg:3:" in capsys.readouterr().err
    assert cli.main(["run-search", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_cli_infeasible_budget_exit_code(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY.replace("decay = 0.9", "decay = 0.5"))  # reductions sum to 0.2 < 0.25
    assert cli.main(["run-search", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


# ------------------------------------------------------------------ run-search artifacts


def test_output_file_list(tiny_run):
    _, out = tiny_run
    assert sorted(p.name for p in out.iterdir()) == ["costs.csv", "frontier.csv", "models", "run.json"]
    doc = json.loads((out / "run.json").read_text())
    n = len(doc["iterations"])
    assert sorted(p.name for p in (out / "models").iterdir()) == [f"gm_{t:03d}.npz" for t in range(n + 1)]
    assert set(doc["content_hash"]["files"]) == {"frontier.csv", "costs.csv"} | {
        f"models/gm_{t:03d}.npz" for t in range(n + 1)}
    assert re.fullmatch(r"[0-9a-f]{64}", doc["content_hash"]["sha256"])
    assert doc["seed"] == 5


def test_frontier_contents(tiny_run):
    _, out = tiny_run
    text = (out / "frontier.csv").read_text()
    assert text.splitlines()[0] == "method,iteration,macs,macs_ratio,top1_accuracy"
    assert "\r" not in text
    rows = experiment.read_frontier(out / "frontier.csv")
    assert [r.macs for r in rows] == sorted((r.macs for r in rows), reverse=True)
    assert rows[0].iteration == 0 and rows[0].macs_ratio == 1.0
    assert rows[-1].macs_ratio <= 0.75
    assert all(0 <= r.top1_accuracy <= 1 for r in rows)


def test_models_reload(tiny_run):
    _, out = tiny_run
    doc = json.loads((out / "run.json").read_text())
    last = len(doc["iterations"])
    arch, params = experiment.load_model(out / "models" / f"gm_{last:03d}.npz")
    assert nn.macs(arch) == doc["iterations"][-1]["macs"]


def test_run_is_reproducible(tiny_run, tmp_path):
    cfg, out = tiny_run
    again = tmp_path / "again"
    assert cli.main(["run-search", "--config", str(cfg), "--out", str(again), "--threads", "3"]) == 0
    for name in ["frontier.csv", "costs.csv"] + [f"models/{p.name}" for p in (out / "models").iterdir()]:
        assert (out / name).read_bytes() == (again / name).read_bytes(), name


def test_seed_override_changes_output(tiny_run, tmp_path):
    cfg, out = tiny_run
    other = tmp_path / "other"
    assert cli.main(["run-search", "--config", str(cfg), "--out", str(other), "--seed", "6"]) == 0
    assert json.loads((other / "run.json").read_text())["seed"] == 6
    assert (out / "costs.csv").read_bytes() != (other / "costs.csv").read_bytes()


# ------------------------------------------------------------------ baseline, fl-tune, report


def test_baseline_rows(tiny_run, tmp_path):
    cfg, out = tiny_run
    work = tmp_path / "b"
    work.mkdir()
    (work / "frontier.csv").write_bytes((out / "frontier.csv").read_bytes())
    assert cli.main(["run-baseline", "--config", str(cfg), "--out", str(work), "--factors", "0.75,0.5"]) == 0
    rows = experiment.read_frontier(work / "frontier.csv")
    wm = [r for r in rows if r.method == "width_multiplier"]
    assert len(wm) == 2
    assert [r.macs for r in rows] == sorted((r.macs for r in rows), reverse=True)
    with pytest.raises(SystemExit) as exc:
        cli.main(["run-baseline", "--config", str(cfg), "--out", str(work), "--factors", "0"])
    assert exc.value.code == 2
    # matched to the smallest searched model by default
    assert cli.main(["run-baseline", "--config", str(cfg), "--out", str(work)]) == 0
    rows = experiment.read_frontier(work / "frontier.csv")
    (matched,) = [r for r in rows if r.method == "width_multiplier"]
    assert matched.macs <= min(r.macs for r in rows if r.method == "decnas")


def test_factor_one_matches_unpruned_shape(tiny_run, tmp_path):
    cfg, _ = tiny_run
    assert cli.main(["run-baseline", "--config", str(cfg), "--out", str(tmp_path), "--factors", "1.0"]) == 0
    (row,) = experiment.read_frontier(tmp_path / "frontier.csv")
    assert row.macs_ratio == 1.0


def test_fl_tune_command(tiny_run, tmp_path, capsys):
    cfg, out = tiny_run
    model = out / "models" / "gm_001.npz"
    assert cli.main(["fl-tune", "--config", str(cfg), "--model", str(model), "--rounds", "1", "--out",
                     str(tmp_path)]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["rounds"] == 1 and 0 <= result["top1_accuracy"] <= 1
    assert (tmp_path / "tuned.npz").exists()


def test_report(tiny_run, tmp_path, capsys):
    cfg, out = tiny_run
    work = tmp_path / "r"
    work.mkdir()
    for name in ("frontier.csv", "costs.csv", "run.json"):
        (work / name).write_bytes((out / name).read_bytes())
    assert cli.main(["run-baseline", "--config", str(cfg), "--out", str(work), "--factors", "0.5"]) == 0
    rows = experiment.read_frontier(work / "frontier.csv")
    extra = experiment.FrontierRow("oracle", 1, rows[1].macs, rows[1].macs_ratio, 0.5)
    (work / "frontier.csv").write_text(experiment.frontier_csv(rows + [extra]))
    capsys.readouterr()
    assert cli.main(["report", str(work)]) == 0
    text = capsys.readouterr().out
    svg = (work / "frontier.svg").read_text()
    assert svg.count("<polyline") == 3
    entries = cost.read_csv((work / "costs.csv").read_text())
    assert f"total uplink bytes    {sum(e.uplink_bytes for e in entries)}" in text
    assert f"total downlink bytes  {sum(e.downlink_bytes for e in entries)}" in text
    assert f"total compute MACs    {sum(e.compute_macs for e in entries)}" in text


def test_report_empty_and_missing(tmp_path, capsys):
    (tmp_path / "frontier.csv").write_text(",".join(experiment.FRONTIER_HEADER) + "\n")
    (tmp_path / "costs.csv").write_text(cost.to_csv([]))
    assert cli.main(["report", str(tmp_path)]) == 0
    assert "no rows" in capsys.readouterr().out
    assert cli.main(["report", str(tmp_path / "nowhere")]) == 1


def test_oracle_mode(tiny_run, tmp_path):
    cfg, _ = tiny_run
    oracle = tmp_path / "o.cfg"
    oracle.write_text(cfg.read_text().replace("tune = all", "tune = final\nmode = oracle"))
    assert cli.main(["run-search", "--config", str(oracle), "--out", str(tmp_path / "out")]) == 0
    rows = experiment.read_frontier(tmp_path / "out" / "frontier.csv")
    assert {r.method for r in rows} == {"oracle"}
    entries = cost.read_csv((tmp_path / "out" / "costs.csv").read_text())
    assert not any(e.candidate_id == cost.DISTRIBUTION_UPLOAD for e in entries)


def test_save_model_is_byte_stable(tmp_path):
    from decnas import models

    arch = models.convnet_small(16)
    params = nn.init_params(arch, 0)
    experiment.save_model(tmp_path / "a.npz", arch, params)
    experiment.save_model(tmp_path / "b.npz", arch, params)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    a2, p2 = experiment.load_model(tmp_path / "a.npz")
    assert a2 == arch and p2.equal(params)
