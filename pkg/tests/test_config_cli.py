import hashlib
import json

import pytest

from blobtrack.cli import main
from blobtrack.config import (
    ConfigError,
    PipelineConfig,
    apply_override,
    default_config,
    load_config,
)


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_dump_config_prints_defaults(capsys):
    assert main(["--dump-config"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == default_config()


def test_dump_config_reflects_overrides(capsys):
    assert main(["--dump-config", "--filter.n=25", "--detector.gamma=0.4"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["filter"]["n"] == 25
    assert printed["detector"]["gamma"] == 0.4


def test_override_type_coercion():
    cfg = load_config(None, {"filter.n": "25", "manager.kappa": "12.5"})
    assert cfg["filter"]["n"] == 25 and isinstance(cfg["filter"]["n"], int)
    assert cfg["manager"]["kappa"] == 12.5
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(None, {"filter.n": "abc"})
    with pytest.raises(ConfigError, match="unknown configuration key"):
        load_config(None, {"filter.bogus": "1"})
    cfg = default_config()
    with pytest.raises(ConfigError):
        apply_override(cfg, "flow.alpha.deep", "1")


def test_config_file_validation(tmp_path):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"detector": {"gamma": 0.25}}))
    cfg = load_config(good)
    assert cfg["detector"]["gamma"] == 0.25
    assert cfg["filter"]["n"] == 20  # untouched defaults survive

    bad_key = tmp_path / "bad_key.json"
    bad_key.write_text(json.dumps({"detecor": {}}))
    with pytest.raises(ConfigError, match="unknown configuration key: detecor"):
        load_config(bad_key)

    bad_type = tmp_path / "bad_type.json"
    bad_type.write_text(json.dumps({"flow": {"alpha": "fast"}}))
    with pytest.raises(ConfigError, match="flow.alpha"):
        load_config(bad_type)


def test_unknown_config_key_fails_cli(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert main(["--config", str(bad), "--dump-config"]) == 1
    assert "unknown configuration key" in capsys.readouterr().err


def test_pipeline_config_diagonals():
    pc = PipelineConfig.from_dict(default_config())
    assert pc.q_diag.tolist() == [0.0, 0.0, 200.0, 200.0, 0.0, 5.0, 0.5, 0.5, 0.1, 0.1]
    assert pc.p0_diag.tolist() == [4.0, 4.0, 2.5e5, 2.5e5, 0.5, 10.0, 4.0, 4.0, 2.0, 2.0]
    assert pc.flow.alpha == 70.0
    assert pc.detector.gamma == 0.3
    assert pc.train_config.epochs == 30


def test_version_flag():
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0


def test_no_command_prints_help(capsys):
    assert main([]) == 2
    assert "simulate" in capsys.readouterr().out


def test_track_requires_model_or_flag(tmp_path, capsys):
    events = tmp_path / "e.events.csv"
    events.write_text("# width=32 height=32\nt_us,x,y,polarity\n0,1,1,1\n")
    assert main(["track", str(events), str(tmp_path / "out")]) == 1
    assert "--model or --no-classifier" in capsys.readouterr().err


@pytest.fixture(scope="module")
def cli_workdir(tmp_path_factory):
    """simulate -> track -> evaluate -> render, all through the CLI."""
    work = tmp_path_factory.mktemp("cli")
    scene = {
        "width": 160,
        "height": 120,
        "duration": 0.4,
        "seed": 11,
        "noise_rate": 2000,
        "objects": [
            {"p": [30, 60], "v": [180, 20], "rate": 30000, "lam": [3, 2], "theta": 0.2}
        ],
    }
    (work / "scene.json").write_text(json.dumps(scene))
    assert main(["simulate", str(work / "scene.json"), str(work / "sim")]) == 0
    assert main([
        "track", "--no-classifier",
        str(work / "sim.events.csv"), str(work / "run"),
    ]) == 0
    assert main([
        "evaluate", str(work / "run.tracks.csv"),
        str(work / "sim.events.csv"), str(work / "run"),
    ]) == 0
    return work


def test_cli_pipeline_outputs(cli_workdir):
    work = cli_workdir
    assert (work / "sim.events.csv").exists()
    assert (work / "sim.gt.csv").exists()
    summary = json.loads((work / "run.summary.json").read_text())
    assert summary["tracks_promoted"] >= 1
    metrics = json.loads((work / "run.metrics.json").read_text())
    assert metrics["recall_mean"] > 0.3
    assert metrics["samples"] > 50


def test_cli_track_is_deterministic(cli_workdir, tmp_path):
    work = cli_workdir
    assert main([
        "track", "--no-classifier",
        str(work / "sim.events.csv"), str(tmp_path / "again"),
    ]) == 0
    assert sha256(tmp_path / "again.tracks.csv") == sha256(work / "run.tracks.csv")


def test_cli_render(cli_workdir, tmp_path):
    work = cli_workdir
    out = tmp_path / "frames"
    assert main([
        "render", str(work / "sim.events.csv"), str(work / "run.tracks.csv"),
        str(out), "--frame-period-us", "100000",
    ]) == 0
    frames = sorted(out.glob("frame_*.png"))
    assert len(frames) == 4


def test_cli_simulate_binary_round_trip(tmp_path, capsys):
    scene = {"width": 64, "height": 48, "duration": 0.05, "seed": 1,
             "objects": [{"p": [20, 20], "v": [100, 0], "rate": 10000}]}
    (tmp_path / "scene.json").write_text(json.dumps(scene))
    assert main([
        "simulate", "--format", "binary",
        str(tmp_path / "scene.json"), str(tmp_path / "sim"),
    ]) == 0
    from blobtrack.events import read_event_array
    arr = read_event_array(tmp_path / "sim.events.aevt")
    assert len(arr) > 100
    assert arr.label is not None
