import json

import numpy as np
import pytest

from sgrocc import pipeline
from sgrocc.cli import EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_OK, main
from sgrocc.config import load_config
from sgrocc.errors import ConfigError
from sgrocc.io import csv_to_rows


def test_defaults_load(bench):
    assert bench.lifter.K == 16 and bench.camera.trajectory.n_frames == 30
    assert load_config("bench_walls.json").scene.n_objects >= 0


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"lifter": {"kay": 3}}))
    with pytest.raises(ConfigError, match="lifter.kay"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(None, ["memory.nope=1"])


@pytest.mark.parametrize("override", ["lifter.K=0", "noise.pose_frac=0.5", "lifter.mode=\"bilinear\"", "seed=-1",
                                      "camera.local_frame=30", "memory.anchor_scale=1.0"])
def test_out_of_range_rejected(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_bad_json_and_missing_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_occ_seed_env_overrides():
    assert load_config(None, env={"OCC_SEED": "42"}).seed == 42
    assert load_config(None, env={}).seed == 0
    with pytest.raises(ConfigError):
        load_config(None, env={"OCC_SEED": "x"})


def test_set_overrides_parse_json_values():
    cfg = load_config(None, ["lifter.sigma=0.2", "refiner.mode=free3d"])
    assert cfg.lifter.sigma == 0.2 and cfg.refiner.mode == "free3d"


def test_ablation_axes_values():
    assert [v for v, _ in pipeline.ABLATION_AXES["sigma_sweep"]] == [f"sigma={s}" for s in (0.1, 0.2, 0.5, 1.0, 2.0)]
    assert [v for v, _ in pipeline.ABLATION_AXES["k_sweep"]] == [f"K={k}" for k in (4, 8, 16, 24, 32)]
    with pytest.raises(ConfigError):
        pipeline.run_ablation(load_config(None), "nope")


@pytest.mark.parametrize("axis", ["sigma_sweep", "k_sweep"])
def test_ablation_rows(axis, bench, tmp_path):
    rows = pipeline.run_ablation(bench, axis, tmp_path)
    assert len(rows) == 5
    assert [r["variant"] for r in rows] == [v for v, _ in pipeline.ABLATION_AXES[axis]]
    for r in rows:
        assert {"sc_iou", "miou", "boundary_f1"} <= set(r)
    assert len(csv_to_rows((tmp_path / f"ablation_{axis}.csv").read_text())) == 5


def test_cli_run_local(tmp_path, capsys):
    assert main(["run-local", "--out", str(tmp_path), "--heatmap"]) == EXIT_OK
    assert "sc_iou=" in capsys.readouterr().out
    for name in ("pred.svox", "gt.svox", "pool.gpool", "depth.pgm", "metrics.csv", "gate_heatmap.pgm"):
        assert (tmp_path / name).stat().st_size > 0


def test_cli_config_errors(capsys):
    assert main(["run-local", "--set", "lifter.K=0"]) == EXIT_CONFIG
    assert main(["run-local", "--set", "lifter.nope=1"]) == EXIT_CONFIG
    assert main(["run-local", "--config", "/no/such/file.json"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_gradcheck(tmp_path):
    assert main(["gradcheck", "--trials", "20", "--out", str(tmp_path)]) == EXIT_OK
    rows = csv_to_rows((tmp_path / "gradcheck.csv").read_text())
    assert [r["op"] for r in rows] == ["gate", "grm", "fusion"]


def test_cli_check_exit_codes(capsys):
    assert main(["check", "--only", "10", "--only", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "[PASS] 10" in out and "2/2 criteria passed" in out
    assert main(["check", "--only", "4"]) == EXIT_ACCEPTANCE


def test_cli_ablate(tmp_path, capsys):
    assert main(["ablate", "grm_mode", "--out", str(tmp_path)]) == EXIT_OK
    assert capsys.readouterr().out.count("variant=") == 3
