import json

import pytest

from streamsplat import cli
from streamsplat.config import Config, dump_toml, load_config


def test_defaults_round_trip_through_toml_and_json(tmp_path):
    cfg = Config()
    (tmp_path / "c.toml").write_text(dump_toml(cfg))
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.toml") == cfg
    assert load_config(tmp_path / "c.json") == cfg
    assert load_config(None) == cfg


def test_overrides_and_unknown_keys(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[pipeline]\ncapacity_views = 7\n[pipeline.render]\nnear = 0.2\n[trajectory]\nradius_shell = [2.0, 4.0]\n')
    cfg = load_config(p)
    assert cfg.pipeline.capacity_views == 7 and cfg.pipeline.render.near == 0.2
    assert cfg.trajectory.radius_shell == (2.0, 4.0) and cfg.trajectory.frames == 20
    p.write_text("[pipeline.render]\nnaer = 0.2\n")
    with pytest.raises(ValueError, match="pipeline.render.naer"):
        load_config(p)
    p.write_text("[extra]\nx = 1\n")
    with pytest.raises(ValueError, match="extra"):
        load_config(p)


def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "small.toml"
    cfg.write_text("[trajectory]\nframes = 5\nimage_size = [32, 32]\n[scene]\ncount = 800\n")
    data, out = tmp_path / "data", tmp_path / "out"
    base = ["--config", str(cfg)]
    assert cli.main(base + ["generate", str(data)]) == 0
    assert (data / "poses.json").exists() and (data / "frame_00004.png").exists()
    assert cli.main(base + ["run", str(data), str(out)]) == 0
    diags = [json.loads(line) for line in (out / "diagnostics.jsonl").read_text().splitlines()]
    assert [d["t"] for d in diags] == [1, 2, 3, 4]
    assert (out / "field_00004.ply").exists()
    png = tmp_path / "view.png"
    assert cli.main(base + ["render", str(out / "field_00004.ply"), str(out / "canonical_poses.json"), str(png),
                            "--frame", "2"]) == 0
    assert png.stat().st_size > 0
    report = tmp_path / "report.json"
    assert cli.main(base + ["eval", str(data), "--json", str(report), "--csv", str(tmp_path / "r.csv")]) == 0
    assert json.loads(report.read_text())["stages"]["early"]["count"] > 0
    assert cli.main(base + ["config"]) == 0
    assert "[pipeline.render]" in capsys.readouterr().out


def test_cli_bench(tmp_path):
    out = tmp_path / "bench.json"
    assert cli.main(["bench", "--frames", "50", "--size", "32", "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res["frames"] == 50 and res["max_bank_size"] <= res["capacity_tokens"]


def test_shipped_config_matches_defaults():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "default.toml"
    assert load_config(path) == Config()
