import json

import numpy as np
import pytest

from cmua.attack import Watermark
from cmua.cli import main
from cmua.config import ConfigError, RunConfig, load_config
from cmua.files import load_image, load_watermark, read_json, save_image, save_watermark

SMALL = {
    "seed": 42,
    "dataset": {"train_count": 8, "score_count": 8, "eval_count": 8},
    "pipeline": {"batch_size": 4, "attack": {"n_iters": 2}},
    "search": {"budget": 2, "batch_size": 4},
    "metrics": {"feature_dim": 8},
}


def write_config(tmp_path, doc=SMALL, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


# ------------------------------------------------------------------- config


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.pipeline.alpha == 0.9 and cfg.pipeline.attack.epsilon == 0.05
    assert cfg.search.space_low == 0 and cfg.search.space_high == 10
    assert len(cfg.family.models) == 4


def test_round_trip():
    cfg = RunConfig.from_dict(SMALL)
    assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("doc, message", [
    ({"bogus": 1}, "unknown"),
    ({"dataset": {"train_cout": 8}}, "unknown"),
    ({"seed": "seven"}, "integer"),
    ({"pipeline": {"alpha": 1.5}}, "alpha"),
    ({"method": "FGSM"}, "method"),
    ({"dataset": {"source": "directory"}}, "directory"),
    ({"dataset": {"train_count": 10}}, "multiple"),
    ({"schema_version": 9}, "schema_version"),
    ({"search": {"train_count": 64}}, "train_count"),
    ({"search": {"train_count": 12}}, "multiple"),
])
def test_invalid_configs(doc, message):
    with pytest.raises(ConfigError, match=message):
        RunConfig.from_dict(doc)


def test_two_phase_large_batch_config_accepted(tmp_path):
    doc = {"dataset": {"train_count": 128}, "two_phase": True,
           "search": {"batch_size": 16, "space_low": 0, "space_high": 10}, "pipeline": {"batch_size": 64}}
    cfg = load_config(write_config(tmp_path, doc))
    out = cfg.to_dict()
    assert out["search"]["batch_size"] == 16 and out["pipeline"]["batch_size"] == 64
    assert [out["search"]["space_low"], out["search"]["space_high"]] == [0.0, 10.0]


def test_missing_and_broken_config(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "nope.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(str(bad))


# ---------------------------------------------------------------------- CLI


@pytest.fixture(scope="module")
def attack_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("attack")
    cfg = write_config(tmp)
    assert main(["attack", "--config", cfg, "--out-dir", str(tmp / "a")]) == 0
    return tmp, cfg


def test_attack_outputs(attack_run):
    tmp, _ = attack_run
    out = tmp / "a"
    for name in ("watermark.cmua", "manifest.json", "loss_trace.jsonl", "watermark_preview.png"):
        assert (out / name).exists(), name
    manifest = read_json(out / "manifest.json")
    assert manifest["config"]["seed"] == 42
    assert manifest["provenance"]["visits"] == 2 * 4
    assert set(manifest["provenance"]["model_checksums"]) == set(manifest["provenance"]["models"])
    assert len((out / "loss_trace.jsonl").read_text().splitlines()) == 8


def test_attack_rerun_from_manifest_is_byte_identical(attack_run):
    tmp, _ = attack_run
    assert main(["attack", "--config", str(tmp / "a" / "manifest.json"), "--threads", "3",
                 "--out-dir", str(tmp / "b")]) == 0
    assert (tmp / "a" / "watermark.cmua").read_bytes() == (tmp / "b" / "watermark.cmua").read_bytes()


def test_eval_reports_identical_and_match_manifest(attack_run):
    tmp, cfg = attack_run
    wm = str(tmp / "a" / "watermark.cmua")
    assert main(["eval", "--watermark", wm, "--config", cfg, "--out-dir", str(tmp / "e1")]) == 0
    assert main(["eval", "--watermark", wm, "--config", cfg, "--out-dir", str(tmp / "e2"), "--threads", "2"]) == 0
    assert (tmp / "e1" / "report.json").read_bytes() == (tmp / "e2" / "report.json").read_bytes()
    report = read_json(tmp / "e1" / "report.json")
    manifest = read_json(tmp / "a" / "manifest.json")
    assert report["summary"] == manifest["metrics"]["summary"]
    assert (tmp / "e1" / "report.txt").read_text().split()[:4] == ["model", "L2_mask", "SR_mask", "FRD"]


def test_apply_zero_watermark_is_lossless(tmp_path):
    wm = tmp_path / "zero.cmua"
    save_watermark(wm, Watermark.zeros((32, 32, 3), 0.05))
    pixels = np.random.default_rng(0).integers(0, 256, (32, 32, 3)).astype(np.float32) / 255
    save_image(tmp_path / "in.png", pixels)
    assert main(["apply", "--watermark", str(wm), str(tmp_path / "in.png"), str(tmp_path / "out.png")]) == 0
    assert (np.asarray(load_image(tmp_path / "out.png")) == np.asarray(load_image(tmp_path / "in.png"))).all()


def test_apply_stays_in_ball(attack_run, tmp_path):
    tmp, _ = attack_run
    wm = load_watermark(tmp / "a" / "watermark.cmua")
    src = np.random.default_rng(1).random((32, 32, 3))
    save_image(tmp_path / "in.ppm", src)
    assert main(["apply", "--watermark", str(tmp / "a" / "watermark.cmua"),
                 str(tmp_path / "in.ppm"), str(tmp_path / "out.ppm")]) == 0
    diff = load_image(tmp_path / "out.ppm").astype(np.float64) - load_image(tmp_path / "in.ppm")
    # one quantization step of slack on top of the ball
    assert np.abs(diff).max() <= wm.epsilon + 0.5 / 255 + 1e-7


def test_apply_directory(attack_run, tmp_path):
    tmp, _ = attack_run
    (tmp_path / "in").mkdir()
    for i in range(3):
        save_image(tmp_path / "in" / f"{i}.png", np.full((32, 32, 3), 0.5))
    assert main(["apply", "--watermark", str(tmp / "a" / "watermark.cmua"),
                 str(tmp_path / "in"), str(tmp_path / "out")]) == 0
    assert len(list((tmp_path / "out").iterdir())) == 3


def test_apply_shape_mismatch_is_user_error(attack_run, tmp_path, capsys):
    tmp, _ = attack_run
    save_image(tmp_path / "small.png", np.zeros((16, 16, 3)))
    rc = main(["apply", "--watermark", str(tmp / "a" / "watermark.cmua"),
               str(tmp_path / "small.png"), str(tmp_path / "o.png")])
    assert rc == 1 and "never resampled" in capsys.readouterr().err


def test_corrupt_watermark_is_user_error(attack_run, tmp_path):
    tmp, cfg = attack_run
    blob = bytearray((tmp / "a" / "watermark.cmua").read_bytes())
    blob[40] ^= 0xFF
    bad = tmp_path / "bad.cmua"
    bad.write_bytes(bytes(blob))
    assert main(["eval", "--watermark", str(bad), "--config", cfg, "--out-dir", str(tmp_path)]) == 1


def test_zero_epsilon_attack(tmp_path):
    doc = json.loads(json.dumps(SMALL))
    doc["pipeline"]["attack"]["epsilon"] = 0.0
    assert main(["attack", "--config", write_config(tmp_path, doc), "--out-dir", str(tmp_path / "z")]) == 0
    assert not np.any(load_watermark(tmp_path / "z" / "watermark.cmua").perturbation)


def test_eval_zero_watermark_has_zero_success(tmp_path):
    save_watermark(tmp_path / "zero.cmua", Watermark.zeros((32, 32, 3), 0.05))
    cfg = write_config(tmp_path)
    assert main(["eval", "--watermark", str(tmp_path / "zero.cmua"), "--config", cfg,
                 "--out-dir", str(tmp_path / "e")]) == 0
    report = read_json(tmp_path / "e" / "report.json")
    assert [m["sr_mask"] for m in report["metrics"]] == [0.0] * 4


def test_baseline_rows(tmp_path):
    cfg = write_config(tmp_path)
    for method in ("bim", "DI2", "CMUA"):
        assert main(["baseline", "--method", method, "--config", cfg, "--out-dir", str(tmp_path)]) == 0
        row = read_json(tmp_path / f"baseline_{method.lower()}.json")["row"]
        assert row["method"] == method.upper()
        assert 0 <= row["min_sr_mask"] <= row["mean_sr_mask"] <= 1
        frd_keys = [k for k in row if k.startswith("log10_frd:")]
        assert len(frd_keys) == 4


def test_pgd_single_model_equals_attack(tmp_path):
    doc = json.loads(json.dumps(SMALL))
    doc["dataset"]["train_count"] = 4  # a single batch: no model-level blending happens
    cfg = write_config(tmp_path, doc)
    assert main(["attack", "--config", cfg, "--family", "1", "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["baseline", "--method", "PGD", "--config", cfg, "--family", "1",
                 "--out-dir", str(tmp_path / "b")]) == 0
    a = load_watermark(tmp_path / "a" / "watermark.cmua").perturbation
    b = load_watermark(tmp_path / "b" / "watermark_pgd.cmua").perturbation
    assert a.tobytes() == b.tobytes()


def test_search_writes_trial_log(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["search", "--config", cfg, "--out-dir", str(tmp_path / "s")]) == 0
    lines = (tmp_path / "s" / "trials.jsonl").read_text().splitlines()
    assert len(lines) == 2 and all({"index", "x", "y", "wall_time"} <= set(json.loads(l)) for l in lines)
    doc = read_json(tmp_path / "s" / "search.json")
    assert len(doc["step_sizes"]) == 4


def test_two_phase_attack(tmp_path):
    doc = dict(SMALL, two_phase=True)
    assert main(["attack", "--config", write_config(tmp_path, doc), "--out-dir", str(tmp_path / "t")]) == 0
    manifest = read_json(tmp_path / "t" / "manifest.json")
    assert manifest["search"]["trials"] == 2 and len(manifest["search"]["step_sizes"]) == 4


def test_dataset_directory(tmp_path):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    rng = np.random.default_rng(0)
    for i in range(8):
        save_image(imgs / f"{i:03d}.png", rng.random((32, 32, 3)))
    doc = {"dataset": {"source": "directory", "directory": str(imgs), "train_count": 4, "eval_start": 4,
                       "eval_count": 4, "score_start": 4, "score_count": 4},
           "pipeline": {"batch_size": 4, "attack": {"n_iters": 1}}, "search": {"batch_size": 4},
           "metrics": {"frd": False}}
    assert main(["attack", "--config", write_config(tmp_path, doc), "--out-dir", str(tmp_path / "o")]) == 0


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["baseline", "--method", "FGSM"],
    ["eval", "--watermark", "/nonexistent.cmua"],
    ["attack", "--config", "/nonexistent.json"],
    ["attack", "--dataset", "/nonexistent-dir"],
])
def test_user_errors_exit_1(argv, tmp_path):
    assert main(argv + (["--out-dir", str(tmp_path)] if argv[0] in ("eval", "attack") else [])) == 1


def test_internal_error_exits_2(tmp_path, monkeypatch):
    import cmua.cli as cli

    def boom(*a, **k):
        raise RuntimeError("unexpected")

    monkeypatch.setattr(cli, "run_cmua", boom)
    assert main(["attack", "--config", write_config(tmp_path), "--out-dir", str(tmp_path)]) == 2
