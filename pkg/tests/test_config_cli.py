import json
from pathlib import Path

import pytest

from hnseg.cli import describe_text, main
from hnseg.config import desk_preset, dump, from_dict, load, loads, paper_preset, preset
from hnseg.errors import ConfigError

GOLDEN = Path(__file__).parent / "golden" / "describe_paper.txt"


# ---------------------------------------------------------------------------
# config


@pytest.mark.parametrize("name", ["desk", "paper"])
def test_roundtrip(tmp_path, name):
    cfg = preset(name)
    dump(cfg, tmp_path / "c.json")
    assert load(tmp_path / "c.json") == cfg
    assert loads(cfg.dumps()) == cfg


def test_overlay_keeps_preset_fields():
    cfg = from_dict({"preset": "paper", "train": {"epochs": 7}})
    assert cfg.train.epochs == 7 and cfg.train.lr0 == 2e-4 and cfg.network.init_filters == 32


@pytest.mark.parametrize(
    "data",
    [
        {"bogus": 1},
        {"train": {"epochz": 3}},
        {"train": {"epochs": "ten"}},
        {"train": {"epochs": 0}},
        {"preset": "huge"},
        {"sampler": {"class_probs": [0.5, 0.5, 0.5]}},
        {"network": {"patch_size": [64, 64, 64]}},
    ],
)
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        from_dict(data)


def test_paper_constants():
    cfg = paper_preset()
    assert cfg.network.blocks_down == (1, 2, 2, 4, 4, 4) and cfg.network.init_filters == 32
    assert cfg.network.patch_size == (192, 192, 192) and cfg.network.ds_levels == 5
    assert cfg.train.lr0 == 2e-4 and cfg.train.weight_decay == 1e-5 and cfg.train.epochs == 300
    assert cfg.crossval.folds == 5 and cfg.crossval.ensemble_size == 15
    assert cfg.sampler.class_probs == (0.45, 0.45, 0.1)
    assert (cfg.crop.box_xy_mm, cfg.crop.box_z_mm) == (200, 310) and cfg.spacing == (1, 1, 1)


def test_describe_matches_golden():
    assert describe_text(paper_preset()) == GOLDEN.read_text()


# ---------------------------------------------------------------------------
# command line


def test_no_args_is_usage_error(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_verb_is_usage_error():
    assert main(["frobnicate"]) == 2


def test_unknown_config_key_exit_3(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"nope": 1}}))
    assert main(["describe", "--config", str(tmp_path / "c.json")]) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] and "nope" in err["message"]


def test_print_config(capsys):
    assert main(["describe", "--preset", "paper", "--print-config", "--seed", "9"]) == 0
    cfg = loads(capsys.readouterr().out)
    assert cfg.preset == "paper" and cfg.seed == 9


def test_describe_cli_golden(capsys):
    assert main(["describe", "--preset", "paper"]) == 0
    assert capsys.readouterr().out == GOLDEN.read_text()


def test_missing_input_is_failure(tmp_path, capsys):
    assert main(["preprocess", "--input", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"]


def test_phantom_preprocess_evaluate(tmp_path, capsys):
    raw, pre = tmp_path / "raw", tmp_path / "pre"
    assert main(["phantom", "--count", "2", "--seed", "5", "--out", str(raw)]) == 0
    assert (raw / "manifest.json").exists() and (raw / "provenance.json").exists()
    assert main(["preprocess", "--input", str(raw), "--out", str(pre)]) == 0
    assert sorted(p.name for p in pre.iterdir() if p.is_dir()) == ["case_000", "case_001"]
    # ground truth against itself scores 1 for every class
    assert main(["evaluate", "--pred-dir", str(raw), "--gt-dir", str(raw), "--report", str(tmp_path / "r.csv")]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["mean"] == 1.0 and out["cases"] == 2


def test_infer_cli(tmp_path, trained_model, tiny_corpus, capsys):
    _, _, result, _ = trained_model
    case_dir = tiny_corpus / "raw" / "case_000"
    out = tmp_path / "pred" / "case_000.nii.gz"
    assert main(["infer", "--checkpoints", result.best_path, "--input", str(case_dir), "--out", str(out),
                 "--tta"]) == 0
    from hnseg.volume import read_nifti

    pred = read_nifti(out, kind="label")
    gt = read_nifti(case_dir / "label.nii.gz", kind="label")
    assert pred.geometry.isclose(gt.geometry)
    assert set(pred.labels.ravel().tolist()) <= {0, 1, 2}
    assert json.loads((tmp_path / "pred" / "provenance.json").read_text())["arch_hash"]


def test_desk_preset_is_consistent():
    cfg = desk_preset()
    assert cfg.crossval.folds == 2 and cfg.crossval.runs == 1 and cfg.train.epochs <= 40
