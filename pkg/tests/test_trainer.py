import json
from dataclasses import replace

import numpy as np
import pytest

import hnseg.trainer as trainer
from hnseg.autodiff import Tensor, load_checkpoint, params_hash
from hnseg.errors import TrainingError
from hnseg.segresnet import build
from hnseg.trainer import load_cases, model_seed, run_crossval, split_holdout, train_fold


def short(cfg, **train):
    return replace(cfg, train=replace(cfg.train, **train))


@pytest.fixture(scope="module")
def cases(tiny_corpus):
    return load_cases(tiny_corpus / "pre")


def two_folds(cases):
    ids = sorted(cases)
    return [ids[:3], ids[3:]]


def test_lr_endpoints_in_log(tmp_path, desk_cfg, cases):
    cfg = short(desk_cfg, epochs=2, steps_per_epoch=1, lr0=2e-4, val_every=2)
    res = train_fold(cfg, two_folds(cases), cases, tmp_path)
    log = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert log == res.history
    assert log[0]["lr"] == 2e-4
    assert log[-1]["lr_end"] == 0.0
    assert {"epoch", "lr", "loss", "loss_level0", "val_dice"} <= set(log[-1])


def test_smoke_loss_decreases(tmp_path, desk_cfg, cases):
    cfg = short(desk_cfg, epochs=2, steps_per_epoch=8, val_every=2)
    ids = sorted(cases)[:4]
    res = train_fold(cfg, [ids], {c: cases[c] for c in ids}, tmp_path)
    assert res.history[-1]["loss"] < res.history[0]["loss"]


def test_resume_reproduces_hash(tmp_path, desk_cfg, cases):
    cfg = short(desk_cfg, epochs=3, steps_per_epoch=2, val_every=1)
    folds = two_folds(cases)
    straight = train_fold(cfg, folds, cases, tmp_path / "a")
    train_fold(cfg, folds, cases, tmp_path / "b", stop_after=2)
    resumed = train_fold(cfg, folds, cases, tmp_path / "b", resume=True)
    assert resumed.final_hash == straight.final_hash
    assert [h["epoch"] for h in resumed.history] == [0, 1, 2]
    assert resumed.best_metric == straight.best_metric


def test_reproducible_runs(tmp_path, desk_cfg, cases):
    cfg = short(desk_cfg, epochs=1, steps_per_epoch=3)
    a = train_fold(cfg, two_folds(cases), cases, tmp_path / "a")
    b = train_fold(cfg, two_folds(cases), cases, tmp_path / "b")
    assert a.final_hash == b.final_hash


def test_zero_lr_keeps_init(tmp_path, desk_cfg, cases):
    cfg = short(desk_cfg, epochs=2, steps_per_epoch=2, lr0=0.0)
    res = train_fold(cfg, two_folds(cases), cases, tmp_path)
    init = build(cfg.network, seed=model_seed(cfg.seed, 0, 0))
    assert res.final_hash == params_hash(init.params)


def test_best_checkpoint_is_max_validation(trained_model):
    _, _, res, out = trained_model
    vals = [h["val_dice"] for h in res.history if "val_dice" in h]
    assert len(vals) == 3 and res.best_metric == max(vals)
    meta = load_checkpoint(out / "best.ckpt").meta
    assert meta["val_dice"] == max(vals) and meta["epoch"] == res.best_epoch


def test_validation_only_sees_held_out_fold(tmp_path, desk_cfg, cases, monkeypatch):
    seen = []
    real = trainer.validate

    def spy(net, val_cases, cfg):
        seen.append(sorted(c.case_id for c in val_cases))
        return real(net, val_cases, cfg)

    monkeypatch.setattr(trainer, "validate", spy)
    folds = two_folds(cases)
    train_fold(short(desk_cfg, epochs=1, steps_per_epoch=1), folds, cases, tmp_path, fold=1)
    assert seen == [folds[1]]


def test_nan_loss_dumps_state(tmp_path, desk_cfg, cases, monkeypatch):
    def nan_loss(preds, target, cfg=None, parts=None):
        if parts is not None:
            parts.update(total=float("nan"), level0=float("nan"))
        return Tensor(np.array(np.nan, dtype=np.float32))

    monkeypatch.setattr(trainer, "deep_supervision_loss", nan_loss)
    with pytest.raises(TrainingError, match="non-finite"):
        train_fold(short(desk_cfg, epochs=1, steps_per_epoch=1), two_folds(cases), cases, tmp_path)
    assert (tmp_path / "nan_state.ckpt").exists()


def test_split_holdout():
    ids = [f"c{i}" for i in range(10)]
    pool, test = split_holdout(ids, 3, seed=0)
    assert len(test) == 3 and sorted(pool + test) == ids and not set(pool) & set(test)
    assert split_holdout(ids, 3, seed=0) == (pool, test)


def test_crossval_degenerate_report(tmp_path, desk_cfg, tiny_corpus):
    cfg = replace(
        short(desk_cfg, epochs=1, steps_per_epoch=1),
        crossval=replace(desk_cfg.crossval, folds=1, runs=1, test_holdout=2, with_postprocess=False),
    )
    res = run_crossval(cfg, tiny_corpus / "pre", tiny_corpus / "raw", tmp_path)
    assert len(res.models) == 1 and len(res.table) == 1 and len(res.table[0]) == 1
    md = (tmp_path / "crossval.md").read_text().splitlines()
    assert md[0] == "| | Fold 1 | Average |"
    assert set(res.submissions) == {"One", "Two"}
    assert (tmp_path / "submissions.md").exists() and (tmp_path / "test_two.csv").exists()
    assert json.loads((tmp_path / "test_cases.json").read_text()) == res.test_ids
