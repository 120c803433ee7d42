"""
Per-fold training and the cross-validation harness.

Every random draw is keyed by ``(seed, run, fold, epoch, step)`` so a run is
reproducible from its config alone and can resume from any saved epoch.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import AdamWState, adamw_step, backward, cosine_lr, load_checkpoint, params_hash, save_checkpoint
from .config import PipelineConfig
from .datapipe import CaseRecord, patch_stream, read_folds, split_folds, step_rng, training_patch, write_folds
from .errors import ArgumentError, TrainingError
from .inference import InferenceConfig, NetPredictor, ProbabilityMap, finalize, predict_volume, sliding_window
from .loss import deep_supervision_loss
from .metrics import EvalReport, aggregated_dice
from .preprocess import load_preprocessed
from .segresnet import NetworkParams, build, forward
from .volume import ImageGeometry, read_nifti

log = logging.getLogger(__name__)


def model_seed(seed: int, run: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, run, fold, 0xC0]).generate_state(1)[0])


def load_cases(pre_dir: str | os.PathLike, ids: Sequence[str] | None = None) -> dict[str, CaseRecord]:
    pre_dir = Path(pre_dir)
    if ids is None:
        ids = sorted(p.name for p in pre_dir.iterdir() if (p / "sidecar.json").exists())
    return {cid: CaseRecord.load(pre_dir / cid) for cid in ids}


@dataclass
class FoldResult:
    fold: int
    run: int
    best_metric: float
    best_epoch: int
    best_path: str
    last_path: str
    final_hash: str
    history: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate(net: NetworkParams, cases: Sequence[CaseRecord], cfg: PipelineConfig) -> EvalReport:
    """Aggregated Dice on the cropped grid, plain sliding window (no TTA)."""
    inf = InferenceConfig(roi_size=cfg.inference.roi_size, overlap=cfg.inference.overlap, tta=False)
    predict = NetPredictor(net)
    pairs = []
    for case in cases:
        pm = sliding_window(predict, case.image[None], inf, pad_values=case.pad_values)
        pairs.append((pm.argmax().labels, case.label))
    return aggregated_dice(pairs, [c.case_id for c in cases])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _save(path, net, opt, cfg, meta):
    save_checkpoint(path, net.params, net.buffers, net.config.arch_dict(), optimizer=opt, meta=meta)


def train_fold(
    cfg: PipelineConfig,
    folds: Sequence[Sequence[str]],
    cases: dict[str, CaseRecord],
    out_dir: str | os.PathLike,
    fold: int = 0,
    run: int = 0,
    resume: bool = False,
    stop_after: int | None = None,
) -> FoldResult:
    """Train one model on every fold but ``fold`` and validate on ``fold``.

    With a single fold the model is validated on its own training cases.
    ``stop_after`` ends the loop after that many epochs (used to test resume).
    """
    if not 0 <= fold < len(folds):
        raise ArgumentError(f"fold {fold} out of range for {len(folds)} folds")
    tc = cfg.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    val_ids = list(folds[fold])
    train_ids = sorted(c for i, f in enumerate(folds) if i != fold for c in f) or list(val_ids)
    if set(train_ids) & set(val_ids) and len(folds) > 1:
        raise ArgumentError("folds overlap")
    missing = [c for c in train_ids + val_ids if c not in cases]
    if missing:
        raise ArgumentError(f"cases not loaded: {missing}")

    net = build(cfg.network, seed=model_seed(cfg.seed, run, fold))
    opt = AdamWState.for_params(net.params, weight_decay=tc.weight_decay)
    best_path, last_path = out / "best.ckpt", out / "last.ckpt"
    log_path = out / "train_log.jsonl"
    start_epoch, best_metric, best_epoch = 0, -math.inf, -1
    history: list[dict] = []

    if resume and last_path.exists():
        ck = load_checkpoint(last_path, expected_config=net.config.arch_dict())
        net.load_arrays(ck.params, ck.buffers)
        opt = ck.optimizer
        start_epoch = ck.meta["epoch"] + 1
        best_metric, best_epoch = ck.meta["best_metric"], ck.meta["best_epoch"]
        if log_path.exists():
            history = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
            history = [h for h in history if h["epoch"] < start_epoch]
    with open(log_path, "w") as f:
        for h in history:
            f.write(json.dumps(h) + "\n")

    n_steps = tc.steps_per_epoch or math.ceil(len(train_ids) / tc.batch_size)
    micro = tc.batch_size * tc.grad_accum
    val_cases = [cases[c] for c in val_ids]

    for epoch in range(start_epoch, tc.epochs):
        if stop_after is not None and epoch >= stop_after:
            break
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, tc.epochs, tc.lr0)
        order_rng = np.random.default_rng([cfg.seed, run, fold, epoch])
        need = n_steps * micro
        order = np.concatenate([order_rng.permutation(len(train_ids)) for _ in range(-(-need // len(train_ids)))])
        jobs = [(cases[train_ids[order[i]]], step_rng(cfg.seed, run, fold, epoch, i)) for i in range(need)]
        stream = patch_stream(jobs, lambda job: training_patch(job[0], cfg.sampler, cfg.augment, job[1]), tc.workers)

        totals = {"loss": 0.0, "level0": 0.0}
        for step in range(n_steps):
            for acc in range(tc.grad_accum):
                batch = [next(stream) for _ in range(tc.batch_size)]
                x = np.concatenate([b[0] for b in batch])
                y = np.concatenate([b[1] for b in batch])
                parts: dict = {}
                loss = deep_supervision_loss(forward(net, x, "train"), y, cfg.loss, parts)
                if not np.isfinite(loss.item()):
                    dump = out / "nan_state.ckpt"
                    _save(dump, net, opt, cfg, {"epoch": epoch, "step": step, "parts": parts})
                    raise TrainingError(f"non-finite loss at epoch {epoch} step {step}; state dumped to {dump}")
                if tc.grad_accum > 1:
                    loss = loss * (1.0 / tc.grad_accum)
                backward(loss, accumulate=acc > 0)
                totals["loss"] += parts["total"] / (n_steps * tc.grad_accum)
                totals["level0"] += parts["level0"] / (n_steps * tc.grad_accum)
            adamw_step(net.params, opt, lr)
            net.zero_grad()

        record = {
            "epoch": epoch,
            "lr": lr,
            "lr_end": cosine_lr(epoch + 1, tc.epochs, tc.lr0),
            "loss": totals["loss"],
            "loss_level0": totals["level0"],
        }
        if (epoch + 1) % tc.val_every == 0 or epoch == tc.epochs - 1:
            metric = validate(net, val_cases, cfg).mean
            record["val_dice"] = metric
            if metric > best_metric:
                best_metric, best_epoch = metric, epoch
                _save(best_path, net, None, cfg, {"epoch": epoch, "val_dice": metric, "fold": fold, "run": run})
        record["seconds"] = round(time.perf_counter() - t0, 3)
        history.append(record)
        with open(log_path, "a") as f:
            f.write(json.dumps(record) + "\n")
        log.info("run %d fold %d epoch %d loss %.4f%s", run, fold, epoch, record["loss"],
                 f" val {record['val_dice']:.4f}" if "val_dice" in record else "")
        meta = {"epoch": epoch, "best_metric": best_metric, "best_epoch": best_epoch, "fold": fold, "run": run}
        _save(last_path, net, opt, cfg, meta)

    return FoldResult(fold, run, best_metric, best_epoch, str(best_path), str(last_path), params_hash(net.params), history)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


def split_holdout(case_ids: Sequence[str], n_test: int, seed: int) -> tuple[list[str], list[str]]:
    ids = sorted(case_ids)
    if n_test >= len(ids):
        raise ArgumentError(f"test_holdout {n_test} leaves no training cases")
    perm = np.random.default_rng([seed, 0x7E57]).permutation(len(ids))
    test = sorted(ids[i] for i in perm[:n_test])
    return [c for c in ids if c not in test], test


def evaluate_on_ct_grid(
    predictors, case_ids: Sequence[str], pre_dir: Path, raw_dir: Path, cfg: PipelineConfig, tta: bool, post: bool
) -> EvalReport:
    """Full pipeline per case: predict on the crop, finalize to the CT grid, score."""
    inf = InferenceConfig(roi_size=cfg.inference.roi_size, overlap=cfg.inference.overlap,
                          sigma_scale=cfg.inference.sigma_scale, tta=tta)
    pp = cfg.inference.postprocess
    if post:
        pp = type(pp)(enabled=True, min_volume_mm3=pp.min_volume_mm3, min_mean_pet=pp.min_mean_pet)
    pairs = []
    for cid in case_ids:
        case = load_preprocessed(pre_dir / cid)
        pm = predict_volume(predictors, case.network_input(), inf, case.geometry, _pad(case.sidecar))
        pred = finalize(pm, case.sidecar, pet_raw=case.pet_raw, post=pp)
        gt = read_nifti(raw_dir / cid / "label.nii.gz", kind="label")
        pairs.append((pred, gt))
    return aggregated_dice(pairs, list(case_ids))


def _pad(sidecar: dict) -> tuple[float, float]:
    return sidecar["pad_values"]["ct"], sidecar["pad_values"]["pet"]


@dataclass
class CrossvalResult:
    folds: list[list[str]]
    test_ids: list[str]
    models: list[FoldResult]
    table: list[list[float]]  # [run][fold]
    submissions: dict[str, EvalReport]


def run_crossval(cfg: PipelineConfig, pre_dir: str | os.PathLike, raw_dir: str | os.PathLike,
                 out_dir: str | os.PathLike) -> CrossvalResult:
    """Train ``runs x folds`` models, write the fold table and test-set submissions."""
    cv = cfg.crossval
    pre_dir, raw_dir, out = Path(pre_dir), Path(raw_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_ids = sorted(p.name for p in pre_dir.iterdir() if (p / "sidecar.json").exists())
    pool, test_ids = split_holdout(all_ids, cv.test_holdout, cfg.seed) if cv.test_holdout else (all_ids, [])
    folds = split_folds(pool, cv.folds, cfg.seed)
    write_folds(folds, out / "folds.json")
    with open(out / "test_cases.json", "w") as f:
        json.dump(test_ids, f, indent=1)
    cases = load_cases(pre_dir, pool)

    models: list[FoldResult] = []
    table: list[list[float]] = []
    for run in range(cv.runs):
        row = []
        for fold in range(cv.folds):
            res = train_fold(cfg, folds, cases, out / f"run{run}" / f"fold{fold}", fold, run)
            models.append(res)
            rep = evaluate_on_ct_grid([NetPredictor.from_checkpoint(res.best_path)], folds[fold], pre_dir, raw_dir,
                                      cfg, tta=False, post=False)
            rep.write_csv(out / f"run{run}" / f"fold{fold}" / "val_eval.csv")
            row.append(rep.mean)
        table.append(row)
    write_fold_table(table, out / "crossval.csv", out / "crossval.md")

    submissions: dict[str, EvalReport] = {}
    if test_ids:
        first = [NetPredictor.from_checkpoint(models[0].best_path)]
        every = [NetPredictor.from_checkpoint(m.best_path) for m in models]
        submissions["One"] = evaluate_on_ct_grid(first, test_ids, pre_dir, raw_dir, cfg, tta=False, post=False)
        submissions["Two"] = evaluate_on_ct_grid(every, test_ids, pre_dir, raw_dir, cfg, tta=True, post=False)
        if cv.with_postprocess:
            submissions["Three"] = evaluate_on_ct_grid(every, test_ids, pre_dir, raw_dir, cfg, tta=True, post=True)
        for name, rep in submissions.items():
            rep.write_csv(out / f"test_{name.lower()}.csv")
        write_submission_table(submissions, out / "submissions.csv", out / "submissions.md")
    return CrossvalResult(folds, test_ids, models, table, submissions)


def write_fold_table(table: Sequence[Sequence[float]], csv_path, md_path) -> None:
    k = len(table[0])
    head = [f"Fold {i + 1}" for i in range(k)] + ["Average"]
    rows = [[f"Run {r + 1}"] + [f"{v:.4f}" for v in vals] + [f"{np.mean(vals):.4f}"] for r, vals in enumerate(table)]
    with open(csv_path, "w") as f:
        f.write(",".join(["run"] + head) + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")
    with open(md_path, "w") as f:
        f.write("| | " + " | ".join(head) + " |\n")
        f.write("|" + "---|" * (len(head) + 1) + "\n")
        for row in rows:
            f.write("| " + " | ".join(row) + " |\n")


def write_submission_table(subs: dict[str, EvalReport], csv_path, md_path) -> None:
    with open(csv_path, "w") as f:
        f.write("submission,gtvp,gtvn,total\n")
        for name, rep in subs.items():
            f.write(f"{name},{rep.per_class[1]:.5f},{rep.per_class[2]:.5f},{rep.mean:.5f}\n")
    with open(md_path, "w") as f:
        f.write("| Submission | GTVp | GTVn | Total |\n|---|---|---|---|\n")
        for name, rep in subs.items():
            f.write(f"| {name} | {rep.per_class[1]:.5f} | {rep.per_class[2]:.5f} | {rep.mean:.5f} |\n")
