"""Aggregated Dice (tallies pooled over cases) and per-case diagnostics."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CaseError
from .volume import LabelVolume

log = logging.getLogger(__name__)

CLASSES = (1, 2)
CLASS_NAMES = {1: "gtvp", 2: "gtvn"}


@dataclass(frozen=True)
class Tally:
    intersection: int
    pred: int
    gt: int


def _masks(pred, gt):
    p = pred.labels if isinstance(pred, LabelVolume) else np.asarray(pred)
    g = gt.labels if isinstance(gt, LabelVolume) else np.asarray(gt)
    if isinstance(pred, LabelVolume) and isinstance(gt, LabelVolume):
        if not pred.geometry.isclose(gt.geometry):
            raise CaseError("prediction and ground truth geometries differ")
    if p.shape != g.shape:
        raise CaseError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return p, g


def tally(pred, gt, cls: int) -> Tally:
    p, g = _masks(pred, gt)
    pm, gm = p == cls, g == cls
    return Tally(int(np.count_nonzero(pm & gm)), int(np.count_nonzero(pm)), int(np.count_nonzero(gm)))


def _ratio(inter: int, total: int) -> float:
    return 1.0 if total == 0 else 2.0 * inter / total


def per_case_dice(pred, gt, cls: int) -> float:
    """``2|P&G| / (|P|+|G|)``; 1.0 when both are empty."""
    t = tally(pred, gt, cls)
    return _ratio(t.intersection, t.pred + t.gt)


@dataclass
class EvalReport:
    case_ids: list[str]
    tallies: dict[str, dict[int, Tally]]
    per_class: dict[int, float]
    mean: float
    vacuous: list[int] = field(default_factory=list)

    def per_case(self) -> dict[str, dict[int, float]]:
        return {
            cid: {c: _ratio(t.intersection, t.pred + t.gt) for c, t in self.tallies[cid].items()}
            for cid in self.case_ids
        }

    def write_csv(self, path: str | os.PathLike) -> None:
        """Rows per case, then footer rows with aggregated and mean-per-case values."""
        per_case = self.per_case()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["case", "dice_gtvp", "dice_gtvn"])
            for cid in self.case_ids:
                w.writerow([cid, _fmt(per_case[cid][1]), _fmt(per_case[cid][2])])
            w.writerow(["aggregated", _fmt(self.per_class[1]), _fmt(self.per_class[2])])
            w.writerow(["aggregated_mean", _fmt(self.mean), ""])
            if self.vacuous:
                w.writerow(["vacuous_classes", " ".join(CLASS_NAMES[c] for c in self.vacuous), ""])


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def aggregated_dice(cases: Sequence[tuple], case_ids: Iterable[str] | None = None) -> EvalReport:
    """Pool intersections and sizes over all cases, per class, then take the ratio.

    ``cases`` holds ``(pred, gt)`` pairs of LabelVolumes or integer arrays.
    A class that is absent from every prediction and ground truth scores 1.0
    and is listed in ``EvalReport.vacuous``.
    """
    ids = list(case_ids) if case_ids is not None else [f"case_{i:03d}" for i in range(len(cases))]
    if len(ids) != len(cases):
        raise CaseError("case_ids and cases differ in length")
    tallies = {cid: {c: tally(p, g, c) for c in CLASSES} for cid, (p, g) in zip(ids, cases)}
    per_class, vacuous = {}, []
    for c in CLASSES:
        # sorted order keeps integer sums independent of the input order
        inter = sum(tallies[cid][c].intersection for cid in sorted(ids))
        total = sum(tallies[cid][c].pred + tallies[cid][c].gt for cid in sorted(ids))
        if total == 0:
            vacuous.append(c)
            log.warning("class %s absent from every prediction and ground truth; scored 1.0", CLASS_NAMES[c])
        per_class[c] = _ratio(inter, total)
    mean = (per_class[1] + per_class[2]) / 2
    return EvalReport(ids, tallies, per_class, mean, vacuous)


def read_report_csv(path: str | os.PathLike) -> dict[str, tuple[str, str]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return {r[0]: (r[1], r[2]) for r in rows[1:]}


def evaluate_dirs(pred_dir: str | os.PathLike, gt_dir: str | os.PathLike) -> EvalReport:
    """Match ``<stem>.nii.gz`` files (or ``<stem>/label.nii.gz``) by stem."""
    from .volume import read_nifti

    def index(d: Path) -> dict[str, Path]:
        out = {}
        for p in sorted(d.iterdir()):
            if p.is_dir() and (p / "label.nii.gz").exists():
                out[p.name] = p / "label.nii.gz"
            elif p.name.endswith(".nii.gz"):
                out[p.name[: -len(".nii.gz")]] = p
            elif p.suffix == ".nii":
                out[p.stem] = p
        return out

    preds, gts = index(Path(pred_dir)), index(Path(gt_dir))
    common = sorted(set(preds) & set(gts))
    if not common:
        raise CaseError(f"no matching cases between {pred_dir} and {gt_dir}")
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise CaseError(f"missing predictions for {missing}")
    pairs = [(read_nifti(preds[c], kind="label"), read_nifti(gts[c], kind="label")) for c in common]
    return aggregated_dice(pairs, common)
