"""Preference-ranked AP@0.5, per-task reports, and diagnostic eval modes.

AP here is the raw step integral of the precision-recall curve: detections
are ranked by descending preference (ties broken by scene id, then query
index), matched greedily against not-yet-claimed ground truth at IoU >= 0.5,
and each true positive contributes (1/n_gt) * precision-at-that-rank. No
max-precision envelope is applied; the curve is integrated at every point.

Evaluation modes: "pronoun-plain" and "distilled" see only the verb-pronoun
text; "noun-oracle", "replace-pre" and "replace-post" consume ground-truth
nouns and are flagged as privileged diagnostics in the report.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import model as md
from .descriptions import FORM_EMPTY
from .distill import MemoryBank, inference
from .synthdata import CATEGORY_NAMES, Dataset, to_ground_truth

IOU_THRESHOLD = 0.5
MASK_THRESHOLD = 0.5  # on sigmoid(mask logits), i.e. logits > 0

MODE_PRONOUN_PLAIN = "pronoun-plain"
MODE_NOUN_ORACLE = "noun-oracle"
MODE_REPLACE_PRE = "replace-pre"
MODE_REPLACE_POST = "replace-post"
MODE_DISTILLED = "distilled"
EVAL_MODES = (MODE_PRONOUN_PLAIN, MODE_NOUN_ORACLE, MODE_REPLACE_PRE,
              MODE_REPLACE_POST, MODE_DISTILLED)
PRIVILEGED_MODES = (MODE_NOUN_ORACLE, MODE_REPLACE_PRE, MODE_REPLACE_POST)


@dataclass(frozen=True)
class Detection:
    scene_id: int
    task_id: int
    box: np.ndarray        # (4,) cxcywh
    mask: np.ndarray       # (H, W) bool, sigmoid(logits) > MASK_THRESHOLD
    score: float           # preference, in (0, 1)
    query_index: int

    def __post_init__(self):
        if not 0.0 < self.score < 1.0:
            raise ValueError(f"detection score {self.score} outside (0, 1)")


def _open_unit(x: float) -> float:
    return float(min(max(x, np.nextafter(0.0, 1.0)), np.nextafter(1.0, 0.0)))


def detections_from_arrays(scene_id, task_id, boxes, mask_logits,
                           scores) -> list:
    """One Detection per query — ranking, not thresholding, drives AP."""
    boxes = np.asarray(boxes, dtype=np.float64)
    masks = np.asarray(mask_logits) > 0.0
    return [Detection(scene_id, task_id, boxes[q], masks[q],
                      _open_unit(scores[q]), q)
            for q in range(len(boxes))]


def _rank(detections):
    return sorted(detections,
                  key=lambda d: (-d.score, d.scene_id, d.query_index))


def match_flags(detections, gt_sets, iou_kind: str = "box") -> np.ndarray:
    """Greedy TP/FP flags in rank order. A detection is TP when its best IoU
    with a not-yet-matched GT of its scene reaches the threshold; that GT
    (lowest index on IoU ties) is then consumed."""
    if iou_kind not in ("box", "mask"):
        raise ValueError(f"iou_kind must be box|mask, got {iou_kind!r}")
    by_scene = {g.scene_id: g for g in gt_sets}
    taken = {g.scene_id: np.zeros(len(g.boxes), dtype=bool) for g in gt_sets}
    flags = np.zeros(len(detections), dtype=bool)
    for k, det in enumerate(_rank(detections)):
        gt = by_scene.get(det.scene_id)
        if gt is None or not len(gt.boxes):
            continue
        if iou_kind == "box":
            ious = geo.box_iou_matrix(det.box[None, :], gt.boxes)[0]
        else:
            ious = geo.mask_iou_matrix(det.mask[None], gt.masks)[0]
        ious = np.where(taken[det.scene_id], -1.0, ious)
        best = int(np.argmax(ious))
        if ious[best] >= IOU_THRESHOLD:
            taken[det.scene_id][best] = True
            flags[k] = True
    return flags


def _ap_from_flags(flags: np.ndarray, n_gt: int) -> float:
    if n_gt == 0 or not len(flags):
        return 0.0
    tp = np.cumsum(flags)
    ranks = np.arange(1, len(flags) + 1)
    return float(np.sum((tp[flags] / ranks[flags])) / n_gt)


def _pr_from_flags(flags: np.ndarray, n_gt: int):
    tp = np.cumsum(flags)
    ranks = np.arange(1, len(flags) + 1)
    recall = tp / n_gt if n_gt else np.zeros(len(flags))
    precision = tp / ranks
    return recall.tolist(), precision.tolist()


def ap_at_05(detections, gt_sets, iou_kind: str = "box") -> float:
    flags = match_flags(detections, gt_sets, iou_kind)
    return _ap_from_flags(flags, sum(len(g.boxes) for g in gt_sets))


@dataclass
class EvalReport:
    mode: str
    privileged: bool
    per_task_box: dict
    per_task_mask: dict
    map_box: float
    map_mask: float
    per_block_task_box: list     # per decoder block: {task: AP}, pairing
    per_block_task_mask: list    # last-block boxes/masks with that block's
    per_block_map_box: list      # preference scores; then the block mAPs
    per_block_map_mask: list
    pr_curves: dict              # "task<i>:<kind>" -> {recall, precision}
    per_category: dict           # name -> subset APs on scenes holding it
    subsets: dict                # empty / nonempty subset APs
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "mode": self.mode, "privileged": self.privileged,
            "per_task_box": {str(k): v for k, v in self.per_task_box.items()},
            "per_task_mask": {str(k): v
                              for k, v in self.per_task_mask.items()},
            "map_box": self.map_box, "map_mask": self.map_mask,
            "per_block_task_box": [{str(k): v for k, v in d.items()}
                                   for d in self.per_block_task_box],
            "per_block_task_mask": [{str(k): v for k, v in d.items()}
                                    for d in self.per_block_task_mask],
            "per_block_map_box": self.per_block_map_box,
            "per_block_map_mask": self.per_block_map_mask,
            "pr_curves": self.pr_curves, "per_category": self.per_category,
            "subsets": self.subsets, "metadata": self.metadata,
        }


def _forward_for_mode(sample, params, config, mode, bank, seed):
    if mode == MODE_PRONOUN_PLAIN:
        return md.forward(sample.features, sample.pron_desc, params, config,
                          trainable=False)
    if mode == MODE_NOUN_ORACLE:
        return md.forward(sample.features, sample.noun_desc, params, config,
                          trainable=False)
    if mode == MODE_DISTILLED:
        return inference(sample.features, sample.pron_desc, params, config,
                         bank, seed=seed)
    # replace modes: nothing to swap in when the scene has no target noun
    if sample.noun_desc.form == FORM_EMPTY:
        return md.forward(sample.features, sample.pron_desc, params, config,
                          trainable=False)
    fwd_mode = (md.MODE_REPLACE_PRE if mode == MODE_REPLACE_PRE
                else md.MODE_REPLACE_POST)
    return md.forward(sample.features, sample.pron_desc, params, config,
                      trainable=False, mode=fwd_mode,
                      noun_desc=sample.noun_desc)


def evaluate(params: dict, config, dataset: Dataset, mode: str,
             bank: MemoryBank = None, seed: int = 0) -> EvalReport:
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown eval mode {mode!r}; choose from "
                         f"{EVAL_MODES}")
    if mode == MODE_DISTILLED and bank is None:
        raise ValueError("distilled evaluation needs a memory bank")

    grid = dataset.grid
    task_ids = [t.task_id for t in dataset.tasks]
    dets = {t: [] for t in task_ids}          # final-block detections
    block_dets = None                         # [block][task] -> detections
    gts = {t: [] for t in task_ids}

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")       # unready-bank fallbacks
        for s in dataset.samples:
            pred = _forward_for_mode(s, params, config, mode, bank, seed)
            gts[s.task_id].append(to_ground_truth(s, config.n_max, grid))
            boxes = pred.boxes.data
            masks = pred.mask_logits.data
            if block_dets is None:
                block_dets = [{t: [] for t in task_ids}
                              for _ in range(pred.n_blocks)]
            dets[s.task_id].extend(detections_from_arrays(
                s.scene_id, s.task_id, boxes, masks, pred.preference))
            for b, scores in enumerate(pred.block_preferences()):
                block_dets[b][s.task_id].extend(detections_from_arrays(
                    s.scene_id, s.task_id, boxes, masks, scores))

    per_task_box, per_task_mask, pr_curves = {}, {}, {}
    for t in task_ids:
        n_gt = sum(len(g.boxes) for g in gts[t])
        fb = match_flags(dets[t], gts[t], "box")
        fm = match_flags(dets[t], gts[t], "mask")
        per_task_box[t] = _ap_from_flags(fb, n_gt)
        per_task_mask[t] = _ap_from_flags(fm, n_gt)
        for kind, fl in (("box", fb), ("mask", fm)):
            r, p = _pr_from_flags(fl, n_gt)
            pr_curves[f"task{t}:{kind}"] = {"recall": r, "precision": p}

    def _mean(d):
        return float(np.mean(list(d.values()))) if d else 0.0

    block_task_box, block_task_mask = [], []
    for b in range(len(block_dets or [])):
        block_task_box.append({
            t: ap_at_05(block_dets[b][t], gts[t], "box") for t in task_ids})
        block_task_mask.append({
            t: ap_at_05(block_dets[b][t], gts[t], "mask") for t in task_ids})

    # subset and per-category breakdowns reuse the same ranking machinery on
    # scene subsets, pooled across tasks
    def _subset_ap(scene_ids):
        sub_d = [d for t in task_ids for d in dets[t]
                 if d.scene_id in scene_ids]
        sub_g = [g for t in task_ids for g in gts[t]
                 if g.scene_id in scene_ids]
        return {"box": ap_at_05(sub_d, sub_g, "box"),
                "mask": ap_at_05(sub_d, sub_g, "mask"),
                "n_scenes": len(sub_g),
                "n_gt": int(sum(len(g.boxes) for g in sub_g))}

    empty_ids = {s.scene_id for s in dataset.samples if s.n_gt == 0}
    nonempty_ids = {s.scene_id for s in dataset.samples if s.n_gt > 0}
    subsets = {"empty": _subset_ap(empty_ids),
               "nonempty": _subset_ap(nonempty_ids)}

    per_category = {}
    for c, name in enumerate(CATEGORY_NAMES):
        ids = {s.scene_id for s in dataset.samples
               if c in s.gt_categories()}
        if ids:
            sub = _subset_ap(ids)
            per_category[name] = {"box": sub["box"], "mask": sub["mask"],
                                  "n_scenes": sub["n_scenes"]}

    return EvalReport(
        mode=mode, privileged=mode in PRIVILEGED_MODES,
        per_task_box=per_task_box, per_task_mask=per_task_mask,
        map_box=_mean(per_task_box), map_mask=_mean(per_task_mask),
        per_block_task_box=block_task_box,
        per_block_task_mask=block_task_mask,
        per_block_map_box=[_mean(d) for d in block_task_box],
        per_block_map_mask=[_mean(d) for d in block_task_mask],
        pr_curves=pr_curves, per_category=per_category, subsets=subsets,
        metadata={
            "interpolation": "all-points step integral, no envelope",
            "iou_threshold": IOU_THRESHOLD,
            "mask_threshold": MASK_THRESHOLD,
            "n_scenes": len(dataset.samples),
            "per_block_protocol":
                "last-block boxes and masks, per-block preference scores",
        })


def export_report(report: EvalReport, path, format: str = "json") -> None:
    """JSON keeps full float precision (shortest round-trip repr). CSV emits
    one row per task and metric; PR curves go to a sibling .pr.csv file."""
    if format == "json":
        with open(path, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        return
    if format != "csv":
        raise ValueError(f"unknown export format {format!r}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "metric", "value"])
        for t in sorted(report.per_task_box):
            w.writerow([t, "ap_box", repr(report.per_task_box[t])])
            w.writerow([t, "ap_mask", repr(report.per_task_mask[t])])
    from pathlib import Path
    pr_path = Path(path).with_suffix(".pr.csv")
    with open(pr_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "kind", "recall", "precision"])
        for key in sorted(report.pr_curves):
            task, kind = key.split(":")
            curve = report.pr_curves[key]
            for r, p in zip(curve["recall"], curve["precision"]):
                w.writerow([task, kind, repr(r), repr(p)])


def load_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
