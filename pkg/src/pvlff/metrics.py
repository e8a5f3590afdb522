"""Segmentation metrics: mIoU / mAcc, PQ, scene-level PQ and instance coverage.

Every function takes aligned integer label arrays of any shape plus an
optional ``ignore`` mask; ignored pixels are dropped before anything is
counted. Undefined results (nothing to average over) come back as NaN with
``defined`` set to False.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MATCH_IOU = 0.5


def _flat(*arrays: np.ndarray, ignore: np.ndarray | None = None) -> list[np.ndarray]:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"label maps are not aligned: shapes {sorted(shapes)}")
    keep = None if ignore is None else ~np.asarray(ignore, bool).ravel()
    out = []
    for a in arrays:
        f = np.asarray(a).ravel().astype(np.int64)
        if np.any(f < 0):
            raise ValueError("label ids must be non-negative")
        out.append(f if keep is None else f[keep])
    return out


@dataclass
class SemanticScores:
    miou: float
    macc: float
    iou: dict[int, float] = field(default_factory=dict)
    acc: dict[int, float] = field(default_factory=dict)
    defined: bool = True


def miou_macc(
    pred: np.ndarray,
    gt: np.ndarray,
    classes: list[int] | None = None,
    ignore: np.ndarray | None = None,
) -> SemanticScores:
    """Per-class IoU and recall.

    A class enters mIoU when it occurs in the prediction or the ground truth,
    and enters mAcc when it occurs in the ground truth (recall is undefined
    otherwise). ``classes`` restricts the evaluated set.
    """
    p, g = _flat(pred, gt, ignore=ignore)
    if p.size == 0:
        return SemanticScores(float("nan"), float("nan"), defined=False)
    k = int(max(p.max(), g.max())) + 1
    conf = np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    tp = np.diag(conf)
    gt_n = conf.sum(axis=1)
    pr_n = conf.sum(axis=0)
    cand = range(k) if classes is None else [c for c in classes if 0 <= c < k]
    iou, acc = {}, {}
    for c in cand:
        if gt_n[c] + pr_n[c] == 0:
            continue
        iou[c] = tp[c] / (gt_n[c] + pr_n[c] - tp[c])
        if gt_n[c] > 0:
            acc[c] = tp[c] / gt_n[c]
    if not iou:
        return SemanticScores(float("nan"), float("nan"), defined=False)
    macc = float(np.mean(list(acc.values()))) if acc else float("nan")
    return SemanticScores(float(np.mean(list(iou.values()))), macc, iou, acc)


@dataclass
class PanopticScores:
    pq: float
    sq: float
    rq: float
    per_class: dict[int, tuple[float, float, float]] = field(default_factory=dict)
    tp: int = 0
    fp: int = 0
    fn: int = 0
    defined: bool = True


def panoptic_quality(
    pred_class: np.ndarray,
    pred_instance: np.ndarray,
    gt_class: np.ndarray,
    gt_instance: np.ndarray,
    ignore: np.ndarray | None = None,
    classes: list[int] | None = None,
) -> PanopticScores:
    """PQ with segments keyed by ``(class, instance id)``; matches need IoU > 0.5 within a class.

    Stuff regions carry instance id 0 and therefore form one segment per class.
    """
    pc, pi, gc, gi = _flat(pred_class, pred_instance, gt_class, gt_instance, ignore=ignore)
    if pc.size == 0:
        return PanopticScores(float("nan"), float("nan"), float("nan"), defined=False)
    pkeys, pseg = np.unique(np.stack([pc, pi], 1), axis=0, return_inverse=True)
    gkeys, gseg = np.unique(np.stack([gc, gi], 1), axis=0, return_inverse=True)
    pseg, gseg = pseg.ravel(), gseg.ravel()
    parea = np.bincount(pseg, minlength=len(pkeys))
    garea = np.bincount(gseg, minlength=len(gkeys))
    pairs, inter = np.unique(np.stack([gseg, pseg], 1), axis=0, return_counts=True)

    all_classes = set(pkeys[:, 0].tolist()) | set(gkeys[:, 0].tolist())
    if classes is not None:
        all_classes &= set(classes)
    tp_iou: dict[int, float] = {c: 0.0 for c in all_classes}
    tp_n = {c: 0 for c in all_classes}
    matched_p = np.zeros(len(pkeys), bool)
    matched_g = np.zeros(len(gkeys), bool)
    for (gs, ps), n in zip(pairs, inter):
        c = int(gkeys[gs, 0])
        if c != pkeys[ps, 0] or c not in all_classes:
            continue
        iou = n / (garea[gs] + parea[ps] - n)
        if iou > MATCH_IOU:
            tp_iou[c] += iou
            tp_n[c] += 1
            matched_p[ps] = matched_g[gs] = True
    per_class = {}
    tot_tp = tot_fp = tot_fn = 0
    for c in sorted(all_classes):
        fp = int(np.sum((pkeys[:, 0] == c) & ~matched_p))
        fn = int(np.sum((gkeys[:, 0] == c) & ~matched_g))
        tp = tp_n[c]
        tot_tp, tot_fp, tot_fn = tot_tp + tp, tot_fp + fp, tot_fn + fn
        denom = tp + 0.5 * fp + 0.5 * fn
        pq = tp_iou[c] / denom if denom > 0 else 0.0
        sq = tp_iou[c] / tp if tp else 0.0
        rq = tp / denom if denom > 0 else 0.0
        per_class[c] = (pq, sq, rq)
    if not per_class:
        return PanopticScores(float("nan"), float("nan"), float("nan"), defined=False)
    vals = np.array(list(per_class.values()))
    return PanopticScores(
        float(vals[:, 0].mean()), float(vals[:, 1].mean()), float(vals[:, 2].mean()), per_class, tot_tp, tot_fp, tot_fn
    )


def pq_scene(
    frames: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]],
    ignore: list[np.ndarray] | None = None,
    classes: list[int] | None = None,
) -> PanopticScores:
    """PQ over the union of all frames, where a ``(class, id)`` pair is one segment scene-wide.

    Each frame is ``(pred_class, pred_instance, gt_class, gt_instance)``.
    """
    if not frames:
        raise ValueError("pq_scene needs at least one frame")
    cols = [[], [], [], []]
    for i, fr in enumerate(frames):
        ig = None if ignore is None else ignore[i]
        for col, arr in zip(cols, _flat(*fr, ignore=ig)):
            col.append(arr)
    return panoptic_quality(*(np.concatenate(c) for c in cols), classes=classes)


@dataclass
class CoverageScores:
    mcov: float
    mwcov: float
    best_iou: dict[int, float] = field(default_factory=dict)
    defined: bool = True


def coverage(pred_instance: np.ndarray, gt_instance: np.ndarray, ignore: np.ndarray | None = None) -> CoverageScores:
    """Best-IoU coverage of each ground-truth instance (ids > 0) by predicted instances (ids > 0)."""
    p, g = _flat(pred_instance, gt_instance, ignore=ignore)
    gids = np.unique(g[g > 0])
    if gids.size == 0:
        return CoverageScores(float("nan"), float("nan"), defined=False)
    pairs, inter = np.unique(np.stack([g, p], 1), axis=0, return_counts=True)
    garea = {int(k): int(v) for k, v in zip(*np.unique(g, return_counts=True))}
    parea = {int(k): int(v) for k, v in zip(*np.unique(p, return_counts=True))}
    best = {int(k): 0.0 for k in gids}
    for (gi, pi), n in zip(pairs, inter):
        if gi == 0 or pi == 0:
            continue
        iou = n / (garea[int(gi)] + parea[int(pi)] - n)
        if iou > best[int(gi)]:
            best[int(gi)] = float(iou)
    ious = np.array([best[int(k)] for k in gids])
    w = np.array([garea[int(k)] for k in gids], float)
    return CoverageScores(float(ious.mean()), float(np.sum(ious * w) / w.sum()), best)


def scene_report(
    semantic_raw: np.ndarray,
    semantic: np.ndarray,
    instance: np.ndarray,
    pan_class: np.ndarray,
    pan_instance: np.ndarray,
    gt_class: np.ndarray,
    gt_instance: np.ndarray,
    class_names: list[str] | None = None,
    ignore: np.ndarray | None = None,
) -> list[tuple[str, str, float]]:
    """Metric rows ``(metric, class, value)`` over stacked ``(F, H, W)`` maps.

    Instance coverage and PQ^scene treat all frames as one scene; ``pq`` is
    the mean of per-frame PQ.
    """
    n = len(gt_class)
    ig = [None] * n if ignore is None else list(ignore)
    raw = miou_macc(semantic_raw, gt_class, ignore=ignore)
    den = miou_macc(semantic, gt_class, ignore=ignore)
    frame_pq = [
        panoptic_quality(pan_class[i], pan_instance[i], gt_class[i], gt_instance[i], ignore=ig[i]).pq for i in range(n)
    ]
    scene = pq_scene(
        [(pan_class[i], pan_instance[i], gt_class[i], gt_instance[i]) for i in range(n)],
        ignore=None if ignore is None else ig,
    )
    cov = coverage(instance, gt_instance, ignore=ignore)
    rows = [
        ("miou_raw", "all", raw.miou),
        ("macc_raw", "all", raw.macc),
        ("miou", "all", den.miou),
        ("macc", "all", den.macc),
        ("pq", "all", float(np.nanmean(frame_pq))),
        ("pq_scene", "all", scene.pq),
        ("sq_scene", "all", scene.sq),
        ("rq_scene", "all", scene.rq),
        ("mcov", "all", cov.mcov),
        ("mwcov", "all", cov.mwcov),
    ]

    def name(c: int) -> str:
        return class_names[c] if class_names and c < len(class_names) else str(c)

    rows += [("iou", name(c), v) for c, v in sorted(den.iou.items())]
    rows += [("pq_scene", name(c), v[0]) for c, v in sorted(scene.per_class.items())]
    return rows
