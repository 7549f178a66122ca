"""Panoptic quality (PQ, SQ, RQ, PQ-dagger) with thing/stuff splits, and mIoU.

A thing segment is the set of points sharing (class, instance id) with a
nonzero instance; thing points with instance 0 belong to no segment. Each
stuff class present in a frame forms one segment. A predicted and a ground
truth segment of the same class match when their IoU exceeds 0.5, which
can hold for at most one counterpart, so matching needs no tie breaking.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from panograph.errors import DataError
from panograph.scene_io import ClassTable

Segments = dict[int, dict[int, np.ndarray]]


def segment_frame(semantic, instance, class_table: ClassTable, min_stuff_points: int = 0, keep=None) -> Segments:
    """Per class, segment key -> sorted point indices. Stuff segments use key 0."""
    sem = np.asarray(semantic, dtype=np.int64)
    inst = np.asarray(instance, dtype=np.int64)
    if sem.shape != inst.shape:
        raise DataError("semantic and instance arrays differ in length")
    idx = np.arange(len(sem)) if keep is None else np.flatnonzero(keep)
    things = set(class_table.thing_ids)
    out: Segments = {}
    for c in np.unique(sem[idx]).tolist():
        pts = idx[sem[idx] == c]
        if c in things:
            ids = inst[pts]
            pts, ids = pts[ids > 0], ids[ids > 0]
            if len(pts) == 0:
                continue
            order = np.argsort(ids, kind="stable")
            keys, starts = np.unique(ids[order], return_index=True)
            out[c] = dict(zip(keys.tolist(), np.split(pts[order], starts[1:])))
        elif len(pts) >= max(min_stuff_points, 1):
            out[c] = {0: pts}
    return out


@dataclass
class ClassMatch:
    tp: list[tuple[int, int, float]] = field(default_factory=list)
    fp: list[int] = field(default_factory=list)
    fn: list[int] = field(default_factory=list)


def match_segments(pred: Segments, gt: Segments) -> dict[int, ClassMatch]:
    """Per-class true positive pairs ``(pred_key, gt_key, iou)``, unmatched predictions and unmatched ground truth."""
    result = {}
    for c in sorted(set(pred) | set(gt)):
        p, g = pred.get(c, {}), gt.get(c, {})
        m = ClassMatch()
        p_keys, g_keys = sorted(p), sorted(g)
        matched_p, matched_g = set(), set()
        if p_keys and g_keys:
            # label every point by its gt segment position, then count overlaps per pred segment
            top = max(int(max(a.max() for a in g.values() if len(a))), int(max(a.max() for a in p.values() if len(a)))) + 1
            owner = np.full(top, -1, dtype=np.int64)
            for gi, k in enumerate(g_keys):
                owner[g[k]] = gi
            for pk in p_keys:
                pts = p[pk]
                hits = owner[pts]
                hits = hits[hits >= 0]
                if len(hits) == 0:
                    continue
                counts = np.bincount(hits, minlength=len(g_keys))
                for gi in np.flatnonzero(counts):
                    inter = int(counts[gi])
                    union = len(pts) + len(g[g_keys[gi]]) - inter
                    iou = inter / union
                    if iou > 0.5:
                        m.tp.append((pk, g_keys[gi], iou))
                        matched_p.add(pk)
                        matched_g.add(g_keys[gi])
        m.fp = [k for k in p_keys if k not in matched_p]
        m.fn = [k for k in g_keys if k not in matched_g]
        result[c] = m
    return result


@dataclass
class ClassScore:
    pq: float | None
    sq: float | None
    rq: float | None
    iou: float | None
    tp: int
    fp: int
    fn: int
    is_thing: bool


@dataclass
class PQReport:
    """Per-class scores and aggregates in [0, 1]; ``None`` marks an undefined value."""

    per_class: dict[int, ClassScore]
    pq: float | None
    pq_dagger: float | None
    sq: float | None
    rq: float | None
    pq_th: float | None
    sq_th: float | None
    rq_th: float | None
    pq_st: float | None
    sq_st: float | None
    rq_st: float | None
    miou: float | None
    class_names: dict[int, str] = field(default_factory=dict)

    AGGREGATES = ("pq", "pq_dagger", "sq", "rq", "pq_th", "sq_th", "rq_th", "pq_st", "sq_st", "rq_st", "miou")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.AGGREGATES}
        d["per_class"] = {str(c): {"name": self.class_names.get(c, str(c)), **asdict(s)} for c, s in sorted(self.per_class.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        cols = [("PQ", "pq"), ("PQ†", "pq_dagger"), ("RQ", "rq"), ("SQ", "sq"), ("PQTh", "pq_th"), ("RQTh", "rq_th"), ("SQTh", "sq_th"), ("PQSt", "pq_st"), ("RQSt", "rq_st"), ("SQSt", "sq_st"), ("mIoU", "miou")]
        return format_table([h for h, _ in cols], [[pct(getattr(self, k)) for _, k in cols]])

    def class_table_text(self) -> str:
        rows = []
        for c, s in sorted(self.per_class.items()):
            rows.append([self.class_names.get(c, str(c)), "thing" if s.is_thing else "stuff", pct(s.pq), pct(s.rq), pct(s.sq), pct(s.iou), str(s.tp), str(s.fp), str(s.fn)])
        return format_table(["class", "kind", "PQ", "RQ", "SQ", "IoU", "TP", "FP", "FN"], rows)


def pct(v: float | None) -> str:
    return "undef" if v is None else f"{100.0 * v:.1f}"


def format_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    line = lambda r: "  ".join(cell.rjust(w) for cell, w in zip(r, widths))  # noqa: E731
    return "\n".join([line(header), "  ".join("-" * w for w in widths), *map(line, rows)]) + "\n"


class PanopticEvaluator:
    """Accumulates matches and a semantic confusion matrix over frames.

    Only sums and counts are stored, so the report does not depend on the
    order in which frames are added.
    """

    def __init__(self, class_table: ClassTable, ignore_ids=(), min_stuff_points: int = 0):
        self.class_table = class_table
        self.ignore_ids = frozenset(int(i) for i in ignore_ids)
        self.min_stuff_points = min_stuff_points
        self.tp: dict[int, int] = {}
        self.fp: dict[int, int] = {}
        self.fn: dict[int, int] = {}
        self.iou_sum: dict[int, float] = {}
        # (gt class, pred class) -> point count
        self.confusion: dict[tuple[int, int], int] = {}
        self.n_frames = 0

    def add_frame(self, pred_semantic, pred_instance, gt_semantic, gt_instance) -> dict[int, ClassMatch]:
        gs = np.asarray(gt_semantic, dtype=np.int64)
        ps = np.asarray(pred_semantic, dtype=np.int64)
        if gs.shape != ps.shape:
            raise DataError("prediction and ground truth differ in length")
        keep = ~np.isin(gs, list(self.ignore_ids)) if self.ignore_ids else None
        pred = segment_frame(ps, pred_instance, self.class_table, self.min_stuff_points, keep)
        gt = segment_frame(gs, gt_instance, self.class_table, self.min_stuff_points, keep)
        matches = match_segments(pred, gt)
        for c, m in matches.items():
            self.tp[c] = self.tp.get(c, 0) + len(m.tp)
            self.fp[c] = self.fp.get(c, 0) + len(m.fp)
            self.fn[c] = self.fn.get(c, 0) + len(m.fn)
            self.iou_sum[c] = self.iou_sum.get(c, 0.0) + sum(iou for _, _, iou in m.tp)
        sel = slice(None) if keep is None else keep
        pairs, counts = np.unique(np.stack([gs[sel], ps[sel]], axis=1), axis=0, return_counts=True)
        for (g, p), n in zip(pairs.tolist(), counts.tolist()):
            self.confusion[(g, p)] = self.confusion.get((g, p), 0) + n
        self.n_frames += 1
        return matches

    def semantic_iou(self) -> dict[int, float]:
        return iou_from_confusion(self.confusion, self.ignore_ids)

    def report(self) -> PQReport:
        return build_report(self.tp, self.fp, self.fn, self.iou_sum, self.semantic_iou(), self.class_table)


def iou_from_confusion(confusion: dict[tuple[int, int], int], ignore_ids=frozenset()) -> dict[int, float]:
    """Per-class IoU for every class seen in prediction or ground truth."""
    inter: dict[int, int] = {}
    gt_tot: dict[int, int] = {}
    pred_tot: dict[int, int] = {}
    for (g, p), n in confusion.items():
        gt_tot[g] = gt_tot.get(g, 0) + n
        pred_tot[p] = pred_tot.get(p, 0) + n
        if g == p:
            inter[g] = inter.get(g, 0) + n
    out = {}
    for c in sorted(set(gt_tot) | set(pred_tot)):
        if c in ignore_ids:
            continue
        i = inter.get(c, 0)
        out[c] = i / (gt_tot.get(c, 0) + pred_tot.get(c, 0) - i)
    return out


def compute_miou(pred_semantic, gt_semantic, ignore_ids=()) -> tuple[dict[int, float], float | None]:
    """Per-class IoU and their mean; classes absent from both arrays are left out."""
    p = np.asarray(pred_semantic, dtype=np.int64)
    g = np.asarray(gt_semantic, dtype=np.int64)
    if p.shape != g.shape:
        raise DataError("prediction and ground truth differ in length")
    keep = ~np.isin(g, list(ignore_ids))
    pairs, counts = np.unique(np.stack([g[keep], p[keep]], axis=1), axis=0, return_counts=True)
    per_class = iou_from_confusion({(a, b): n for (a, b), n in zip(pairs.tolist(), counts.tolist())}, frozenset(ignore_ids))
    return per_class, (float(np.mean(list(per_class.values()))) if per_class else None)


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def build_report(tp, fp, fn, iou_sum, sem_iou, class_table: ClassTable) -> PQReport:
    things = set(class_table.thing_ids)
    per_class = {}
    for c in sorted(set(tp) | set(fp) | set(fn) | set(sem_iou)):
        t, f_p, f_n = tp.get(c, 0), fp.get(c, 0), fn.get(c, 0)
        denom = t + 0.5 * f_p + 0.5 * f_n
        if denom == 0:
            pq = sq = rq = None
        else:
            s = iou_sum.get(c, 0.0)
            sq = s / t if t else 0.0
            rq = t / denom
            pq = s / denom
        per_class[c] = ClassScore(pq, sq, rq, sem_iou.get(c), t, f_p, f_n, c in things)
    # a class enters the PQ averages when it has ground-truth segments
    scored = {c: s for c, s in per_class.items() if s.tp + s.fn > 0}
    th = [s for c, s in scored.items() if s.is_thing]
    st = [s for c, s in scored.items() if not s.is_thing]
    all_s = list(scored.values())
    dagger = [s.pq if s.is_thing else s.iou for s in all_s]
    return PQReport(
        per_class=per_class,
        pq=_mean(s.pq for s in all_s),
        pq_dagger=_mean(dagger),
        sq=_mean(s.sq for s in all_s),
        rq=_mean(s.rq for s in all_s),
        pq_th=_mean(s.pq for s in th),
        sq_th=_mean(s.sq for s in th),
        rq_th=_mean(s.rq for s in th),
        pq_st=_mean(s.pq for s in st),
        sq_st=_mean(s.sq for s in st),
        rq_st=_mean(s.rq for s in st),
        miou=_mean(sem_iou.values()),
        class_names=dict(class_table.names),
    )


def compute_pq(frames, class_table: ClassTable, ignore_ids=(), min_stuff_points: int = 0) -> PQReport:
    """Evaluate ``(pred_sem, pred_inst, gt_sem, gt_inst)`` tuples."""
    ev = PanopticEvaluator(class_table, ignore_ids, min_stuff_points)
    for f in frames:
        ev.add_frame(*f)
    return ev.report()
