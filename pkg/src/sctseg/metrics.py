"""Frame accuracy, Jaccard index and midpoint hit for frame labelings.

Segments are ``(start, end, label)`` triples with 0-based inclusive frame
indices.
"""

import csv
import io

import numpy as np


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError(f"prediction length {pred.shape} does not match ground truth {gt.shape}")
    return pred, gt


def frames_to_segments(labels):
    """Maximal runs of equal labels."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change - 1, [len(labels) - 1]])
    return [(int(s), int(e), int(labels[s])) for s, e in zip(starts, ends)]


def segments_to_frames(segments):
    n = segments[-1][1] + 1 if segments else 0
    out = np.empty(n, dtype=np.int64)
    prev_end = -1
    for s, e, c in segments:
        if s != prev_end + 1 or e < s:
            raise ValueError(f"segments do not tile the sequence at ({s}, {e})")
        out[s:e + 1] = c
        prev_end = e
    return out


def mof(pred, gt):
    """Fraction of frames whose predicted label equals the ground truth."""
    pred, gt = _check_pair(pred, gt)
    return float(np.mean(pred == gt))


def corpus_mof(preds, gts):
    """MoF over all frames pooled across videos."""
    hits = total = 0
    for p, g in zip(preds, gts):
        p, g = _check_pair(p, g)
        hits += int(np.sum(p == g))
        total += len(g)
    return hits / total if total else 0.0


def jaccard(pred, gt):
    """IoU per class present in the ground truth, averaged over those classes."""
    pred, gt = _check_pair(pred, gt)
    scores = []
    for c in np.unique(gt):
        p, g = pred == c, gt == c
        scores.append(np.sum(p & g) / np.sum(p | g))
    return float(np.mean(scores))


def corpus_jaccard(preds, gts):
    return float(np.mean([jaccard(p, g) for p, g in zip(preds, gts)]))


def midpoint_hit(pred_segments, gt_segments, background=None):
    """Fraction of ground-truth segments hit by a same-class predicted midpoint.

    Each predicted segment can hit at most one ground-truth segment. Since
    ground-truth segments tile the sequence, a midpoint lies in exactly one of
    them, so the matching is one-to-one by construction. Segments labelled
    ``background`` are ignored on both sides.
    """
    gt = [s for s in gt_segments if s[2] != background]
    if not gt:
        return 0.0
    hit = [False] * len(gt)
    for s, e, c in pred_segments:
        if c == background:
            continue
        mid = (s + e) // 2
        for i, (gs, ge, gc) in enumerate(gt):
            if gc == c and gs <= mid <= ge and not hit[i]:
                hit[i] = True
                break
    return sum(hit) / len(gt)


def midpoint_hit_frames(pred, gt, background=None):
    pred, gt = _check_pair(pred, gt)
    return midpoint_hit(frames_to_segments(pred), frames_to_segments(gt), background)


def evaluate_predictions(preds, gts, ids=None, background=None):
    """Corpus metrics plus one row per video."""
    ids = list(ids) if ids is not None else [str(i) for i in range(len(preds))]
    rows = []
    hit_num = hit_den = 0
    for vid, p, g in zip(ids, preds, gts):
        gsegs = [s for s in frames_to_segments(g) if s[2] != background]
        mh = midpoint_hit_frames(p, g, background)
        hit_num += mh * len(gsegs)
        hit_den += len(gsegs)
        rows.append({"video": vid, "frames": len(g), "mof": mof(p, g),
                     "jaccard": jaccard(p, g), "midpoint_hit": mh})
    report = {
        "mof": corpus_mof(preds, gts),
        "jaccard": corpus_jaccard(preds, gts),
        "midpoint_hit": hit_num / hit_den if hit_den else 0.0,
        "videos": len(rows),
    }
    return report, rows


def report_csv(report, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["video", "frames", "mof", "jaccard", "midpoint_hit"])
    for r in sorted(rows, key=lambda r: r["video"]):
        w.writerow([r["video"], r["frames"], f"{r['mof']:.6f}", f"{r['jaccard']:.6f}", f"{r['midpoint_hit']:.6f}"])
    w.writerow(["ALL", sum(r["frames"] for r in rows), f"{report['mof']:.6f}",
                f"{report['jaccard']:.6f}", f"{report['midpoint_hit']:.6f}"])
    return buf.getvalue()


def report_text(report):
    return (f"videos: {report['videos']}\n"
            f"MoF: {100 * report['mof']:.2f}%\n"
            f"Jaccard: {100 * report['jaccard']:.2f}%\n"
            f"Midpoint hit: {100 * report['midpoint_hit']:.2f}%\n")
