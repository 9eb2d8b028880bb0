"""Brute-force reference for AP/mAP, written from the definitions with exact
rational arithmetic. Shares no code with the package under test."""

from fractions import Fraction


def pixel_set(mask):
    return {(r, c) for r, row in enumerate(mask) for c, v in enumerate(row) if v}


def iou(a, b):
    inter = len(a & b)
    union = len(a | b)
    return Fraction(inter, union) if union else Fraction(0)


def greedy(table, scores, tau):
    """TP flags in rank order: best score first, ties by input position.

    ``table[i][j]`` is the IoU of prediction i with ground truth j.
    """
    ranked = sorted(range(len(table)), key=lambda i: (-scores[i], i))
    free = list(range(len(table[0]) if table else 0))
    flags = []
    for i in ranked:
        best = None
        for j in free:
            v = table[i][j]
            if best is None or v > best[0]:
                best = (v, j)
        if best is not None and best[0] >= tau:
            free.remove(best[1])
            flags.append(True)
        else:
            flags.append(False)
    return flags


def pr_points(flags, n_gt):
    pts = [(Fraction(0), Fraction(1))]
    tp = fp = 0
    for f in flags:
        if f:
            tp += 1
        else:
            fp += 1
        pts.append((Fraction(tp, n_gt), Fraction(tp, tp + fp)))
    return pts


def ap_all_point(flags, n_gt):
    pts = pr_points(flags, n_gt)
    total = Fraction(0)
    for k in range(1, len(pts)):
        total += (pts[k][0] - pts[k - 1][0]) * max(pts[k][1], pts[k - 1][1])
    return total


def ap_coco101(flags, n_gt):
    pts = pr_points(flags, n_gt)[1:]
    total = Fraction(0)
    for i in range(101):
        level = Fraction(i, 100)
        reach = [p for r, p in pts if r >= level]
        total += max(reach) if reach else 0
    return total / 101


def mean_ap(pred_masks, scores, gt_masks, taus, mode="all_point"):
    gts = [pixel_set(m) for m in gt_masks]
    table = [[iou(pixel_set(m), g) for g in gts] for m in pred_masks]
    fn = ap_all_point if mode == "all_point" else ap_coco101
    vals = [fn(greedy(table, scores, Fraction(str(t))), len(gts)) for t in taus]
    return sum(vals) / len(vals)


def random_case(seed, max_side=32, max_n=10):
    """Ground-truth rectangles plus predictions that copy, shift, merge or
    invent them; scores come from a small set so ties happen."""
    import numpy as np

    rng = np.random.default_rng(seed)
    h, w = (int(v) for v in rng.integers(4, max_side + 1, 2))

    def rect():
        m = np.zeros((h, w), bool)
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        m[y0:y0 + rng.integers(1, h + 1), x0:x0 + rng.integers(1, w + 1)] = True
        return m

    gts = [rect() for _ in range(rng.integers(1, max_n + 1))]
    preds = []
    for _ in range(rng.integers(0, max_n + 1)):
        kind = rng.integers(0, 4)
        base = gts[rng.integers(0, len(gts))]
        if kind == 0:
            m = base.copy()
        elif kind == 1:
            m = np.roll(base, tuple(int(v) for v in rng.integers(-2, 3, 2)), axis=(0, 1))
        elif kind == 2:
            m = base | gts[rng.integers(0, len(gts))]
        else:
            m = rect()
        m = m ^ (rng.random((h, w)) < rng.choice([0.0, 0.02, 0.1]))
        preds.append(m)
    scores = [float(v) for v in rng.choice([0.2, 0.5, 0.5, 0.9, rng.random()], len(preds))]
    return preds, scores, gts
