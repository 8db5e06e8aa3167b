"""Slow, obviously-correct reference implementations used as test oracles."""

from fractions import Fraction


def eer_bruteforce(scores, labels):
    """Loop over every candidate threshold with exact rational rates."""
    u = sorted(set(float(s) for s in scores))
    cands = [float("-inf")] + [(a + b) / 2.0 for a, b in zip(u, u[1:])] + [float("inf")]
    n_neg = sum(1 for y in labels if y == 0)
    n_pos = len(labels) - n_neg
    best = None
    for t in cands:
        fp = sum(1 for s, y in zip(scores, labels) if y == 0 and s >= t)
        fn = sum(1 for s, y in zip(scores, labels) if y == 1 and s < t)
        gap = abs(Fraction(fp, n_neg) - Fraction(fn, n_pos))
        if best is None or gap < best[0] or (gap == best[0] and t < best[1]):
            best = (gap, t)
    return best[1]


def fpr_count(pairs):
    """FPR of (prediction, label) pairs as a Fraction, None without negatives."""
    neg = [p for p, y in pairs if y == 0]
    return Fraction(sum(neg), len(neg)) if neg else None


def fprd_count(preds, labels, attr):
    g1 = fpr_count([(p, y) for p, y, a in zip(preds, labels, attr) if a == 1])
    g0 = fpr_count([(p, y) for p, y, a in zip(preds, labels, attr) if a == 0])
    return None if g1 is None or g0 is None else g1 - g0


def template_fprd_count(preds, labels, groups):
    overall = fpr_count(list(zip(preds, labels)))
    total = Fraction(0)
    for z in sorted(set(groups)):
        r = fpr_count([(p, y) for p, y, g in zip(preds, labels, groups) if g == z])
        if r is not None:
            total += abs(r - overall)
    return total
