"""Reference computations that share no code with the package."""

import math

import numpy as np
import torch


def central_difference(f, x: torch.Tensor, eps: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, one coordinate at a time."""
    base = x.detach().clone()
    grad = np.zeros(base.shape)
    for idx in np.ndindex(*base.shape):
        plus, minus = base.clone(), base.clone()
        plus[idx] += eps
        minus[idx] -= eps
        grad[idx] = (float(f(plus)) - float(f(minus))) / (2 * eps)
    return grad


def relative_error(analytic, numeric) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def pixel_counts(pred, target, k):
    """Per-class TP, FP, FN by walking every pixel."""
    tp, fp, fn = [0] * k, [0] * k, [0] * k
    for p, t in zip(np.asarray(pred).ravel().tolist(), np.asarray(target).ravel().tolist()):
        if p == t:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[t] += 1
    return tp, fp, fn


def brute_force_scores(pred, target, k):
    tp, fp, fn = pixel_counts(pred, target, k)
    ious, precs, recs = [], [], []
    for c in range(k):
        if tp[c] + fp[c] + fn[c] > 0:
            ious.append(tp[c] / (tp[c] + fp[c] + fn[c]))
        if tp[c] + fp[c] > 0:
            precs.append(tp[c] / (tp[c] + fp[c]))
        if tp[c] + fn[c] > 0:
            recs.append(tp[c] / (tp[c] + fn[c]))
    miou = sum(ious) / len(ious)
    p = sum(precs) / len(precs)
    r = sum(recs) / len(recs)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return miou, p, r, f1


def brute_force_med(pred_joints, target_joints, vis):
    total, count = 0.0, 0
    for (px, py), (tx, ty), v in zip(pred_joints, target_joints, vis):
        if v:
            total += math.sqrt((px - tx) ** 2 + (py - ty) ** 2)
            count += 1
    return total / count


def softmax_nll(logits, target):
    m = max(logits)
    z = sum(math.exp(l - m) for l in logits)
    return -(logits[target] - m - math.log(z))
