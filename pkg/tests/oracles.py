"""Brute-force reference implementations used as test oracles.

Everything here is deliberately naive (explicit loops, float64) and stays
independent of the code paths it checks.
"""

import numpy as np


def conv2d_ref(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Sliding-window cross-correlation on a single [C,H,W] image."""
    c, h, w = x.shape
    f, cg, k, _ = weight.shape
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((f, ho, wo), dtype=np.float64)
    fpg = f // groups
    for fi in range(f):
        g = fi // fpg
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for ci in range(cg):
                    cin = g * cg + ci
                    for ky in range(k):
                        for kx in range(k):
                            acc += (
                                xp[cin, oy * stride + ky, ox * stride + kx]
                                * weight[fi, ci, ky, kx]
                            )
                out[fi, oy, ox] = acc
        if bias is not None:
            out[fi] += bias[fi]
    return out


def maxpool2d_ref(x, k):
    """Window-by-window max on a single [C,H,W] image."""
    c, h, w = x.shape
    ho, wo = h // k, w // k
    out = np.zeros((c, ho, wo), dtype=np.float64)
    for ci in range(c):
        for oy in range(ho):
            for ox in range(wo):
                out[ci, oy, ox] = x[ci, oy * k : (oy + 1) * k, ox * k : (ox + 1) * k].max()
    return out


def linear_ref(x, weight, bias):
    """Per-output dot products on a single vector."""
    m, n = weight.shape
    out = np.zeros(m, dtype=np.float64)
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc += weight[i, j] * x[j]
        out[i] = acc + bias[i]
    return out


def batchnorm_ref(x, gamma, beta, mean, var, eps):
    """Inference-mode normalization, elementwise."""
    out = np.zeros_like(x, dtype=np.float64)
    for ci in range(x.shape[0]):
        out[ci] = gamma[ci] * (x[ci] - mean[ci]) / np.sqrt(var[ci] + eps) + beta[ci]
    return out


def iou_pixel_ref(a, b, grid=1):
    """IoU by counting unit cells; exact for integer-coordinate boxes."""
    x0 = min(a[0], b[0])
    y0 = min(a[1], b[1])
    x1 = max(a[0] + a[2], b[0] + b[2])
    y1 = max(a[1] + a[3], b[1] + b[3])
    inter = union = 0
    for yy in range(int(y0 * grid), int(np.ceil(y1 * grid))):
        for xx in range(int(x0 * grid), int(np.ceil(x1 * grid))):
            cx, cy = (xx + 0.5) / grid, (yy + 0.5) / grid
            in_a = a[0] <= cx <= a[0] + a[2] and a[1] <= cy <= a[1] + a[3]
            in_b = b[0] <= cx <= b[0] + b[2] and b[1] <= cy <= b[1] + b[3]
            inter += in_a and in_b
            union += in_a or in_b
    return inter / union if union else 0.0


def greedy_match_ref(preds, gts, iou_fn, iou_threshold=0.5, same_class=True):
    """Scalar re-walk of the greedy matching protocol.

    preds: list of (box_xywh, class_id, conf); gts: list of (box_xywh, class_id).
    Returns per-prediction matched gt index (or None), in input order.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i][2])
    taken = set()
    matched = [None] * len(preds)
    for i in order:
        pbox, pcls, _ = preds[i]
        best, best_iou = None, 0.0
        for j, (gbox, gcls) in enumerate(gts):
            if j in taken:
                continue
            if same_class and gcls != pcls:
                continue
            v = iou_fn(pbox, gbox)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= iou_threshold:
            taken.add(best)
            matched[i] = best
    return matched


def average_precision_ref(scored_flags, num_gt, interpolation="all"):
    """AP from a list of (confidence, is_tp) pairs and the GT count.

    Walks the ranked list, accumulates precision/recall, then integrates
    the monotonized curve (or samples 11 recall points).
    """
    if num_gt == 0:
        return None
    ranked = sorted(scored_flags, key=lambda t: -t[0])
    tps = fps = 0
    precisions, recalls = [], []
    for _, is_tp in ranked:
        tps += bool(is_tp)
        fps += not is_tp
        precisions.append(tps / (tps + fps))
        recalls.append(tps / num_gt)
    if interpolation == "eleven":
        total = 0.0
        for r in np.linspace(0, 1, 11):
            ps = [p for p, rc in zip(precisions, recalls) if rc >= r]
            total += max(ps) if ps else 0.0
        return total / 11.0
    # all-point: area under the running-max-from-the-right envelope
    area = 0.0
    prev_r = 0.0
    for i, r in enumerate(recalls):
        env = max(precisions[i:]) if precisions[i:] else 0.0
        area += (r - prev_r) * env
        prev_r = r
    return area
