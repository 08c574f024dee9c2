"""Detection-head semantics: box geometry, target encoding, raw-output
decoding, the sum-squared training loss, and optional NMS.

Raw output layout, per grid cell in row-major order: N class scores,
then B tuples of (confidence, cx, cy, bw, bh). cx/cy are the box center
relative to the cell's upper-left corner in cell units; bw/bh are the
box size relative to the image. Raw values are clamped to [0,1] before
any use; there is no squashing activation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SQRT_EPS = 1e-6  # floor under the square roots in the size loss


@dataclass
class Box:
    """Axis-aligned rectangle in pixels, top-left origin. confidence is
    None for ground truth."""

    x: float
    y: float
    w: float
    h: float
    class_id: int
    confidence: float | None = None

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def to_dict(self) -> dict:
        d = {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "cls": self.class_id}
        if self.confidence is not None:
            d["conf"] = self.confidence
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(
            float(d["x"]), float(d["y"]), float(d["w"]), float(d["h"]),
            int(d["cls"]), float(d["conf"]) if "conf" in d else None,
        )


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; symmetric, in [0,1]."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


@dataclass
class CellTargets:
    """Per-cell training targets for one image."""

    obj: np.ndarray  # [S,S] bool, cell has an assigned object
    cls: np.ndarray  # [S,S,N] one-hot class
    box: np.ndarray  # [S,S,4] (cx cell-relative, cy, bw image-relative, bh)


def encode_targets(gt_boxes, config) -> CellTargets:
    """Assign each ground-truth box to the cell containing its center.

    At most one box per cell: the larger-area box wins, first occurrence
    wins ties. Box centers outside the image are rejected.
    """
    s, n, res = config.S, config.N, config.input_res
    obj = np.zeros((s, s), dtype=bool)
    cls = np.zeros((s, s, n), dtype=np.float64)
    box = np.zeros((s, s, 4), dtype=np.float64)
    area = np.zeros((s, s), dtype=np.float64)
    for b in gt_boxes:
        if b.w <= 0 or b.h <= 0:
            raise ValueError(f"encode: degenerate box {b.w}x{b.h}")
        if not (0 <= b.class_id < n):
            raise ValueError(f"encode: class {b.class_id} outside [0,{n})")
        cx, cy = b.center
        if not (0 <= cx <= res and 0 <= cy <= res):
            raise ValueError(f"encode: box center ({cx},{cy}) outside {res}x{res} image")
        col = min(int(cx * s / res), s - 1)
        row = min(int(cy * s / res), s - 1)
        if obj[row, col] and area[row, col] >= b.area:
            continue  # keep the earlier, larger box
        obj[row, col] = True
        area[row, col] = b.area
        cls[row, col] = 0.0
        cls[row, col, b.class_id] = 1.0
        box[row, col] = (
            cx * s / res - col,
            cy * s / res - row,
            min(b.w / res, 1.0),
            min(b.h / res, 1.0),
        )
    return CellTargets(obj, cls, box)


def decode(raw: np.ndarray, config, conf_threshold: float):
    """Raw head output -> list of Box with confidence > conf_threshold.

    Box values are clamped to [0,1] before use, the class is the argmax
    of the cell's raw class scores, and the resulting rectangle is
    clamped to the image (empty rectangles are discarded).
    """
    s, b_per, n, res = config.S, config.B, config.N, config.input_res
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"decode: threshold {conf_threshold} outside [0,1]")
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if raw.shape[0] != config.output_length:
        raise ValueError(
            f"decode: raw length {raw.shape[0]} does not match {config.output_length}"
        )
    v = np.clip(raw.reshape(s, s, n + 5 * b_per), 0.0, 1.0)
    cls_scores = v[:, :, :n]
    tuples = v[:, :, n:].reshape(s, s, b_per, 5)
    cell = res / s
    out = []
    rows, cols, bis = np.nonzero(tuples[:, :, :, 0] > conf_threshold)
    for r, c, bi in zip(rows.tolist(), cols.tolist(), bis.tolist()):
        conf, cx, cy, bw, bh = tuples[r, c, bi]
        center_x = (c + cx) * cell
        center_y = (r + cy) * cell
        w, h = bw * res, bh * res
        x0 = max(0.0, center_x - w / 2.0)
        y0 = max(0.0, center_y - h / 2.0)
        x1 = min(float(res), center_x + w / 2.0)
        y1 = min(float(res), center_y + h / 2.0)
        if x1 <= x0 or y1 <= y0:
            continue
        out.append(
            Box(x0, y0, x1 - x0, y1 - y0, int(np.argmax(cls_scores[r, c])), float(conf))
        )
    return out


def targets_to_raw(targets: CellTargets, config) -> np.ndarray:
    """Write targets back into the raw output layout with confidence 1 on
    the first predictor (inverse of encode followed by decode)."""
    s, b_per, n = config.S, config.B, config.N
    v = np.zeros((s, s, n + 5 * b_per), dtype=np.float64)
    v[:, :, :n] = targets.cls
    v[:, :, n] = targets.obj.astype(np.float64)  # conf of predictor 0
    v[:, :, n + 1 : n + 5] = targets.box
    return v.reshape(-1)


def stack_targets(target_list) -> tuple:
    """Stack per-image CellTargets into batched arrays."""
    obj = np.stack([t.obj for t in target_list])
    cls = np.stack([t.cls for t in target_list])
    box = np.stack([t.box for t in target_list])
    return obj, cls, box


def yolo_loss(raw, targets: CellTargets, lambda_coord=5.0, lambda_noobj=0.5) -> float:
    """Sum-squared detection loss for a single image (summed over cells)."""
    loss, _ = yolo_loss_batch(
        np.asarray(raw, dtype=np.float64)[None],
        *stack_targets([targets]),
        config_dims=None,
        lambda_coord=lambda_coord,
        lambda_noobj=lambda_noobj,
        want_grad=False,
    )
    return float(loss)


def yolo_loss_batch(
    raw, obj, cls_t, box_t, config_dims=None, lambda_coord=5.0, lambda_noobj=0.5,
    want_grad=True,
):
    """Loss (mean over the batch of per-image sums) and its gradient
    w.r.t. the raw output.

    For every object cell the predictor with the highest IoU against the
    ground truth is responsible; its coordinates are pulled toward the
    target (square roots on sizes) and its confidence toward that IoU.
    All other predictors, and every predictor of empty cells, have their
    confidence pushed to zero with weight lambda_noobj. Class scores are
    regressed per object cell. The IoU inside the confidence term is a
    function of the prediction, and its gradient is propagated.
    """
    if lambda_coord < 0 or lambda_noobj < 0:
        raise ValueError(f"loss: negative lambdas ({lambda_coord}, {lambda_noobj})")
    bt, s = obj.shape[0], obj.shape[1]
    n = cls_t.shape[-1]
    c_per = raw.shape[-1] // (s * s)
    b_per = (c_per - n) // 5
    if s * s * (n + 5 * b_per) != raw.shape[-1]:
        raise ValueError(f"loss: raw length {raw.shape[-1]} does not match targets")
    v = raw.reshape(bt, s, s, c_per)
    clamped = np.clip(v, 0.0, 1.0)
    inside = (v > 0.0) & (v < 1.0)

    cls_p = clamped[..., :n]
    tup = clamped[..., n:].reshape(bt, s, s, b_per, 5)
    conf, cx, cy, bw, bh = (tup[..., i] for i in range(5))

    col = np.arange(s, dtype=np.float64)[None, None, :, None]
    row = np.arange(s, dtype=np.float64)[None, :, None, None]

    px0 = (col + cx) / s - bw / 2.0
    px1 = (col + cx) / s + bw / 2.0
    py0 = (row + cy) / s - bh / 2.0
    py1 = (row + cy) / s + bh / 2.0

    tcx, tcy, tbw, tbh = (box_t[..., i : i + 1] for i in range(4))
    gx0 = (col + tcx) / s - tbw / 2.0
    gx1 = (col + tcx) / s + tbw / 2.0
    gy0 = (row + tcy) / s - tbh / 2.0
    gy1 = (row + tcy) / s + tbh / 2.0

    ix0, ix1 = np.maximum(px0, gx0), np.minimum(px1, gx1)
    iy0, iy1 = np.maximum(py0, gy0), np.minimum(py1, gy1)
    iw, ih = ix1 - ix0, iy1 - iy0
    has_inter = (iw > 0) & (ih > 0)
    iwc, ihc = np.maximum(iw, 0.0), np.maximum(ih, 0.0)
    inter = iwc * ihc
    union = bw * bh + tbw * tbh - inter
    iou_all = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)

    resp_idx = np.argmax(iou_all, axis=-1)
    resp = np.zeros(conf.shape, dtype=bool)
    np.put_along_axis(resp, resp_idx[..., None], True, axis=-1)
    resp &= obj[..., None]
    noobj = ~resp

    sw = np.sqrt(np.maximum(bw, SQRT_EPS))
    sh = np.sqrt(np.maximum(bh, SQRT_EPS))
    tsw, tsh = np.sqrt(tbw), np.sqrt(tbh)
    dcx, dcy = cx - tcx, cy - tcy
    dsw, dsh = sw - tsw, sh - tsh
    dconf = conf - iou_all
    dcls = cls_p - cls_t

    per_image = (
        lambda_coord * ((dcx**2 + dcy**2 + dsw**2 + dsh**2) * resp).sum(axis=(1, 2, 3))
        + (dconf**2 * resp).sum(axis=(1, 2, 3))
        + lambda_noobj * ((conf**2) * noobj).sum(axis=(1, 2, 3))
        + ((dcls**2) * obj[..., None]).sum(axis=(1, 2, 3))
    )
    loss = per_image.sum() / bt
    if not want_grad:
        return loss, None

    # IoU partials w.r.t. the predicted corner coordinates
    d_px0 = np.where(has_inter & (px0 > gx0), -ihc, 0.0)
    d_px1 = np.where(has_inter & (px1 < gx1), ihc, 0.0)
    d_py0 = np.where(has_inter & (py0 > gy0), -iwc, 0.0)
    d_py1 = np.where(has_inter & (py1 < gy1), iwc, 0.0)
    di_cx = (d_px0 + d_px1) / s
    di_bw = (d_px1 - d_px0) / 2.0
    di_cy = (d_py0 + d_py1) / s
    di_bh = (d_py1 - d_py0) / 2.0
    u2 = np.maximum(union, 1e-12) ** 2
    ok = union > 0

    def diou(dinter_q, darea_q):
        return np.where(ok, (dinter_q * (union + inter) - inter * darea_q) / u2, 0.0)

    gio = -2.0 * dconf * resp  # coefficient on dIoU/dq from the confidence term
    g_conf = 2.0 * dconf * resp + 2.0 * lambda_noobj * conf * noobj
    g_cx = 2.0 * lambda_coord * dcx * resp + gio * diou(di_cx, 0.0)
    g_cy = 2.0 * lambda_coord * dcy * resp + gio * diou(di_cy, 0.0)
    g_bw = (
        2.0 * lambda_coord * dsw * resp * np.where(bw > SQRT_EPS, 0.5 / sw, 0.0)
        + gio * diou(di_bw, bh)
    )
    g_bh = (
        2.0 * lambda_coord * dsh * resp * np.where(bh > SQRT_EPS, 0.5 / sh, 0.0)
        + gio * diou(di_bh, bw)
    )
    g_cls = 2.0 * dcls * obj[..., None]

    grad = np.zeros_like(v)
    grad[..., :n] = g_cls
    grad[..., n:] = np.stack([g_conf, g_cx, g_cy, g_bw, g_bh], axis=-1).reshape(
        bt, s, s, 5 * b_per
    )
    grad = (grad * inside / bt).reshape(raw.shape)
    return loss, grad


def nms(boxes, iou_threshold: float):
    """Greedy per-class suppression by descending confidence. Off by
    default in the pipeline; provided as an optional post-filter."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"nms: threshold {iou_threshold} outside [0,1]")
    order = sorted(range(len(boxes)), key=lambda i: -(boxes[i].confidence or 0.0))
    keep = []
    for i in order:
        if any(
            boxes[j].class_id == boxes[i].class_id and iou(boxes[i], boxes[j]) > iou_threshold
            for j in keep
        ):
            continue
        keep.append(i)
    return [boxes[i] for i in sorted(keep)]
