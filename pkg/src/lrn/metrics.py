"""Confusion-matrix metrics, stage-wise evaluation and label rendering."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor_ops as T
from .errors import DataError, DimensionError
from .tensor_ops import IGNORE


def new_confusion(num_classes):
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm, pred, gt):
    """Add pixel counts of (gt, pred) pairs to ``cm``; gt-ignored pixels skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    c = cm.shape[0]
    keep = gt != IGNORE
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.max() >= c or p.max() >= c or p.min() < 0):
        raise DataError(f"label out of range for {c} classes")
    cm += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
    return cm


@dataclass
class EvalReport:
    iou: np.ndarray          # NaN for classes absent from both gt and prediction
    accuracy: np.ndarray     # NaN for classes absent from gt
    mean_iou: float
    class_avg_acc: float
    pixel_acc: float
    class_names: list
    stage_miou: list | None = None

    def to_text(self):
        lines = [f"{'class':<16}{'iou':>10}{'accuracy':>10}"]
        for name, i, a in zip(self.class_names, self.iou, self.accuracy):
            lines.append(f"{name:<16}{_fmt(i):>10}{_fmt(a):>10}")
        lines.append(f"{'mean_iou':<16}{self.mean_iou:>10.4f}")
        lines.append(f"{'class_avg_acc':<16}{self.class_avg_acc:>10.4f}")
        lines.append(f"{'pixel_acc':<16}{self.pixel_acc:>10.4f}")
        if self.stage_miou is not None:
            lines.append("")
            lines.append(f"{'stage':<16}{'mean_iou':>10}")
            for k, v in enumerate(self.stage_miou, start=1):
                lines.append(f"{'s' + str(k):<16}{v:>10.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        out = io.StringIO()
        out.write("class,iou,accuracy\n")
        for name, i, a in zip(self.class_names, self.iou, self.accuracy):
            out.write(f"{name},{_csv(i)},{_csv(a)}\n")
        out.write(f"mean_iou,{self.mean_iou!r},\n")
        out.write(f"class_avg_acc,{self.class_avg_acc!r},\n")
        out.write(f"pixel_acc,{self.pixel_acc!r},\n")
        if self.stage_miou is not None:
            for k, v in enumerate(self.stage_miou, start=1):
                out.write(f"stage{k}_mean_iou,{v!r},\n")
        return out.getvalue()


def _fmt(v):
    return "-" if np.isnan(v) else f"{v:.4f}"


def _csv(v):
    return "" if np.isnan(v) else repr(float(v))


def report(cm, class_names=None) -> EvalReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise DataError("confusion matrix is empty")
    diag = np.diag(cm).astype(np.float64)
    rows = cm.sum(axis=1).astype(np.float64)
    cols = cm.sum(axis=0).astype(np.float64)
    union = rows + cols - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(rows + cols > 0, diag / union, np.nan)
        acc = np.where(rows > 0, diag / rows, np.nan)
    names = class_names or [str(c) for c in range(cm.shape[0])]
    return EvalReport(iou, acc, float(np.nanmean(iou)), float(np.nanmean(acc)),
                      float(diag.sum() / total), list(names))


def upsample_to(logits, size):
    """Repeated bilinear doubling until ``logits`` reaches ``size``."""
    while logits.shape[2:] != tuple(size):
        if logits.shape[2] * 2 > size[0] or logits.shape[3] * 2 > size[1]:
            raise DimensionError(f"cannot reach {size} from {logits.shape[2:]} by doubling")
        logits = T.upsample_bilinear2x(logits)
    return logits


def stage_predictions(params, image):
    """Full-resolution argmax label maps from every stage, coarsest first."""
    out = M.model_forward(params, image, mode="infer")
    size = image.shape[2:]
    return [M.argmax_labels(upsample_to(s, size)) for s in out.s]


def evaluate(params, manifest, mean, batch_size=10, stagewise=False) -> EvalReport:
    """Evaluate the full-resolution prediction over a dataset.

    With ``stagewise`` the report also carries the mean IoU obtained from
    each of the six label maps after upsampling to input size.
    """
    C = manifest.num_classes
    cms = [new_confusion(C) for _ in range(M.NUM_STAGES)]
    mean = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    for start in range(0, len(manifest), batch_size):
        items = [manifest.load(i) for i in range(start, min(start + batch_size, len(manifest)))]
        images = np.stack([im for im, _ in items]) - mean
        if stagewise:
            preds = stage_predictions(params, images)
        else:
            preds = [None] * (M.NUM_STAGES - 1) + [M.predict(params, images)]
        for k, pred in enumerate(preds):
            if pred is None:
                continue
            for b, (_, gt) in enumerate(items):
                accumulate(cms[k], pred[b], gt)
    rep = report(cms[-1], manifest.class_names)
    if stagewise:
        rep.stage_miou = [report(cm).mean_iou for cm in cms]
    return rep


def stagewise_eval(params, manifest, mean, batch_size=10):
    return evaluate(params, manifest, mean, batch_size, stagewise=True).stage_miou


# ---------------------------------------------------------------- rendering

def default_palette(n):
    """Distinct, never-black colors (black is reserved for ignore)."""
    pal = []
    for c in range(1, n + 1):
        r = g = b = 0
        cid = c
        for j in range(8):
            r |= ((cid >> 0) & 1) << (7 - j)
            g |= ((cid >> 1) & 1) << (7 - j)
            b |= ((cid >> 2) & 1) << (7 - j)
            cid >>= 3
        pal.append((r, g, b))
    return np.array(pal, dtype=np.uint8)


def render_prediction(labels, palette):
    """Color a label map; returns float (3, h, w) in [0, 1], ignore -> black."""
    labels = np.asarray(labels)
    palette = np.asarray(palette, dtype=np.uint8)
    valid = labels != IGNORE
    if valid.any() and labels[valid].max() >= len(palette):
        raise DataError(f"palette has {len(palette)} colors, labels need {labels[valid].max() + 1}")
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    rgb[valid] = palette[labels[valid]]
    return rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255)
