"""Dice and IoU with two aggregation schemes.

The conventional score is the mean of per-sample Dice/IoU.  Because
lesion load varies wildly between subjects, that average lets a handful
of near-empty volumes dominate; pooling all voxels into one confusion
before scoring removes the bias.  Reports carry both.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, NonBinary, ShapeMismatch

TABLE_COLUMNS = ("Sample Avg. Dice", "Voxel Avg. Dice",
                 "Sample Avg. IoU", "Voxel Avg. IoU")


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _as_binary(arr, name):
    data = np.asarray(getattr(arr, "data", arr))
    if not np.isin(data, (0, 1)).all():
        raise NonBinary(f"{name} must contain only 0 and 1")
    return data.astype(bool)


def confusion(pred, label) -> Confusion:
    p = _as_binary(pred, "pred")
    l = _as_binary(label, "label")
    if p.shape != l.shape:
        raise ShapeMismatch(f"pred {p.shape} vs label {l.shape}")
    return Confusion(
        tp=int(np.count_nonzero(p & l)),
        fp=int(np.count_nonzero(p & ~l)),
        fn=int(np.count_nonzero(~p & l)),
    )


def dice_iou(c: Confusion):
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        # Empty ground truth met by an empty prediction; scored as perfect
        # agreement.  Reports flag every sample where this fired.
        return 1.0, 1.0
    return 2 * c.tp / denom, c.tp / (c.tp + c.fp + c.fn)


def binarize_logits(logits):
    """Argmax over the class axis of [N,K,D,H,W] or [K,D,H,W] logits."""
    data = np.asarray(getattr(logits, "data", logits))
    axis = 1 if data.ndim == 5 else 0
    return np.argmax(data, axis=axis).astype(np.uint8)


@dataclass(frozen=True)
class MetricsReport:
    sample_avg_dice: float
    voxel_avg_dice: float
    sample_avg_iou: float
    voxel_avg_iou: float
    per_sample: tuple = ()
    # ids scored by the empty-vs-empty convention rather than the formula
    empty_convention_ids: tuple = ()
    pooled: Confusion = field(default_factory=Confusion)

    def to_dict(self):
        out = {
            "sample_avg_dice": self.sample_avg_dice,
            "voxel_avg_dice": self.voxel_avg_dice,
            "sample_avg_iou": self.sample_avg_iou,
            "voxel_avg_iou": self.voxel_avg_iou,
            "per_sample": [
                {"id": i, "dice": d, "iou": u} for i, d, u in self.per_sample
            ],
            "pooled": {"tp": self.pooled.tp, "fp": self.pooled.fp, "fn": self.pooled.fn},
        }
        if self.empty_convention_ids:
            out["empty_convention_ids"] = list(self.empty_convention_ids)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def format_table(self):
        values = tuple(
            f"{v:.4f}" for v in (self.sample_avg_dice, self.voxel_avg_dice,
                                 self.sample_avg_iou, self.voxel_avg_iou)
        )
        widths = [max(len(h), len(v)) for h, v in zip(TABLE_COLUMNS, values)]
        head = "  ".join(h.rjust(w) for h, w in zip(TABLE_COLUMNS, widths))
        row = "  ".join(v.rjust(w) for v, w in zip(values, widths))
        lines = [head, row]
        if self.empty_convention_ids:
            ids = ", ".join(str(i) for i in self.empty_convention_ids)
            lines.append(f"note: empty-vs-empty convention applied to: {ids}")
        return "\n".join(lines) + "\n"


def aggregate(confusions) -> MetricsReport:
    """`confusions` is a sequence of (id, Confusion) pairs.

    Sample averages take the mean of per-sample scores; voxel averages
    score the componentwise sum of all confusions.
    """
    items = list(confusions)
    if not items:
        raise EmptyInput("no samples to aggregate")
    per_sample = []
    flagged = []
    pooled = Confusion()
    for sid, c in items:
        d, u = dice_iou(c)
        per_sample.append((sid, d, u))
        if c.tp + c.fp + c.fn == 0:
            flagged.append(sid)
        pooled = pooled + c
    voxel_dice, voxel_iou = dice_iou(pooled)
    return MetricsReport(
        sample_avg_dice=float(np.mean([d for _, d, _ in per_sample])),
        voxel_avg_dice=voxel_dice,
        sample_avg_iou=float(np.mean([u for _, _, u in per_sample])),
        voxel_avg_iou=voxel_iou,
        per_sample=tuple(per_sample),
        empty_convention_ids=tuple(flagged),
        pooled=pooled,
    )
