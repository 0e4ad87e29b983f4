"""Closed-form attention-map memory and FLOP accounting.

Counts describe only the attention maps themselves: building each map
(one matrix product), the softmax over its rows, and the aggregation
product that applies the map to the values.  Backbone convolutions and
the pointwise embeddings are deliberately out of scope.

Conventions: one multiply-add = 2 FLOPs, softmax = 3 ops per map entry
(exp, accumulate, divide).  Ratios between block kinds are computed on
the multiply-add terms alone so that the channel count cancels; the
softmax term would otherwise make the ratio depend on C even though
both blocks spend it on entries of the very maps being compared.
"""

from dataclasses import dataclass

from .errors import RankMismatch, ZeroExtent

# Memory and FLOP reduction factors that must hold on every sweep shape
# whose smallest spatial extent is at least MIN_EXTENT_FOR_BOUNDS.
MEMORY_BOUND = 28.0
FLOP_BOUND = 100.0
MIN_EXTENT_FOR_BOUNDS = 18

NONLOCAL = "nonlocal"
RSA = "rsa"
SA_KINDS = ("sa-axial", "sa-coronal", "sa-sagittal")
BLOCK_KINDS = (NONLOCAL,) + SA_KINDS + (RSA,)

# (axis name, index into (D,H,W)) in anatomical order used by reports.
_SA_AXES = (("sa-axial", 0), ("sa-coronal", 1), ("sa-sagittal", 2))

CSV_COLUMNS = ("block_kind", "C", "D", "H", "W", "map_entries", "map_bytes", "map_flops")


@dataclass(frozen=True)
class CostReport:
    """Exact integer counts for one block kind at one feature-map shape."""

    block_kind: str
    channels: int
    extents: tuple  # (D, H, W)
    map_entries: int
    map_bytes: int
    matmul_flops: int
    softmax_flops: int

    @property
    def map_flops(self):
        return self.matmul_flops + self.softmax_flops

    @property
    def matmul_macs(self):
        return self.matmul_flops // 2

    def csv_row(self):
        d, h, w = self.extents
        return (self.block_kind, self.channels, d, h, w,
                self.map_entries, self.map_bytes, self.map_flops)


def _check_shape(shape):
    if len(shape) != 4:
        raise RankMismatch(f"expected (C, D, H, W), got {len(shape)} entries")
    c, d, h, w = (int(v) for v in shape)
    if min(c, d, h, w) <= 0:
        raise ZeroExtent(f"all extents must be positive, got {shape}")
    return c, d, h, w


def _axis_counts(channels, volume, length):
    """Entries and multiply-adds for one attention pass of sequence length
    `length` whose rows carry `channels * volume / length` features."""
    entries = length * length
    features = channels * (volume // length)
    macs = 2 * features * entries  # build F*L^2 + aggregate F*L^2
    return entries, macs


def attention_cost(shape, block_kind, element_bytes=4):
    c, d, h, w = _check_shape(shape)
    volume = d * h * w
    if block_kind == NONLOCAL:
        entries, macs = _axis_counts(c, volume, volume)
    elif block_kind == RSA:
        entries = 0
        macs = 0
        for _, idx in _SA_AXES:
            e, m = _axis_counts(c, volume, (d, h, w)[idx])
            entries += e
            macs += m
    elif block_kind in SA_KINDS:
        idx = dict(_SA_AXES)[block_kind]
        entries, macs = _axis_counts(c, volume, (d, h, w)[idx])
    else:
        raise ValueError(f"unknown block kind {block_kind!r}")
    return CostReport(
        block_kind=block_kind,
        channels=c,
        extents=(d, h, w),
        map_entries=entries,
        map_bytes=entries * int(element_bytes),
        matmul_flops=2 * macs,
        softmax_flops=3 * entries,
    )


def cost_ratio(shape):
    """(memory_ratio, flop_ratio) of the full-volume block over the
    three-pass decomposition.  Memory compares map entries; FLOPs compare
    multiply-add counts, on which the channel count cancels exactly."""
    full = attention_cost(shape, NONLOCAL)
    split = attention_cost(shape, RSA)
    return (full.map_entries / split.map_entries,
            full.matmul_flops / split.matmul_flops)


# Shape grid for the bound sweep.  Mixes cubic and anisotropic extents on
# both sides of the MIN_EXTENT_FOR_BOUNDS threshold; the bounds are only
# asserted above it.  Channel counts vary to exercise their cancellation.
SWEEP_GRID = tuple(
    (c, d, h, w)
    for c in (1, 8, 32)
    for (d, h, w) in (
        (4, 4, 4),
        (16, 16, 16),
        (17, 17, 17),
        (18, 18, 18),
        (18, 18, 128),
        (19, 23, 29),
        (32, 32, 32),
        (64, 64, 32),
        (48, 96, 18),
        (96, 96, 96),
        (128, 128, 64),
        (512, 512, 256),
    )
)


def sweep(element_bytes=4, grid=SWEEP_GRID):
    """Reports over the grid plus bound violations.

    Returns (reports, violations): one report per shape and block kind,
    and a list of human-readable strings for every grid shape with
    min(D, H, W) >= MIN_EXTENT_FOR_BOUNDS whose memory or FLOP ratio
    falls short of the claimed reduction factors.
    """
    reports = []
    violations = []
    for shape in grid:
        for kind in (NONLOCAL, RSA):
            reports.append(attention_cost(shape, kind, element_bytes))
        mem, flop = cost_ratio(shape)
        if min(shape[1:]) < MIN_EXTENT_FOR_BOUNDS:
            continue
        if mem < MEMORY_BOUND:
            violations.append(f"{shape}: memory ratio {mem:.2f} < {MEMORY_BOUND}")
        if flop < FLOP_BOUND:
            violations.append(f"{shape}: FLOP ratio {flop:.2f} < {FLOP_BOUND}")
    return reports, violations


def reports_for_shape(shape, element_bytes=4):
    """One report per block kind, full-volume first, for CLI display."""
    return [attention_cost(shape, kind, element_bytes) for kind in BLOCK_KINDS]


def format_csv(reports):
    lines = [",".join(CSV_COLUMNS)]
    for r in reports:
        lines.append(",".join(str(v) for v in r.csv_row()))
    return "\n".join(lines) + "\n"


def format_table(reports):
    rows = [CSV_COLUMNS] + [tuple(str(v) for v in r.csv_row()) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(CSV_COLUMNS))]
    out = []
    for row in rows:
        out.append("  ".join(cell.rjust(width) for cell, width in zip(row, widths)))
    return "\n".join(out) + "\n"
