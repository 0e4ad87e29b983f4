"""Slice-wise attention blocks for volumetric feature maps.

Three block kinds operate on (C, D, H, W) maps (or batched (N, C, D, H, W),
applied per element):

* slice attention (SA): attends each slice along one anatomical axis to a
  learned combination of all slices along that axis,
* recurrent slice attention (RSA): three SA passes, sagittal then coronal then
  axial, sharing one pointwise embedding but each with its own scale,
* non-local: full attention over every voxel pair, kept as the reference
  baseline; its map grows with the square of the voxel count, so a size guard
  rejects maps that would not fit.

Each matrix-path block has a scalar-loop twin (`sa_forward_naive`,
`rsa_forward_stepwise`) used as an independent oracle in tests.

All blocks are exact identities when their scale parameters are zero.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import AttentionMapTooLarge, RankMismatch
from .tensor import Tensor


class SliceAxis(enum.Enum):
    """Anatomical slicing direction, mapped onto (C, D, H, W) feature axes."""

    SAGITTAL = "sagittal"  # W
    CORONAL = "coronal"    # H
    AXIAL = "axial"        # D

    @property
    def dim(self) -> int:
        return {"axial": 1, "coronal": 2, "sagittal": 3}[self.value]


RSA_PASS_ORDER = (SliceAxis.SAGITTAL, SliceAxis.CORONAL, SliceAxis.AXIAL)


@dataclass
class AttentionEmbedding:
    """Optional pointwise channel embeddings for the three matrix roles.

    theta feeds the row (query) matrix, phi the column (key) matrix, g the
    value matrix. Any of the three may be None, in which case that role uses
    the raw feature map; this keeps both the all-three and partial embedding
    configurations available.
    """

    theta: Optional[Tensor] = None
    phi: Optional[Tensor] = None
    g: Optional[Tensor] = None

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator,
               roles: tuple[str, ...] = ("theta", "phi", "g")) -> "AttentionEmbedding":
        """Square channel-mixing weights, small-variance init, for the given roles."""
        weights = {}
        for role in ("theta", "phi", "g"):
            if role in roles:
                w = rng.normal(0.0, math.sqrt(1.0 / channels), size=(channels, channels))
                weights[role] = T.parameter(w)
            else:
                weights[role] = None
        return cls(**weights)

    def tensors(self) -> list[Tensor]:
        return [w for w in (self.theta, self.phi, self.g) if w is not None]


@dataclass
class SAParams:
    """Scale parameter (starts at zero, so the block starts as an identity)
    plus the optional shared embedding."""

    alpha: Tensor = field(default_factory=lambda: T.scalar(0.0, requires_grad=True))
    embed: Optional[AttentionEmbedding] = None


@dataclass
class RSAParams:
    """One shared embedding for all three passes; one independent alpha each.

    Sharing is by identity: the passes reference the same embedding tensors,
    so its gradient accumulates contributions from every pass.
    """

    alphas: tuple[Tensor, Tensor, Tensor] = field(
        default_factory=lambda: tuple(T.scalar(0.0, requires_grad=True) for _ in range(3)))
    embed: Optional[AttentionEmbedding] = None

    def sa_params(self, index: int) -> SAParams:
        return SAParams(alpha=self.alphas[index], embed=self.embed)


def _require_rank4(m: Tensor, op: str) -> None:
    if m.data.ndim != 4:
        raise RankMismatch(f"{op} needs a (C,D,H,W) feature map, got shape {m.shape}")


def _per_batch(fn, m: Tensor, *args):
    """Apply a rank-4 block independently to each element of a rank-5 batch."""
    outs = [fn(T.select(m, n), *args) for n in range(m.shape[0])]
    return T.stack(outs)


def _embedded(m: Tensor, weights: Optional[Tensor]) -> Tensor:
    return m if weights is None else T.conv3d_1x1(m, weights)


def _role_maps(m: Tensor, params: SAParams) -> tuple[Tensor, Tensor, Tensor]:
    embed = params.embed
    if embed is None:
        return m, m, m
    return _embedded(m, embed.theta), _embedded(m, embed.phi), _embedded(m, embed.g)


def _axis_first(axis: SliceAxis) -> tuple[int, ...]:
    d = axis.dim
    return (d,) + tuple(a for a in range(4) if a != d)


def sa_attention_map(m: Tensor, axis: SliceAxis, params: SAParams) -> Tensor:
    """Row-stochastic [L, L] map over the L slices along `axis`.

    Entry (i, j) weights slice j's contribution to slice i: the softmax over j
    of the dot product between slice i's row features and slice j's column
    features.
    """
    if m.data.ndim == 5:
        raise RankMismatch("sa_attention_map is defined per (C,D,H,W) map; index the batch first")
    _require_rank4(m, "sa_attention_map")
    q, k, _ = _role_maps(m, params)
    L = m.shape[axis.dim]
    feat = m.size // L
    order = _axis_first(axis)
    rows = T.permute_reshape(q, order, (L, feat))
    cols = T.permute_reshape(k, order[1:] + order[:1], (feat, L))
    return T.softmax_rows(T.matmul(rows, cols))


def _sa_forward_single(m: Tensor, axis: SliceAxis, params: SAParams) -> Tensor:
    attn = sa_attention_map(m, axis, params)
    _, _, v = _role_maps(m, params)
    L = m.shape[axis.dim]
    feat = m.size // L
    order = _axis_first(axis)
    values = T.permute_reshape(v, order, (L, feat))
    mixed = T.matmul(attn, values)
    # back from [L, feat] to the original axis layout
    permuted_shape = tuple(m.shape[a] for a in order)
    unflat = T.permute_reshape(mixed, (0, 1), permuted_shape)
    attended = T.permute_reshape(unflat, tuple(np.argsort(order)), m.shape)
    return T.scaled_residual(params.alpha, attended, m)


def sa_forward(m: Tensor, axis: SliceAxis, params: SAParams) -> Tensor:
    """Slice attention along one axis: alpha-scaled attended map plus the input."""
    if m.data.ndim == 5:
        return _per_batch(_sa_forward_single, m, axis, params)
    _require_rank4(m, "sa_forward")
    return _sa_forward_single(m, axis, params)


def rsa_forward(m: Tensor, params: RSAParams) -> Tensor:
    """Sagittal, coronal, then axial slice attention with a shared embedding."""
    if m.data.ndim == 5:
        return _per_batch(rsa_forward, m, params)
    _require_rank4(m, "rsa_forward")
    out = m
    for i, axis in enumerate(RSA_PASS_ORDER):
        out = _sa_forward_single(out, axis, params.sa_params(i))
    return out


def nonlocal_forward(m: Tensor, params: SAParams, max_len: int = 4096) -> Tensor:
    """Full-voxel attention: the sequence is every voxel, features are channels.

    The [L, L] map with L = D*H*W is materialized, so the guard rejects inputs
    whose map would not fit; that blow-up is exactly what the slice-wise
    decomposition avoids.
    """
    if m.data.ndim == 5:
        return _per_batch(nonlocal_forward, m, params, max_len)
    _require_rank4(m, "nonlocal_forward")
    c = m.shape[0]
    L = m.size // c
    if L > max_len:
        raise AttentionMapTooLarge(
            f"{L} voxels would need a {L}x{L} attention map (guard: {max_len})")
    q, k, v = _role_maps(m, params)
    rows = T.permute_reshape(q, (1, 2, 3, 0), (L, c))
    cols = T.permute_reshape(k, (0, 1, 2, 3), (c, L))
    attn = T.softmax_rows(T.matmul(rows, cols))
    values = T.permute_reshape(v, (1, 2, 3, 0), (L, c))
    mixed = T.matmul(attn, values)
    unflat = T.permute_reshape(mixed, (0, 1), m.shape[1:] + m.shape[:1])
    attended = T.permute_reshape(unflat, (3, 0, 1, 2), m.shape)
    return T.scaled_residual(params.alpha, attended, m)


# ---------------------------------------------------------------------------
# scalar-loop oracles

def _embed_naive(x: np.ndarray, weights: Optional[Tensor]) -> np.ndarray:
    """Pointwise channel mixing with explicit loops (oracle path)."""
    if weights is None:
        return x
    w = weights.data
    c_out, c_in = w.shape
    _, d, h, wd = x.shape
    out = np.zeros((c_out, d, h, wd), dtype=np.float64)
    for co in range(c_out):
        for z in range(d):
            for y in range(h):
                for xx in range(wd):
                    acc = 0.0
                    for ci in range(c_in):
                        acc += float(w[co, ci]) * float(x[ci, z, y, xx])
                    out[co, z, y, xx] = acc
    return out


def sa_forward_naive(m: Tensor, axis: SliceAxis, params: SAParams) -> Tensor:
    """Slice attention by explicit scalar loops, no matrix machinery.

    Intended for small inputs only; this is the oracle the matrix path is
    tested against.
    """
    _require_rank4(m, "sa_forward_naive")
    x = m.data.astype(np.float64)
    if params.embed is None:
        q = k = v = x
    else:
        q = _embed_naive(x, params.embed.theta)
        k = _embed_naive(x, params.embed.phi)
        v = _embed_naive(x, params.embed.g)
    d = axis.dim
    L = m.shape[d]
    alpha = float(params.alpha.data.reshape(-1)[0])

    others = [a for a in range(4) if a != d]
    other_shape = [m.shape[a] for a in others]

    def slice_dot(a: np.ndarray, i: int, b: np.ndarray, j: int) -> float:
        acc = 0.0
        for c in range(other_shape[0]):
            for u in range(other_shape[1]):
                for w in range(other_shape[2]):
                    idx_i = [0, 0, 0, 0]
                    idx_j = [0, 0, 0, 0]
                    idx_i[d], idx_j[d] = i, j
                    for pos, ax in zip((c, u, w), others):
                        idx_i[ax] = pos
                        idx_j[ax] = pos
                    acc += float(a[tuple(idx_i)]) * float(b[tuple(idx_j)])
        return acc

    weights = []
    for i in range(L):
        logits = [slice_dot(q, i, k, j) for j in range(L)]
        weights.append(T.softmax_row(logits))

    out = np.zeros(m.shape, dtype=np.float64)
    for i in range(L):
        # attended slice i: weighted sum of value slices, then the residual
        for c in range(other_shape[0]):
            for u in range(other_shape[1]):
                for w in range(other_shape[2]):
                    idx = [0, 0, 0, 0]
                    idx[d] = i
                    for pos, ax in zip((c, u, w), others):
                        idx[ax] = pos
                    acc = 0.0
                    for j in range(L):
                        jdx = list(idx)
                        jdx[d] = j
                        acc += weights[i][j] * float(v[tuple(jdx)])
                    out[tuple(idx)] = alpha * acc + float(x[tuple(idx)])
    return Tensor(out.astype(m.data.dtype))


def rsa_forward_stepwise(m: Tensor, params: RSAParams) -> Tensor:
    """Per-voxel propagation oracle: each stage rewrites every voxel as the
    alpha-scaled weighted sum along its axis plus the residual, reading only
    the previous stage's full output."""
    _require_rank4(m, "rsa_forward_stepwise")
    out = m
    for i, axis in enumerate(RSA_PASS_ORDER):
        out = sa_forward_naive(out, axis, params.sa_params(i))
    return out
