"""3D U-Net backbone with attention insertion points and the weighted loss.

The backbone is deliberately small: two 3x3x3 conv+relu stages per
level, stride-2 convs down, nearest-neighbour upsampling plus conv up,
skip concatenation, and a pointwise head.  No normalization layers.
Attention blocks can sit at three positions: the second-bottom encoder
stage, the bottom stage, and the second-bottom decoder stage, selected
by a 3-digit placement string in that order.
"""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import attention as A
from . import data as D
from . import tensor as T
from .errors import (
    ChannelMismatch,
    IncompatibleCheckpoint,
    IndivisibleExtent,
    InvalidPlacement,
    InvalidRate,
    NonBinary,
    RankMismatch,
    ShapeMismatch,
)

PLACEMENTS = ("000", "010", "101", "111")
BLOCK_KINDS = ("none", "nonlocal", "rsa")

# placement digit index -> insertion point
_POSITIONS = ("enc", "bot", "dec")


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_channels: int = 8
    in_channels: int = 3
    out_classes: int = 2
    block_kind: str = "none"
    placement: str = "000"
    attention_embed: bool = False
    nonlocal_max_len: int = 4096


@dataclass
class Network:
    config: UNetConfig
    params: dict  # name -> Tensor, insertion order equals forward order

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())


def validate_config(config: UNetConfig) -> None:
    if config.block_kind not in BLOCK_KINDS:
        raise InvalidPlacement(f"unknown block kind {config.block_kind!r}")
    if config.placement not in PLACEMENTS:
        raise InvalidPlacement(
            f"placement must be one of {PLACEMENTS}, got {config.placement!r}")
    if config.block_kind == "none" and config.placement != "000":
        raise InvalidPlacement(
            f"placement {config.placement!r} names attention sites but block kind is none")
    if config.levels < 2:
        raise InvalidPlacement("placement positions need at least 2 levels")


def _attention_sites(config: UNetConfig):
    if config.block_kind == "none":
        return frozenset()
    return frozenset(
        name for name, bit in zip(_POSITIONS, config.placement) if bit == "1")


def build_network(config: UNetConfig, seed: int = 0) -> Network:
    """Create all parameters with seeded He fan-in initialization.

    The backbone and the optional attention embeddings draw from
    separate seed streams, and attention alphas start at 0 without
    consuming randomness, so networks that differ only in block kind or
    placement share bit-identical backbone weights for a given seed.
    """
    validate_config(config)
    backbone_ss, embed_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(backbone_ss)
    embed_rng = np.random.default_rng(embed_ss)
    chs = [config.base_channels << i for i in range(config.levels)]
    params = {}

    def conv3(name, c_out, c_in):
        std = math.sqrt(2.0 / (c_in * 27))
        params[name + ".w"] = T.parameter(rng.normal(0.0, std, (c_out, c_in, 3, 3, 3)))
        params[name + ".b"] = T.parameter(np.zeros(c_out))

    def conv1(name, c_out, c_in):
        std = math.sqrt(2.0 / c_in)
        params[name + ".w"] = T.parameter(rng.normal(0.0, std, (c_out, c_in)))
        params[name + ".b"] = T.parameter(np.zeros(c_out))

    def attention(pos, channels):
        prefix = f"att_{pos}."
        if config.block_kind == "rsa":
            for i in range(3):
                params[prefix + f"alpha{i}"] = T.scalar(0.0, requires_grad=True)
        else:
            params[prefix + "alpha"] = T.scalar(0.0, requires_grad=True)
        if config.attention_embed:
            emb = A.AttentionEmbedding.create(channels, embed_rng)
            params[prefix + "theta"] = emb.theta
            params[prefix + "phi"] = emb.phi
            params[prefix + "g"] = emb.g

    sites = _attention_sites(config)
    c_prev = config.in_channels
    for i in range(config.levels):
        conv3(f"enc{i}.conv1", chs[i], c_prev)
        conv3(f"enc{i}.conv2", chs[i], chs[i])
        if i == config.levels - 2 and "enc" in sites:
            attention("enc", chs[i])
        if i == config.levels - 1 and "bot" in sites:
            attention("bot", chs[i])
        if i < config.levels - 1:
            conv3(f"down{i}", chs[i + 1], chs[i])
            c_prev = chs[i + 1]
    for i in range(config.levels - 2, -1, -1):
        conv3(f"up{i}", chs[i], chs[i + 1])
        conv3(f"dec{i}.conv1", chs[i], 2 * chs[i])
        conv3(f"dec{i}.conv2", chs[i], chs[i])
        if i == config.levels - 2 and "dec" in sites:
            attention("dec", chs[i])
    conv1("head", config.out_classes, chs[0])
    return Network(config=config, params=params)


def _apply_attention(x, pos, net):
    cfg = net.config
    p = net.params
    prefix = f"att_{pos}."
    embed = None
    if cfg.attention_embed:
        embed = A.AttentionEmbedding(
            theta=p[prefix + "theta"], phi=p[prefix + "phi"], g=p[prefix + "g"])
    if cfg.block_kind == "rsa":
        rp = A.RSAParams(
            alphas=(p[prefix + "alpha0"], p[prefix + "alpha1"], p[prefix + "alpha2"]),
            embed=embed)
        return A.rsa_forward(x, rp)
    sp = A.SAParams(alpha=p[prefix + "alpha"], embed=embed)
    return A.nonlocal_forward(x, sp, max_len=cfg.nonlocal_max_len)


def network_forward(net: Network, batch: T.Tensor) -> T.Tensor:
    cfg = net.config
    if len(batch.shape) != 5:
        raise RankMismatch(f"batch must be [N, C, D, H, W], got {batch.shape}")
    _, c, d, h, w = batch.shape
    if c != cfg.in_channels:
        raise ChannelMismatch(f"network expects {cfg.in_channels} channels, got {c}")
    div = 1 << (cfg.levels - 1)
    if any(e % div for e in (d, h, w)):
        raise IndivisibleExtent(
            f"spatial extents {(d, h, w)} must be divisible by {div}")
    p = net.params

    def stage(x, name):
        x = T.relu(T.add_channel_bias(
            T.conv3d(x, p[f"{name}.conv1.w"], padding=1), p[f"{name}.conv1.b"]))
        x = T.relu(T.add_channel_bias(
            T.conv3d(x, p[f"{name}.conv2.w"], padding=1), p[f"{name}.conv2.b"]))
        return x

    sites = _attention_sites(cfg)
    skips = []
    x = batch
    for i in range(cfg.levels):
        x = stage(x, f"enc{i}")
        if i == cfg.levels - 2 and "enc" in sites:
            x = _apply_attention(x, "enc", net)
        if i == cfg.levels - 1 and "bot" in sites:
            x = _apply_attention(x, "bot", net)
        if i < cfg.levels - 1:
            skips.append(x)
            x = T.relu(T.add_channel_bias(
                T.conv3d(x, p[f"down{i}.w"], stride=2, padding=1), p[f"down{i}.b"]))
    for i in range(cfg.levels - 2, -1, -1):
        x = T.upsample_nearest2(x)
        x = T.relu(T.add_channel_bias(
            T.conv3d(x, p[f"up{i}.w"], padding=1), p[f"up{i}.b"]))
        x = T.concat_channels(x, skips[i])
        x = stage(x, f"dec{i}")
        if i == cfg.levels - 2 and "dec" in sites:
            x = _apply_attention(x, "dec", net)
    return T.conv3d_1x1(x, p["head.w"], p["head.b"])


def loss_weights(rate, swap_weights=False):
    """(background, lesion) class weights from the exponential formulas.

    Read verbatim, e^r/(e^r + e^(1-r)) puts the SMALLER weight on the
    lesion class whenever r < 0.5; swap_weights exchanges the two for
    the reading where the minority class is up-weighted.
    """
    r = float(rate)
    if not 0.0 < r < 1.0:
        raise InvalidRate(f"class rate must lie in (0, 1), got {rate}")
    er = math.exp(r)
    e1r = math.exp(1.0 - r)
    w_lesion = er / (er + e1r)
    w_background = e1r / (er + e1r)
    if swap_weights:
        w_lesion, w_background = w_background, w_lesion
    return w_background, w_lesion


def weighted_ce_loss(logits: T.Tensor, labels, rate, swap_weights=False) -> T.Tensor:
    """Weighted mean over voxels of the negative log softmax.

    Normalizing by the sum of weights (not the voxel count) makes
    r = 0.5 reduce exactly to unweighted cross-entropy.
    """
    w0, w1 = loss_weights(rate, swap_weights)
    if len(logits.shape) != 5:
        raise RankMismatch(f"logits must be [N, K, D, H, W], got {logits.shape}")
    if logits.shape[1] != 2:
        raise ChannelMismatch(f"binary loss needs 2 classes, got {logits.shape[1]}")
    lab = np.asarray(getattr(labels, "data", labels))
    if lab.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeMismatch(f"labels {lab.shape} against logits {logits.shape}")
    if not np.isin(lab, (0, 1)).all():
        raise NonBinary("labels must contain only 0 and 1")
    lab_i = lab.astype(np.int64)

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    total = ez.sum(axis=1, keepdims=True)
    softmax = ez / total
    logsm = (z - zmax) - np.log(total)
    nll = -np.take_along_axis(logsm, lab_i[:, None], axis=1)[:, 0]
    weights = np.where(lab_i == 1, w1, w0)
    weight_sum = weights.sum()
    value = (weights * nll).sum() / weight_sum
    onehot = np.stack([lab_i == 0, lab_i == 1], axis=1).astype(z.dtype)

    def bwd(g):
        scale = g.reshape(-1)[0] / weight_sum
        return ((softmax - onehot) * weights[:, None] * scale,)

    return T._finish(np.array([value], dtype=z.dtype), (logits,), bwd)


# Checkpoints: params/<name>.rsav per tensor plus manifest.json holding
# the config and the ordered name/shape list.

def save_checkpoint(net: Network, out_dir) -> None:
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in net.named_parameters():
        D.write_volume(out / "params" / f"{name}.rsav", t)
        entries.append({"name": name, "shape": list(t.shape)})
    manifest = {"config": asdict(net.config), "params": entries}
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(ckpt_dir) -> Network:
    root = Path(ckpt_dir)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise IncompatibleCheckpoint(f"{ckpt_dir}: no checkpoint manifest")
    manifest = json.loads(mpath.read_text())
    try:
        config = UNetConfig(**manifest["config"])
        stored = {e["name"]: tuple(e["shape"]) for e in manifest["params"]}
    except (KeyError, TypeError) as exc:
        raise IncompatibleCheckpoint(f"{ckpt_dir}: malformed manifest: {exc}")
    net = build_network(config, seed=0)
    if set(stored) != set(net.params):
        raise IncompatibleCheckpoint(f"{ckpt_dir}: parameter set mismatch")
    for name, t in net.named_parameters():
        path = root / "params" / f"{name}.rsav"
        if not path.is_file():
            raise IncompatibleCheckpoint(f"{ckpt_dir}: missing tensor {name}")
        vol = D.read_volume(path)
        if vol.shape != t.shape:
            raise IncompatibleCheckpoint(
                f"{ckpt_dir}: {name} has shape {vol.shape}, expected {t.shape}")
        t.data = vol.data.astype(t.data.dtype)
    return net
