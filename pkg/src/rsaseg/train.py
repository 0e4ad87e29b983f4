"""Optimizer and training/evaluation loops.

The protocol is the source setup at desk scale: random subvolume crops,
batch size 4, Adam at lr 1e-3 with weight decay 1e-5, and a fixed
iteration budget where one iteration is one batch step.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from . import network as N
from . import tensor as T
from .errors import EmptyInput, NonFiniteResult, ShapeMismatch


@dataclass
class AdamState:
    """Per-parameter moment buffers plus the scalar step counter."""

    lr: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected adaptive update, in place.

    `params` and `grads` are name-keyed dicts; weight decay enters as L2
    added to the gradient and applies to every parameter, the residual
    scales included.
    """
    state.step += 1
    t = state.step
    for name in params:
        p = params[name]
        g = np.asarray(grads[name], dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise ShapeMismatch(
                f"gradient for {name} has shape {g.shape}, "
                f"parameter has {p.data.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ShapeMismatch(f"moment buffer for {name} has shape {m.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 800
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-5
    seed: int = 0
    crop_size: tuple = D.DEFAULT_CROP
    lesion_rate: float = D.DEFAULT_RATE
    require_lesion: bool = True
    swap_weights: bool = False


def _batch(dataset, config, rng):
    idx = rng.integers(0, len(dataset), size=config.batch_size)
    crops = [
        D.random_crop(dataset[i], config.crop_size,
                      rng_seed=int(rng.integers(0, 2 ** 32)),
                      require_lesion=config.require_lesion)
        for i in idx
    ]
    images = np.stack([c.image.data for c in crops])
    labels = np.stack([c.label.data for c in crops])
    return images, labels


def train_loop(net: N.Network, dataset, config: TrainConfig, out_dir=None):
    """Run the training protocol; returns [(iteration, loss), ...].

    Everything stochastic (sample order, crop offsets) is drawn from one
    generator seeded by config.seed, so a rerun reproduces the history
    and checkpoint bitwise.  With out_dir set, history.csv and a final
    checkpoint/ are written there; 0 iterations checkpoints the
    initialization as-is.
    """
    data = list(dataset)
    if not data:
        raise EmptyInput("no training samples")
    rng = np.random.default_rng(config.seed)
    params = dict(net.named_parameters())
    state = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    history = []
    for it in range(1, config.iterations + 1):
        images, labels = _batch(data, config, rng)
        xs = T.from_numpy(images)
        for p in params.values():
            p.grad = None
        with T.Tape() as tape:
            logits = N.network_forward(net, xs)
            loss = N.weighted_ce_loss(logits, labels, config.lesion_rate,
                                      config.swap_weights)
        T.backward(loss, tape)
        value = float(loss.item())
        if not np.isfinite(value):
            raise NonFiniteResult(f"loss diverged at iteration {it}: {value}")
        grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data)
                 for name, p in params.items()}
        adam_step(params, grads, state)
        history.append((it, value))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "history.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss"])
            for it, value in history:
                writer.writerow([it, repr(value)])
        N.save_checkpoint(net, out / "checkpoint")
    return history


def predict_volume(net: N.Network, image) -> np.ndarray:
    """Argmax mask [D, H, W] for one [C, D, H, W] volume.

    The volume is zero-padded up to extents the network can halve and
    the logits are cut back before binarization.
    """
    img = np.asarray(getattr(image, "data", image))
    _, d, h, w = img.shape
    div = 2 ** (net.config.levels - 1)
    pad = [(0, 0)] + [(0, (-e) % div) for e in (d, h, w)]
    logits = N.network_forward(net, T.from_numpy(np.pad(img, pad)[None]))
    return M.binarize_logits(logits)[0, :d, :h, :w]


def evaluate(net: N.Network, dataset) -> M.MetricsReport:
    """Full-volume inference over a dataset, aggregated into a report."""
    data = list(dataset)
    if not data:
        raise EmptyInput("no samples to evaluate")
    pairs = [(s.id, M.confusion(predict_volume(net, s.image), s.label))
             for s in data]
    return M.aggregate(pairs)
