"""Command-line entry point tying the pipeline together.

Heavy imports happen inside the command functions so that setting
RSA_SEQUENTIAL=1 can pin the BLAS thread pools before numpy loads.
Exit codes: 0 success, 1 validation failure, 2 assertion or bound
failure.
"""

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")

# CLI block names; "ncl" is the full-voxel baseline.
_BLOCK_MAP = {"none": "none", "ncl": "nonlocal", "rsa": "rsa"}

GRADCHECK_TARGETS = ("sa", "rsa", "ncl", "loss", "unet")
GRADCHECK_TOL = 1e-6


def _pin_threads():
    if os.environ.get("RSA_SEQUENTIAL") == "1":
        for var in _THREAD_VARS:
            os.environ.setdefault(var, "1")


def _ints(text, n, what):
    parts = text.split(",")
    if len(parts) != n:
        raise ValueError(f"{what} wants {n} comma-separated integers, got {text!r}")
    return tuple(int(p) for p in parts)


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args):
    from . import data as D
    dims = _ints(args.dims, 3, "--dims")
    ids = D.generate_dataset(args.out, n=args.n, seed=args.seed, dims=dims,
                             lesion_rate_target=args.rate,
                             channels=args.channels)
    print(f"wrote {len(ids)} samples to {args.out}")
    return 0


# ------------------------------------------------------------------- train

def _resolved_train_config(args):
    """Defaults, then the JSON config file, then explicit flags."""
    resolved = {
        "block": args.block,
        "placement": args.placement,
        "attention_embed": False,
        "levels": 3,
        "base_channels": 8,
        "iterations": 800,
        "batch_size": 4,
        "lr": 1e-3,
        "weight_decay": 1e-5,
        "crop_size": [32, 32, 16],
        "lesion_rate": 5.15e-4,
        "require_lesion": True,
        "n_train": 20,
    }
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        unknown = set(loaded) - set(resolved)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(loaded)
    for key in ("iterations", "batch_size", "lr", "weight_decay",
                "lesion_rate", "n_train"):
        value = getattr(args, key)
        if value is not None:
            resolved[key] = value
    if args.crop is not None:
        resolved["crop_size"] = list(_ints(args.crop, 3, "--crop"))
    if args.embed:
        resolved["attention_embed"] = True
    if resolved["block"] == "none":
        resolved["placement"] = "000"   # a placement without a block is noise
    return resolved


def _run_one_split(data_dir, resolved, seed, run_dir):
    from . import data as D
    from . import network as N
    from . import train as TR

    ids = D.read_manifest(data_dir)["ids"]
    train_ids, test_ids = D.split_dataset(ids, resolved["n_train"], seed=seed)
    dataset = {s.id: s for s in D.load_dataset(data_dir)}

    channels = dataset[train_ids[0]].image.shape[0]
    net_config = N.UNetConfig(
        levels=resolved["levels"], base_channels=resolved["base_channels"],
        in_channels=channels, out_classes=2,
        block_kind=_BLOCK_MAP[resolved["block"]],
        placement=resolved["placement"],
        attention_embed=resolved["attention_embed"])
    N.validate_config(net_config)
    net = N.build_network(net_config, seed=seed)

    train_config = TR.TrainConfig(
        iterations=resolved["iterations"], batch_size=resolved["batch_size"],
        lr=resolved["lr"], weight_decay=resolved["weight_decay"], seed=seed,
        crop_size=tuple(resolved["crop_size"]),
        lesion_rate=resolved["lesion_rate"],
        require_lesion=resolved["require_lesion"])
    history = TR.train_loop(net, [dataset[i] for i in train_ids],
                            train_config, out_dir=run_dir)

    report = TR.evaluate(net, [dataset[i] for i in test_ids])
    payload = dict(report.to_dict(), split="test", split_seed=seed)
    (run_dir / "metrics-test.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")

    provenance = dict(resolved, data=str(data_dir), seed=seed,
                      train_ids=train_ids, test_ids=test_ids)
    (run_dir / "config.json").write_text(
        json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    return history, report


def cmd_train(args):
    resolved = _resolved_train_config(args)
    seeds = list(range(args.splits)) if args.splits else [args.seed]
    reports = []
    for seed in seeds:
        run_dir = Path(args.out) / f"{resolved['block']}-{resolved['placement']}-s{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        history, report = _run_one_split(args.data, resolved, seed, run_dir)
        reports.append(report)
        print(f"{run_dir}: final loss {history[-1][1]:.4f}, "
              f"test voxel dice {report.voxel_avg_dice:.4f}"
              if history else
              f"{run_dir}: checkpointed initialization")
    if args.splits and len(reports) > 1:
        mean = {
            key: sum(getattr(r, key) for r in reports) / len(reports)
            for key in ("sample_avg_dice", "voxel_avg_dice",
                        "sample_avg_iou", "voxel_avg_iou")
        }
        mean["splits"] = len(reports)
        path = Path(args.out) / "splits-mean.json"
        path.write_text(json.dumps(mean, indent=2, sort_keys=True) + "\n")
        print(f"{path}: mean voxel dice {mean['voxel_avg_dice']:.4f}")
    return 0


# -------------------------------------------------------------------- eval

def cmd_eval(args):
    from . import data as D
    from . import network as N
    from . import train as TR
    from .errors import IncompatibleCheckpoint

    root = Path(args.checkpoint)
    ckpt = root if (root / "manifest.json").is_file() else root / "checkpoint"
    if not (ckpt / "manifest.json").is_file():
        raise IncompatibleCheckpoint(f"no checkpoint under {args.checkpoint}")
    net = N.load_checkpoint(ckpt)

    ids = D.read_manifest(args.data)["ids"]
    if args.split == "all":
        chosen = ids
    else:
        train_ids, test_ids = D.split_dataset(ids, args.n_train,
                                              seed=args.split_seed)
        chosen = train_ids if args.split == "train" else test_ids
    report = TR.evaluate(net, D.load_dataset(args.data, chosen))

    payload = dict(report.to_dict(), split=args.split,
                   split_seed=args.split_seed, checkpoint=str(ckpt),
                   data=str(args.data))
    out_dir = Path(args.out) if args.out else root
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"metrics-{args.split}.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(report.format_table(), end="")
    return 0


# -------------------------------------------------------------------- cost

def cmd_cost(args):
    from . import costmodel as CM

    if args.sweep:
        reports, violations = CM.sweep()
        if args.csv:
            Path(args.csv).write_text(CM.format_csv(reports))
        for line in violations:
            print(f"BOUND FAIL {line}")
        print(f"sweep: {len(reports)} reports, {len(violations)} bound failures")
        return 2 if violations else 0

    if not args.shape:
        raise ValueError("--shape C,D,H,W or --sweep is required")
    shape = _ints(args.shape, 4, "--shape")
    reports = CM.reports_for_shape(shape)
    if args.csv:
        Path(args.csv).write_text(CM.format_csv(reports))
    print(CM.format_table(reports), end="")
    mem, flop = CM.cost_ratio(shape)
    print(f"memory ratio {mem:.2f}, flop ratio {flop:.2f}")
    return 0


# --------------------------------------------------------------- gradcheck

def unet_gradcheck_fixture():
    """Small attention-equipped net at a well-conditioned evaluation point.

    Biases get a positive shift and all parameters a random nudge so no
    relu pre-activation sits near its kink, where a finite difference
    quits agreeing with the (one-sided) analytic derivative.  Seed and
    step were chosen for margin: smallest kink distance 1.4e-4 against
    eps 1e-5, smallest nonzero gradient well above the rounding floor.
    """
    import numpy as np

    from . import network as N
    from . import tensor as T

    rng = np.random.default_rng(24)
    config = N.UNetConfig(levels=2, base_channels=2, in_channels=2,
                          out_classes=2, block_kind="rsa", placement="010")
    net = N.build_network(config, seed=24)
    for name, p in net.named_parameters():
        if name.endswith(".b"):
            p.data = p.data + 0.03 + np.abs(rng.normal(0.0, 0.08, p.data.shape))
        else:
            p.data = p.data + rng.normal(0.0, 0.05, p.data.shape)
    xs = T.from_numpy(rng.normal(size=(1, 2, 8, 8, 8)) * 0.5,
                      requires_grad=True)
    return net, xs


def gradcheck_suite(target: str) -> float:
    """Max relative finite-difference error for one target's fixtures."""
    import numpy as np

    from . import attention as A
    from . import network as N
    from . import tensor as T

    # seed picked so every fixture sits clear of the finite-difference
    # noise floor at this eps; see the conditioning note on the unet fixture
    rng = np.random.default_rng(0)

    def feats(shape=(2, 3, 4, 5)):
        return T.from_numpy(rng.normal(size=shape), requires_grad=True)

    errs = []
    with T.precision("float64"):
        if target == "sa":
            for axis in A.SliceAxis:
                for with_embed in (False, True):
                    m = feats()
                    embed = (A.AttentionEmbedding.create(2, rng)
                             if with_embed else None)
                    params = A.SAParams(alpha=T.scalar(0.7, requires_grad=True),
                                        embed=embed)
                    leaves = [m, params.alpha] + (embed.tensors() if embed else [])
                    errs.append(T.gradcheck(
                        lambda: T.sum_all(A.sa_forward(m, axis, params)),
                        leaves, eps=1e-5))
        elif target == "rsa":
            for with_embed in (False, True):
                m = feats()
                embed = (A.AttentionEmbedding.create(2, rng)
                         if with_embed else None)
                params = A.RSAParams(
                    alphas=tuple(T.scalar(0.3 * (i + 1), requires_grad=True)
                                 for i in range(3)),
                    embed=embed)
                leaves = [m, *params.alphas] + (embed.tensors() if embed else [])
                errs.append(T.gradcheck(
                    lambda: T.sum_all(A.rsa_forward(m, params)),
                    leaves, eps=1e-5))
        elif target == "ncl":
            m = feats()
            embed = A.AttentionEmbedding.create(2, rng)
            params = A.SAParams(alpha=T.scalar(0.5, requires_grad=True),
                                embed=embed)
            leaves = [m, params.alpha] + embed.tensors()
            errs.append(T.gradcheck(
                lambda: T.sum_all(A.nonlocal_forward(m, params)),
                leaves, eps=1e-5))
        elif target == "loss":
            logits = feats((2, 2, 3, 4, 5))
            labels = rng.integers(0, 2, size=(2, 3, 4, 5)).astype(np.float64)
            errs.append(T.gradcheck(
                lambda: N.weighted_ce_loss(logits, labels, 5.15e-4),
                [logits], eps=1e-5))
        elif target == "unet":
            net, xs = unet_gradcheck_fixture()
            errs.append(T.gradcheck(
                lambda: T.sum_all(N.network_forward(net, xs)),
                [xs] + net.parameters(), eps=1e-5))
        else:
            raise ValueError(f"unknown gradcheck target {target!r}")
    return max(errs)


def cmd_gradcheck(args):
    err = gradcheck_suite(args.target)
    ok = err < GRADCHECK_TOL
    print(f"{args.target}: max relative error {err:.3e} "
          f"({'<' if ok else '>='} {GRADCHECK_TOL:g})")
    return 0 if ok else 2


# -------------------------------------------------------------------- main

def build_parser():
    parser = argparse.ArgumentParser(
        prog="rsaseg",
        description="Volumetric lesion segmentation with slice-wise attention")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=43)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="64,64,32")
    p.add_argument("--rate", type=float, default=5.15e-4)
    p.add_argument("--channels", type=int, default=3)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one network per split seed")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs")
    p.add_argument("--block", choices=sorted(_BLOCK_MAP), default="rsa")
    p.add_argument("--placement", default="010")
    p.add_argument("--config", help="JSON file overriding training defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splits", type=int,
                   help="run split seeds 0..N-1 and report mean metrics")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--crop")
    p.add_argument("--rate", dest="lesion_rate", type=float)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--embed", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--split-seed", dest="split_seed", type=int, default=0)
    p.add_argument("--n-train", dest="n_train", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="attention cost reports and bound sweep")
    p.add_argument("--shape", help="C,D,H,W")
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--csv", help="also write reports as CSV to this path")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--target", required=True, choices=GRADCHECK_TARGETS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    _pin_threads()
    args = build_parser().parse_args(argv)
    from .errors import RsasegError
    try:
        return args.func(args)
    except (RsasegError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
