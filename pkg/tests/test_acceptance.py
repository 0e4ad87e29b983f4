"""Release gate: the nine properties the package promises, one test each.

Each test prints a single pass/fail line so a log skim shows the state
of every claim.  Times are wall-clock on whatever machine runs this;
the budgets are generous for a desktop CPU.
"""

import json
import time

import numpy as np
import pytest

from rsaseg import attention as A
from rsaseg import cli
from rsaseg import costmodel as CM
from rsaseg import metrics as M
from rsaseg import network as N
from rsaseg import tensor as T

AXIS_DIMS = {A.SliceAxis.AXIAL: 1, A.SliceAxis.CORONAL: 2,
             A.SliceAxis.SAGITTAL: 3}


def _line(idx, ok, detail):
    print(f"criterion {idx}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {idx}: {detail}"


def _rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-6)))


def test_01_oracle_equivalence():
    rng = np.random.default_rng(11)
    worst = 0.0
    start = time.perf_counter()
    with T.precision("float64"):
        for i in range(100):
            shape = (int(rng.integers(1, 4)),) + tuple(
                int(rng.integers(1, 6)) for _ in range(3))
            m = T.from_numpy(rng.normal(size=shape))
            embed = (A.AttentionEmbedding.create(shape[0], rng)
                     if i % 2 else None)
            sa = A.SAParams(alpha=T.scalar(rng.uniform(-1, 1)), embed=embed)
            axis = list(A.SliceAxis)[i % 3]
            worst = max(worst, _rel(A.sa_forward(m, axis, sa).data,
                                    A.sa_forward_naive(m, axis, sa).data))
            rsa = A.RSAParams(
                alphas=tuple(T.scalar(rng.uniform(-1, 1)) for _ in range(3)),
                embed=embed)
            worst = max(worst, _rel(A.rsa_forward(m, rsa).data,
                                    A.rsa_forward_stepwise(m, rsa).data))
    took = time.perf_counter() - start
    _line(1, worst < 1e-6 and took < 30.0,
          f"100 maps, worst relative gap {worst:.3e}, {took:.1f}s")


def test_02_gradient_correctness():
    start = time.perf_counter()
    errs = {target: cli.gradcheck_suite(target)
            for target in cli.GRADCHECK_TARGETS}
    took = time.perf_counter() - start
    detail = ", ".join(f"{t} {e:.2e}" for t, e in errs.items())
    _line(2, max(errs.values()) < 1e-6 and took < 300.0,
          f"{detail}, {took:.0f}s")


def test_03_cost_claims():
    start = time.perf_counter()
    side = 512 * 512 * 256
    flagship = CM.attention_cost((1, 512, 512, 256), CM.NONLOCAL)
    mem32, flop32 = CM.cost_ratio((1, 32, 32, 32))
    _, violations = CM.sweep()
    took = time.perf_counter() - start
    ok = (side == 67_108_864
          and flagship.map_entries == side * side
          and abs(mem32 - 349525.33) < 0.01
          and abs(flop32 - 341.33) < 0.01
          and not violations
          and took < 1.0)
    _line(3, ok, f"map side {side}, cubic-32 ratios {mem32:.2f}/{flop32:.2f}, "
          f"{len(violations)} bound failures, {took * 1000:.0f}ms")


def test_04_analytic_equals_instrumented():
    rng = np.random.default_rng(5)
    gaps = []
    for _ in range(6):
        shape = (int(rng.integers(1, 4)),) + tuple(
            int(rng.integers(2, 9)) for _ in range(3))
        m = T.from_numpy(rng.normal(size=shape))
        runs = [(CM.NONLOCAL, lambda: A.nonlocal_forward(
                    m, A.SAParams(alpha=T.scalar(0.5)))),
                (CM.RSA, lambda: A.rsa_forward(m, A.RSAParams(
                    alphas=tuple(T.scalar(0.1) for _ in range(3)))))]
        for kind, axis in zip(("sa-axial", "sa-coronal", "sa-sagittal"),
                              (A.SliceAxis.AXIAL, A.SliceAxis.CORONAL,
                               A.SliceAxis.SAGITTAL)):
            runs.append((kind, lambda axis=axis: A.sa_forward(
                m, axis, A.SAParams(alpha=T.scalar(0.5)))))
        for kind, call in runs:
            with T.count_ops() as ops:
                call()
            want = CM.attention_cost(shape, kind).matmul_macs
            if ops.matmul_macs != want:
                gaps.append((shape, kind, ops.matmul_macs, want))
    _line(4, not gaps, "6 shapes x 5 kinds exact" if not gaps
          else f"mismatches: {gaps[:3]}")


def test_05_identity_at_initialization():
    plain = N.build_network(N.UNetConfig(
        levels=3, base_channels=4, in_channels=2, block_kind="none",
        placement="000"), seed=9)
    x = T.from_numpy(np.random.default_rng(9).normal(size=(1, 2, 8, 8, 8)))
    base = N.network_forward(plain, x).data
    worst = 0.0
    for placement in ("010", "101", "111"):
        net = N.build_network(N.UNetConfig(
            levels=3, base_channels=4, in_channels=2, block_kind="rsa",
            placement=placement), seed=9)
        worst = max(worst, float(np.max(np.abs(
            N.network_forward(net, x).data - base))))
    _line(5, worst < 1e-6, f"rsa-010/101/111 vs plain, worst gap {worst:.3e}")


def test_06_invariance_suite():
    rng = np.random.default_rng(21)
    checks = []
    with T.precision("float64"):
        for axis in A.SliceAxis:
            m = T.from_numpy(rng.normal(size=(2, 4, 5, 6)))
            params = A.SAParams(alpha=T.scalar(0.8))
            amap = A.sa_attention_map(m, axis, params).data
            checks.append(np.max(np.abs(amap.sum(axis=-1) - 1.0)) < 1e-6)

            dim = AXIS_DIMS[axis]
            perm = rng.permutation(m.shape[dim])
            permuted = T.from_numpy(np.take(m.data, perm, axis=dim))
            out = A.sa_forward(m, axis, params).data
            out_p = A.sa_forward(permuted, axis, params).data
            checks.append(np.max(np.abs(out_p - np.take(out, perm, axis=dim)))
                          < 1e-6)
            checks.append(A.sa_forward(m, axis, params).shape == m.shape)
    for r in (0.1, 0.5, 0.9, 5.15e-4):
        w0, w1 = N.loss_weights(r)
        checks.append(abs(w0 + w1 - 1.0) < 1e-12)
    lesion = N.loss_weights(5.15e-4)[1]
    checks.append(abs(lesion - 0.26915) < 1e-5)
    _line(6, all(checks), f"row-stochastic, permutation-equivariant, "
          f"shape-preserving, lesion weight {lesion:.5f}")


def test_07_metrics_semantics():
    report = M.aggregate([("a", M.Confusion(1, 0, 0)),
                          ("b", M.Confusion(1, 1, 1))])
    empty = M.dice_iou(M.Confusion(0, 0, 0))
    ok = (report.sample_avg_dice == pytest.approx(0.75, abs=1e-4)
          and report.voxel_avg_dice == pytest.approx(2 * 2 / 6, abs=1e-4)
          and empty == (1.0, 1.0))
    _line(7, ok, f"sample {report.sample_avg_dice:.4f}, "
          f"voxel {report.voxel_avg_dice:.4f}, empty/empty {empty[0]:.1f}")


def test_08_end_to_end_training(tmp_path):
    start = time.perf_counter()
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--out", str(data), "--n", "43",
                     "--seed", "0"]) == 0
    out = tmp_path / "runs"
    assert cli.main(["train", "--data", str(data), "--out", str(out),
                     "--block", "rsa", "--placement", "010",
                     "--seed", "0"]) == 0
    run = out / "rsa-010-s0"
    dice = json.loads((run / "metrics-test.json").read_text())["voxel_avg_dice"]
    losses = [float(line.split(",")[1]) for line
              in (run / "history.csv").read_text().splitlines()[1:]]
    first, last = np.mean(losses[:10]), np.mean(losses[-10:])
    took = time.perf_counter() - start
    _line(8, dice >= 0.70 and last < first and took < 1800.0,
          f"test voxel dice {dice:.4f}, loss {first:.4f} -> {last:.4f}, "
          f"{took / 60:.1f} min")


def test_09_bitwise_reproducibility(tmp_path, monkeypatch):
    monkeypatch.setenv("RSA_SEQUENTIAL", "1")
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--out", str(data), "--n", "6", "--seed", "3",
                     "--dims", "16,16,16", "--rate", "5e-3",
                     "--channels", "2"]) == 0
    flags = ["--iterations", "10", "--crop", "8,8,8", "--rate", "5e-3",
             "--n-train", "3", "--seed", "0"]
    for out in ("one", "two"):
        assert cli.main(["train", "--data", str(data), "--out",
                         str(tmp_path / out)] + flags) == 0
    one, two = (tmp_path / "one" / "rsa-010-s0", tmp_path / "two" / "rsa-010-s0")
    same = [(one / rel).read_bytes() == (two / rel).read_bytes()
            for rel in ("metrics-test.json", "history.csv",
                        "checkpoint/manifest.json")]
    params = sorted(p.name for p in (one / "checkpoint" / "params").iterdir())
    same += [(one / "checkpoint" / "params" / n).read_bytes()
             == (two / "checkpoint" / "params" / n).read_bytes()
             for n in params]
    _line(9, all(same),
          f"{len(params)} parameter files and all artifacts bitwise equal")
