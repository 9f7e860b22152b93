"""Acceptance criteria 1-8, one test each.

Every test prints a ``[acceptance N] PASS|FAIL`` line (visible without -s)
together with its runtime and the key measured numbers.
"""
import statistics
import time
from contextlib import contextmanager

import numpy as np
import pytest

from e2caps import ops
from e2caps.attention import render_attention_map
from e2caps.backbone import BackboneConfig
from e2caps.capsules import CapsuleConfig, dynamic_routing, squash
from e2caps.losses import LossConfig, margin_loss, total_loss
from e2caps.model import VARIANTS, build_variant
from e2caps.suite import TOLERANCE, gradcheck_suite
from e2caps.tensor import Tensor, no_grad
from e2caps.train import Checkpoint, TrainConfig, train

pytestmark = pytest.mark.slow


@contextmanager
def criterion(capsys, number, title):
    notes = []
    t0 = time.perf_counter()
    status = "FAIL"
    try:
        yield notes
        status = "PASS"
    finally:
        extra = ("  " + "; ".join(notes)) if notes else ""
        with capsys.disabled():
            print(f"\n[acceptance {number}] {status} {title} "
                  f"({time.perf_counter() - t0:.1f}s){extra}")


def test_1_closed_form_oracles(capsys):
    with criterion(capsys, 1, "squash / margin / total-loss oracles") as notes:
        s = np.array([0.6, 0.8, 0.0])
        # the 1e-9 stabilizer inside the norm moves this by ~5e-10
        np.testing.assert_allclose(squash(Tensor(s)).data, s / 2, rtol=0, atol=1e-9)
        assert np.array_equal(squash(Tensor(np.zeros(8))).data, np.zeros(8))
        rng = np.random.Generator(np.random.PCG64(0))
        v = squash(Tensor(rng.standard_normal((10_000, 8)) * rng.uniform(0, 50, (10_000, 1))))
        assert np.all(np.linalg.norm(v.data, axis=1) < 1)

        cfg = LossConfig()
        # (norms, label, expected) with m+ = 0.9, m- = 0.1, lambda 0.5
        cases = [([0.9, 0.1, 0.1, 0.1], 0, 0.0),
                 ([0.0, 0.0, 0.0, 0.0], 0, 0.81),
                 ([0.9, 0.6, 0.1, 0.1], 0, 0.125)]
        for norms, label, expected in cases:
            got = float(margin_loss(np.array(norms), label, cfg).data)
            assert abs(got - expected) < 1e-12, (norms, got, expected)

        m = Tensor(np.array(0.3), requires_grad=True)
        r = Tensor(np.array(2.0), requires_grad=True)
        total_loss(m, r, cfg).backward()
        assert r.grad == 0.0005 and m.grad == 1.0
        assert total_loss(1.0, 2.0, cfg) == pytest.approx(1.001, abs=1e-15)
        notes.append("max squash norm %.6f" % np.linalg.norm(v.data, axis=1).max())


def brute_force_map(centers):
    grid = np.zeros((100, 100))
    for y in range(100):
        for x in range(100):
            for cx, cy in centers:
                if abs(x - cx) <= 7 and abs(y - cy) <= 7:
                    grid[y, x] = max(grid[y, x], 1.0 - 0.07 * (abs(x - cx) + abs(y - cy)))
    return grid


def test_2_attention_map(capsys):
    with criterion(capsys, 2, "attention map vs per-pixel oracle") as notes:
        rng = np.random.Generator(np.random.PCG64(2024))
        for _ in range(100):
            k = int(rng.integers(1, 17))
            centers = [tuple(c) for c in rng.integers(0, 100, (k, 2)).tolist()]
            got = render_attention_map(centers).grid
            assert np.array_equal(got, brute_force_map(centers))
            assert got.min() >= 0 and got.max() <= 1
        g = render_attention_map([(50, 50)]).grid
        assert g[50, 50] == 1.0
        assert g[50, 57] == pytest.approx(0.51, abs=1e-12)
        assert g[43, 50] == pytest.approx(0.51, abs=1e-12)
        assert g[57, 57] == pytest.approx(0.02, abs=1e-12)
        assert g[50, 58] == 0.0
        notes.append("100 random center sets identical")


def test_3_full_profile_shapes(capsys):
    with criterion(capsys, 3, "full-profile shape contract") as notes:
        t0 = time.perf_counter()
        bb = BackboneConfig.full()
        caps = CapsuleConfig(n_classes=7)
        model = build_variant("E2Capsnet", bb, caps, seed=0)
        rng = np.random.Generator(np.random.PCG64(3))
        images = Tensor(rng.uniform(0, 1, (1, 3, 224, 224)).astype(np.float32))
        att = render_attention_map([(30, 40), (70, 40), (50, 75)]).grid[None]
        with no_grad():
            feats = model.features(images, att)
            assert feats.shape == (1, 512, 7, 7)
            p = model.params
            conv = ops.conv2d(feats, p["primarycaps.weight"], p["primarycaps.bias"])
            assert conv.shape == (1, 256, 6, 6)
            assert model.head.n_primary == 1152
            assert p["facecaps.W"].shape == (1152, 7, 16, 8)
            out = model.forward(images, att)
        assert out.caps.shape == (1, 7, 16)
        assert np.all(np.isfinite(out.caps.data))
        elapsed = time.perf_counter() - t0
        assert elapsed < 60
        notes.append(f"224x224x3 -> 512x7x7 -> 256x6x6 -> 1152x8 -> 7x16 in {elapsed:.1f}s")


def test_4_gradient_suite(capsys):
    with criterion(capsys, 4, "finite-difference gradient suite, 10 seeds") as notes:
        t0 = time.perf_counter()
        worst = {}
        for seed in range(10):
            for name, err in gradcheck_suite(seed=seed):
                worst[name] = max(worst.get(name, 0.0), err)
        elapsed = time.perf_counter() - t0
        name, err = max(worst.items(), key=lambda kv: kv[1])
        notes.append(f"{len(worst)} checks, worst {err:.2e} ({name})")
        assert "E2Capsnet toy end-to-end" in worst
        assert err < TOLERANCE
        assert elapsed < 300


def loop_routing(votes, iters):
    n, c, d = votes.shape
    b = np.zeros((n, c))
    v = None
    for it in range(iters):
        cc = np.zeros((n, c))
        for i in range(n):
            e = [np.exp(x - max(b[i])) for x in b[i]]
            cc[i] = [x / sum(e) for x in e]
        v = np.zeros((c, d))
        for j in range(c):
            s = sum(cc[i, j] * votes[i, j] for i in range(n))
            n2 = float(s @ s)
            v[j] = n2 / (1 + n2) / np.sqrt(n2 + 1e-9) * s
        if it < iters - 1:
            for i in range(n):
                for j in range(c):
                    b[i, j] += votes[i, j] @ v[j]
    return v


def test_5_routing_properties(capsys):
    with criterion(capsys, 5, "routing properties") as notes:
        rng = np.random.Generator(np.random.PCG64(5))
        votes = Tensor(rng.standard_normal((3, 20, 6, 16)))
        _, state = dynamic_routing(votes, 3)
        assert len(state.couplings) == 3
        for coup in state.couplings:
            assert np.max(np.abs(coup.sum(axis=-1) - 1)) < 1e-9

        one = rng.standard_normal((7, 1, 16))
        v, _ = dynamic_routing(Tensor(one), 3)
        np.testing.assert_allclose(v.data[0], squash(Tensor(one.sum(axis=0)[0])).data,
                                   rtol=0, atol=1e-12)

        worst = 0.0
        for n in range(1, 5):
            for c in (1, 2):
                for iters in (1, 3):
                    raw = rng.standard_normal((n, c, 8))
                    got, _ = dynamic_routing(Tensor(raw), iters)
                    worst = max(worst, float(np.max(np.abs(got.data - loop_routing(raw, iters)))))
        assert worst < 1e-10
        notes.append(f"loop oracle max abs diff {worst:.1e}")


def test_6_end_to_end_learning(capsys, default_arrays):
    with criterion(capsys, 6, "toy E2-Capsnet learns the synthetic set") as notes:
        t0 = time.perf_counter()
        res = train(TrainConfig(variant="E2Capsnet", epochs=30, seed=0), default_arrays)
        elapsed = time.perf_counter() - t0
        losses = [row["total_loss"] for row in res.metrics]
        accs = [row["test_acc"] for row in res.metrics]
        first_hit = next((i + 1 for i, a in enumerate(accs) if a >= 0.9), None)
        notes.append(f"best test acc {max(accs):.3f} (first >=0.90 at epoch {first_hit}), "
                     f"wall {elapsed:.0f}s, first losses {[round(float(x), 4) for x in losses[:5]]}")
        bumps = sum(b >= a for a, b in zip(losses[:5], losses[1:5]))
        assert bumps <= 1
        assert max(accs) >= 0.9
        assert elapsed < 600


def test_7_ablation_harness(capsys, default_arrays):
    with criterion(capsys, 7, "ablation harness, 5 variants x 3 seeds") as notes:
        t0 = time.perf_counter()
        acc = {v: [] for v in VARIANTS}
        for seed in range(3):
            for variant in VARIANTS:
                res = train(TrainConfig(variant=variant, epochs=10, seed=seed), default_arrays)
                assert len(res.metrics) == 10
                acc[variant].append(round(float(res.metrics[-1]["test_acc"]), 3))
        elapsed = time.perf_counter() - t0
        med = {v: statistics.median(a) for v, a in acc.items()}
        notes.append(", ".join(f"{v} {med[v]:.3f} {acc[v]}" for v in VARIANTS))
        notes.append(f"wall {elapsed:.0f}s")
        assert med["E2Capsnet"] >= med["Capsnet"]
        assert elapsed < 1800


def test_8_determinism_and_round_trip(capsys, tmp_path, default_arrays):
    with criterion(capsys, 8, "determinism and checkpoint round trip") as notes:
        cfg = TrainConfig(variant="E2Capsnet", epochs=2, seed=7, log_wallclock=False)
        train(cfg, default_arrays, tmp_path / "a")
        train(cfg, default_arrays, tmp_path / "b")
        for name in ("metrics.csv", "last.ckpt", "best.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        raw = (tmp_path / "a" / "last.ckpt").read_bytes()
        Checkpoint.load(tmp_path / "a" / "last.ckpt").save(tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == raw
        notes.append(f"metrics.csv and checkpoints byte-identical; checkpoint {len(raw)} bytes")
