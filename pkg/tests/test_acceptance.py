"""Acceptance suite: one PASS/FAIL line per criterion.

Run under pytest (lines are listed in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from fasunet import fas
from fasunet.fusion import postprocess, threshold_segment
from fasunet.io import PhantomSpec, Shape, make_phantom, random_phantom_spec
from fasunet.metrics import SurfaceDistanceError, dsc, precision, ssd
from fasunet.model import BlurSpec, ModelParams, apply_A, apply_At
from fasunet.net import NetConfig, TrainConfig, check_network_gradients, init_params, param_count, train
from fasunet.net import autodiff as ad
from fasunet.net.train import warm_up_batchnorm
from fasunet.tensor import GradField, div_backward, grad_forward


def report(n: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# -- 1, 2: parameter counts -------------------------------------------------------

def test_c01_paramcount_formula():
    t0 = time.perf_counter()
    c2 = param_count(NetConfig(levels=5, channels=64, k_l=3, k_m=7, k_r=4, kernel=3))
    c3 = param_count(NetConfig(levels=4, channels=32, k_l=3, k_m=5, k_r=2, kernel=3,
                               spatial_dims=3, channel_ratio=1.0))
    c32 = param_count(NetConfig(levels=5, channels=32, k_l=3, k_m=7, k_r=4, kernel=3))
    ok = (c2.multiplier_term == 2064384 and c3.multiplier_term == 995328
          and c32.multiplier_term == 516096 and c32.multiplier == 56)
    report(1, ok, f"2D term {c2.multiplier_term} (want 2064384), 3D term {c3.multiplier_term} "
                  f"(want 995328), p=32 2D {c32.multiplier}*{c32.eta_kernel}={c32.multiplier_term} "
                  f"(want 516096) [{(time.perf_counter() - t0) * 1e3:.1f} ms]")
    assert ok


def test_c02_instantiated_count():
    cfg = NetConfig(levels=5, channels=64, k_l=3, k_m=7, k_r=4, kernel=3, classes=5, in_channels=1)
    pc = param_count(cfg)
    store = init_params(cfg)
    n = store.count()
    ok = n == pc.instantiated_count and 2_000_000 <= n <= 2_200_000
    report(2, ok, f"instantiated 2D network holds {n} parameters (allowed [2.00M, 2.20M])")
    assert ok


# -- 3: gradients -------------------------------------------------------------------

def test_c03_gradient_check():
    t0 = time.perf_counter()
    cfg = NetConfig(levels=2, channels=4, k_l=2, k_m=2, k_r=2, classes=3)
    rng = np.random.default_rng(3)
    images = rng.random((2, 1, 8, 8))
    labels = rng.integers(0, 3, (2, 8, 8))
    store = init_params(cfg, seed=3)
    warm_up_batchnorm(store, cfg, images)
    res = check_network_gradients(store, cfg, images, labels, n_probes=60, step=1e-6, seed=3, mode="eval")
    dt = time.perf_counter() - t0
    ok = len(res.probes) >= 50 and res.max_rel_error <= 1e-4 and dt < 60
    report(3, ok, f"{len(res.probes)} probes, max rel. error {res.max_rel_error:.2e} (<= 1e-4), "
                  f"{res.rejected} kink-crossing probes redrawn [{dt:.1f} s]")
    assert ok


# -- 4, 5: FAS vs a dense direct solve ----------------------------------------------

def dense_operator(H: int, W: int, mu: float, nu: float) -> np.ndarray:
    """``I + 2 mu nu L`` with ``L`` the 4-neighbour graph Laplacian, assembled edge by edge."""
    n = H * W
    M = np.eye(n)
    w = 2.0 * mu * nu
    for i in range(H):
        for j in range(W):
            for di, dj in ((0, 1), (1, 0)):
                if i + di < H and j + dj < W:
                    a, b = i * W + j, (i + di) * W + j + dj
                    M[a, a] += w
                    M[b, b] += w
                    M[a, b] -= w
                    M[b, a] -= w
    return M


LINEAR = dict(mu=0.1, nu=1.0, tv_enabled=False)


def test_c04_fas_matches_direct_solve():
    t0 = time.perf_counter()
    H = W = 17
    p = ModelParams(**LINEAR)
    cfg = fas.FasConfig(levels=3, k_l=3, k_m=7, k_r=4)
    hier = fas.build_hierarchy((H, W), p, cfg)
    M = dense_operator(H, W, p.mu, p.nu)
    rng = np.random.default_rng(4)
    worst, cycles_needed, ratios = 0.0, 0, []
    for _ in range(10):
        b = rng.standard_normal((H, W))
        u_direct = np.linalg.solve(M, b.ravel()).reshape(H, W)
        u = b[None].copy()
        prev = np.linalg.norm(b - fas.apply_F(u, p))
        err = np.inf
        for k in range(1, 16):
            u = fas.fas_vcycle(u, b[None], 1, hier, cfg)
            r = np.linalg.norm(b - fas.apply_F(u, p))
            if prev > 1e-10 * np.linalg.norm(b):
                ratios.append(r / prev)
            prev = r
            err = np.max(np.abs(u[0] - u_direct))
            if err <= 1e-6:
                break
        worst = max(worst, err)
        cycles_needed = max(cycles_needed, k)
    med = float(np.median(ratios))
    ok = worst <= 1e-6 and med <= 0.5
    report(4, ok, f"max |u - u_direct| {worst:.2e} (<= 1e-6) within {cycles_needed} cycles (<= 15); "
                  f"median contraction {med:.2e} (<= 0.5) over 10 rhs [{time.perf_counter() - t0:.2f} s]")
    assert ok


def test_c05_exact_solution_is_fixed_point():
    rng = np.random.default_rng(5)
    H = W = 17
    cfg = fas.FasConfig(levels=3, k_l=3, k_m=7, k_r=4)
    # linear mode: the exact solution from the dense oracle
    p = ModelParams(**LINEAR)
    b = rng.standard_normal((H, W))
    u_star = np.linalg.solve(dense_operator(H, W, p.mu, p.nu), b.ravel()).reshape(1, H, W)
    hier = fas.build_hierarchy((H, W), p, cfg)
    d_lin = np.max(np.abs(fas.fas_vcycle(u_star, b[None], 1, hier, cfg) - u_star))
    # nonlinear TV mode: b := F(u) makes any u exact by construction
    pn = ModelParams(mu=0.1, nu=0.05, eps_tv=0.1)
    u = rng.random((1, H, W))
    bn = fas.apply_F(u, pn)
    hier = fas.build_hierarchy((H, W), pn, cfg)
    d_tv = np.max(np.abs(fas.fas_vcycle(u, bn, 1, hier, cfg) - u))
    ok = d_lin <= 1e-10 and d_tv <= 1e-10
    report(5, ok, f"V-cycle moves the exact solution by {d_lin:.1e} (linear) and {d_tv:.1e} (TV), <= 1e-10")
    assert ok


# -- 6: adjoints ----------------------------------------------------------------------

def _adjoint_gaps(rng, n_pairs=100):
    gaps = {"grad/div": 0.0, "A/At": 0.0, "conv/deconv": 0.0, "restrict/prolong": 0.0}
    blur = BlurSpec("gaussian", sigma=1.2, radius=2)
    p = ModelParams(blur=blur)
    for _ in range(n_pairs):
        H, W = (int(v) for v in rng.integers(5, 20, 2))
        u = rng.standard_normal((H, W))
        g = GradField(rng.standard_normal((H, W)), rng.standard_normal((H, W)))
        du = grad_forward(u)
        lhs = float(np.sum(du.gx * g.gx) + np.sum(du.gy * g.gy))
        gaps["grad/div"] = max(gaps["grad/div"], abs(lhs + float(np.sum(u * div_backward(g)))))

        r = rng.standard_normal((H, W))
        gaps["A/At"] = max(gaps["A/At"], abs(np.sum(apply_A(u, p) * r) - np.sum(u[None] * apply_At(r, p))))

        x = rng.standard_normal((2, 3, 2 * H, 2 * W))
        k = rng.standard_normal((4, 3, 3, 3))
        y = rng.standard_normal((2, 4, H, W))
        cx = ad.conv2d_raw(x, k, stride=2)
        dy = ad.conv2d_grad_input(y, k, (2 * H, 2 * W), stride=2)
        gaps["conv/deconv"] = max(gaps["conv/deconv"], abs(np.sum(cx * y) - np.sum(x * dy)))

        xf = rng.standard_normal((H, W))
        h, w = (H + 1) // 2, (W + 1) // 2
        yc = np.zeros((h, w))
        yc[1:-1, 1:-1] = rng.standard_normal((h - 2, w - 2))
        gap = abs(4.0 * np.sum(fas.restrict(xf) * yc) - np.sum(xf * fas.prolong(yc, H, W)))
        gaps["restrict/prolong"] = max(gaps["restrict/prolong"], gap)
    return gaps


def test_c06_adjoint_suite():
    t0 = time.perf_counter()
    gaps = _adjoint_gaps(np.random.default_rng(6))
    ok = all(v <= 1e-10 for v in gaps.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in gaps.items())
    report(6, ok, f"100 random pairs each, max gap: {detail} (<= 1e-10) [{time.perf_counter() - t0:.2f} s]")
    assert ok


# -- 7: classical two-stage pipeline --------------------------------------------------

# tuned once on a separate seed, then frozen
C7_MODEL = dict(mu=0.5, nu=0.05, eps_tv=0.1)
C7_FAS = dict(levels=4, k_l=3, k_m=7, k_r=4, cycles=10)


def test_c07_two_phase_phantom():
    t0 = time.perf_counter()
    spec = PhantomSpec((128, 128), (0.2, 0.8), [Shape("disk", (63.5, 63.5, 36.0), 1)],
                       noise_std=0.15, seed=2024)
    img, gt = make_phantom(spec)
    res = fas.solve(img, ModelParams(**C7_MODEL), fas.FasConfig(**C7_FAS))
    mask = threshold_segment(res.u, [0.5])
    d = dsc(mask, gt, 1)
    raw = dsc(threshold_segment(img, [0.5]), gt, 1)
    dt = time.perf_counter() - t0
    ok = d >= 0.95 and dt < 30
    report(7, ok, f"128x128 disk, noise 0.15: DSC {d:.4f} (>= 0.95; raw threshold {raw:.4f}) [{dt:.2f} s]")
    assert ok


# -- 8: toy training ------------------------------------------------------------------

def toy_dataset(n=8, size=64, seed0=100):
    X, Y = [], []
    for i in range(n):
        im, gt = make_phantom(random_phantom_spec((size, size), (0.2, 0.5, 0.8), seed=seed0 + i,
                                                  n_shapes=4, noise_std=0.05))
        X.append(im[None])
        Y.append(gt)
    return np.array(X), np.array(Y)


@pytest.mark.slow
def test_c08_toy_training_overfit():
    t0 = time.perf_counter()
    X, Y = toy_dataset()
    cfg = NetConfig(levels=3, channels=8, k_l=2, k_m=3, k_r=2, classes=3)
    tcfg = TrainConfig(lr0=0.01, momentum=0.99, weight_decay=1e-4, batch_size=8, max_epochs=500, seed=0)
    res = train(X, Y, cfg, tcfg, callback=lambda e, loss, d: loss <= 0.05 and d >= 0.95)
    dt = time.perf_counter() - t0
    loss, d = res.losses[-1], res.dscs[-1]
    ok = loss <= 0.05 and d >= 0.95 and len(res.losses) <= 500 and dt < 300
    report(8, ok, f"training loss {loss:.4f} (<= 0.05), a-DSC {d:.4f} (>= 0.95) after "
                  f"{len(res.losses)} epochs (<= 500) [{dt:.0f} s]")
    assert ok


# -- 9: metrics oracles -----------------------------------------------------------------

def oracle_boundary(mask, c):
    H, W = mask.shape
    pts = []
    for i in range(H):
        for j in range(W):
            if mask[i, j] != c:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, b = i + di, j + dj
                if not (0 <= a < H and 0 <= b < W) or mask[a, b] != c:
                    pts.append((i, j))
                    break
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def oracle_metrics(pred, gt, c):
    tp = fp = fn = 0
    for s, y in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        tp += s == c and y == c
        fp += s == c and y != c
        fn += s != c and y == c
    d = 1.0 if 2 * tp + fp + fn == 0 else 2.0 * tp / (2 * tp + fp + fn)
    pr = (1.0 if tp + fn == 0 else 0.0) if tp + fp == 0 else tp / (tp + fp)
    bs, by = oracle_boundary(pred, c), oracle_boundary(gt, c)
    if len(bs) == 0 or len(by) == 0:
        return d, pr, None
    dist = np.sqrt(((bs[:, None, :] - by[None, :, :]) ** 2).sum(axis=2))
    return d, pr, (dist.min(axis=1).sum() + dist.min(axis=0).sum()) / (len(bs) + len(by))


def random_mask_pair(rng, size=16, c=3):
    if rng.random() < 0.5:
        return rng.integers(0, c, (size, size)), rng.integers(0, c, (size, size))
    # blocky masks with larger regions and occasional missing classes
    def blocky():
        coarse = rng.integers(0, c, (4, 4))
        m = np.kron(coarse, np.ones((4, 4), dtype=np.int64))
        flip = rng.random((size, size)) < 0.1
        m[flip] = rng.integers(0, c, int(flip.sum()))
        return m
    return blocky(), blocky()


def test_c09_metrics_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    mismatches, worst_ssd, n_ssd = 0, 0.0, 0
    for _ in range(200):
        pred, gt = random_mask_pair(rng)
        for c in (0, 1, 2):
            d0, p0, s0 = oracle_metrics(pred, gt, c)
            mismatches += dsc(pred, gt, c) != d0
            mismatches += precision(pred, gt, c) != p0
            if s0 is None:
                with pytest.raises(SurfaceDistanceError):
                    ssd(pred, gt, c)
            else:
                worst_ssd = max(worst_ssd, abs(ssd(pred, gt, c) - s0))
                n_ssd += 1
    ok = mismatches == 0 and worst_ssd <= 1e-12
    report(9, ok, f"200 pairs x 3 classes: {mismatches} DSC/precision mismatches (exact), "
                  f"max SSD gap {worst_ssd:.1e} over {n_ssd} cases (<= 1e-12) "
                  f"[{time.perf_counter() - t0:.2f} s]")
    assert ok


# -- 10: post-processing ------------------------------------------------------------------

def flood_fill_outside(mask):
    """Background pixels reachable from the border by 4-steps (explicit stack)."""
    H, W = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    stack = [(i, j) for i in range(H) for j in range(W)
             if (i in (0, H - 1) or j in (0, W - 1)) and mask[i, j] == 0]
    while stack:
        i, j = stack.pop()
        if seen[i, j]:
            continue
        seen[i, j] = True
        for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if 0 <= a < H and 0 <= b < W and not seen[a, b] and mask[a, b] == 0:
                stack.append((a, b))
    return seen


def test_c10_donut_and_speckle():
    H = W = 40
    rr, cc = np.mgrid[0:H, 0:W]
    r2 = (rr - 18) ** 2 + (cc - 20) ** 2
    mask = np.zeros((H, W), dtype=np.int64)
    mask[(r2 <= 12 ** 2) & (r2 > 5 ** 2)] = 1
    speckle = [(1, 1), (2, 37), (36, 3), (37, 37), (38, 38), (35, 20)]
    for i, j in speckle:
        mask[i, j] = 1
    # oracle: drop the speckle by hand, then flood fill from the border
    ring = mask.copy()
    for i, j in speckle:
        ring[i, j] = 0
    expected = np.where(flood_fill_outside(ring), 0, 1)
    disk = (r2 <= 12 ** 2).astype(np.int64)
    got_ch, got_hc = postprocess(mask, 1, "ch"), postprocess(mask, 1, "hc")
    ok = (np.array_equal(got_ch, expected) and np.array_equal(got_hc, expected)
          and np.array_equal(expected, disk))
    report(10, ok, f"donut filled and {len(speckle)} speckle pixels removed; output equals the "
                   f"flood-fill oracle for both orders ({int((got_ch != expected).sum())} differing pixels)")
    assert ok


# -- 11 ------------------------------------------------------------------------------------

STATEMENT = ("the published medical benchmark numbers (a-DSC 86.83% SegTHOR, 82.72% HVSMR, "
             "96.69% CHAOS-CT) are NOT reproducible here: the datasets and GPU-scale training "
             "are out of scope, so criteria 1-10 replace them")


def test_c11_non_reproducibility_statement():
    report(11, True, STATEMENT)


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_c"):
            try:
                fn()
            except AssertionError:
                pass
