import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fisheye_depth.errors import ContractViolation, DomainError
from fisheye_depth.geometry import DTYPE, RigidPose
from fisheye_depth.losses import (
    C1,
    C2,
    DecaySchedule,
    Frames,
    LossConfig,
    LossReport,
    auto_mask,
    decay_factor,
    min_reprojection,
    normalize_scale_shift,
    ordinal_distillation_loss,
    ordinal_pair_loss,
    photometric_loss,
    photometric_residual,
    scale_invariant_loss,
    sigmoid_to_depth,
    smoothness_loss,
    ssim_map,
    total_loss,
)
from fisheye_depth.oracle import default_intrinsics, make_snippet, preset_scene
from fisheye_depth.synthesis import DepthGrid

SSIM_CONST = (0.32 + 1e-4) / (0.68 + 1e-4)


def grid(values):
    return DepthGrid.full(torch.tensor(values, dtype=DTYPE))


def brute_ssim(a, b):
    """Per-pixel SSIM from explicit 3x3 windows with reflected indices."""
    H, W = a.shape

    def refl(i, n):
        return -i if i < 0 else (2 * (n - 1) - i if i >= n else i)

    out = torch.zeros(H, W, dtype=DTYPE)
    for y in range(H):
        for x in range(W):
            pa, pb = [], []
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = refl(y + dy, H), refl(x + dx, W)
                    pa.append(float(a[yy, xx]))
                    pb.append(float(b[yy, xx]))
            ma, mb = sum(pa) / 9, sum(pb) / 9
            va = sum(p * p for p in pa) / 9 - ma * ma
            vb = sum(p * p for p in pb) / 9 - mb * mb
            cov = sum(p * q for p, q in zip(pa, pb)) / 9 - ma * mb
            out[y, x] = ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
    return out


# --- SSIM and residual ---------------------------------------------------------------------

def test_ssim_identical_is_one():
    a = torch.rand(6, 7, dtype=DTYPE)
    assert torch.allclose(ssim_map(a, a), torch.ones(6, 7, dtype=DTYPE), atol=1e-12)


def test_ssim_constants_hand_value():
    s = ssim_map(torch.full((4, 4), 0.2, dtype=DTYPE), torch.full((4, 4), 0.8, dtype=DTYPE))
    assert float((s - SSIM_CONST).abs().max()) < 1e-12
    assert SSIM_CONST == pytest.approx(0.4707, abs=1e-4)


def test_ssim_matches_window_oracle():
    g = torch.Generator().manual_seed(4)
    a, b = torch.rand(5, 6, generator=g, dtype=DTYPE), torch.rand(5, 6, generator=g, dtype=DTYPE)
    assert float((ssim_map(a, b) - brute_ssim(a, b)).abs().max()) < 1e-12


def test_ssim_inverted_pattern_negative():
    v, u = torch.meshgrid(torch.arange(6), torch.arange(6), indexing="ij")
    b = torch.where((u + v) % 2 == 0, 0.8, 0.2).to(DTYPE)
    a = 1 - b
    ref = brute_ssim(a, b)
    assert bool((ref < 0).all())
    assert float((ssim_map(a, b) - ref).abs().max()) < 1e-12


def test_ssim_extent_mismatch():
    with pytest.raises(ContractViolation):
        ssim_map(torch.zeros(3, 3), torch.zeros(3, 4))


def test_residual_values():
    a = torch.rand(5, 5, dtype=DTYPE)
    assert float(photometric_residual(a, a).abs().max()) == 0.0
    r = photometric_residual(torch.full((3, 3), 0.2, dtype=DTYPE), torch.full((3, 3), 0.8, dtype=DTYPE), 0.85)
    expect = 0.85 * (1 - SSIM_CONST) / 2 + 0.15 * 0.6
    assert float((r - expect).abs().max()) < 1e-12
    assert expect == pytest.approx(0.3150, abs=1e-4)
    b = torch.rand(5, 5, dtype=DTYPE)
    assert torch.equal(photometric_residual(a, b, 0.0), (a - b).abs())


# --- minimum reprojection and auto-mask ---------------------------------------------------

def test_min_reprojection_examples():
    m = torch.tensor([[0.3, 0.5]], dtype=DTYPE)
    out, ok = min_reprojection([m])
    assert torch.equal(out, m) and bool(ok.all())
    out, _ = min_reprojection([torch.tensor([[0.3]]), torch.tensor([[0.1]])])
    assert float(out) == pytest.approx(0.1)
    out, ok = min_reprojection([torch.tensor([[0.3]]), torch.tensor([[0.1]])],
                               [torch.tensor([[True]]), torch.tensor([[False]])])
    assert float(out) == pytest.approx(0.3) and bool(ok)


def test_auto_mask_examples():
    r = torch.rand(4, 4, dtype=DTYPE)
    assert not bool(auto_mask([r, r], [r, r]).any())
    keep = auto_mask([torch.tensor([[0.01]])], [torch.tensor([[0.2]])])
    assert bool(keep)


def test_auto_mask_brute_force():
    g = torch.Generator().manual_seed(7)
    syn = [torch.rand(8, 8, generator=g, dtype=DTYPE) for _ in range(2)]
    ident = [torch.rand(8, 8, generator=g, dtype=DTYPE) for _ in range(2)]
    smask = [torch.rand(8, 8, generator=g) > 0.2 for _ in range(2)]
    imask = [torch.rand(8, 8, generator=g) > 0.2 for _ in range(2)]
    keep = auto_mask(syn, ident, smask, imask)
    for y in range(8):
        for x in range(8):
            s = [float(m[y, x]) for m, k in zip(syn, smask) if k[y, x]]
            i = [float(m[y, x]) for m, k in zip(ident, imask) if k[y, x]]
            expect = bool(s) and min(s) < (min(i) if i else math.inf)
            assert bool(keep[y, x]) == expect


# --- smoothness ---------------------------------------------------------------------------

def test_smoothness_constant_disp():
    assert float(smoothness_loss(torch.full((3, 3), 2.0), torch.rand(3, 3))) == 0.0


def test_smoothness_hand_values():
    disp = torch.tensor([[1.0, 2.0, 3.0]] * 3, dtype=DTYPE)
    # mean 2: normalized steps of 0.5 along x, none along y
    assert float(smoothness_loss(disp, torch.zeros(3, 3, dtype=DTYPE))) == pytest.approx(0.5, abs=1e-15)
    # normalized ramp with slope 1
    ramp = torch.tensor([[0.0, 1.0, 2.0]] * 3, dtype=DTYPE)
    assert float(smoothness_loss(ramp, torch.zeros(3, 3, dtype=DTYPE))) == pytest.approx(1.0, abs=1e-15)
    # intensity edge between columns 0 and 1 damps that step by exp(-1)
    img = torch.tensor([[0.0, 1.0, 1.0]] * 3, dtype=DTYPE)
    expect = (0.5 * math.exp(-1) + 0.5) / 2
    assert float(smoothness_loss(disp, img)) == pytest.approx(expect, abs=1e-15)


def test_smoothness_no_valid_pixels():
    with pytest.raises(ContractViolation):
        smoothness_loss(torch.ones(3, 3), torch.ones(3, 3), torch.zeros(3, 3, dtype=torch.bool))


def test_smoothness_batched():
    d = torch.rand(3, 5, 6, dtype=DTYPE) + 0.5
    img = torch.rand(5, 6, dtype=DTYPE)
    out = smoothness_loss(d, img)
    assert out.shape == (3,)
    for i in range(3):
        assert float(out[i]) == pytest.approx(float(smoothness_loss(d[i], img)), abs=1e-15)


# --- distillation -------------------------------------------------------------------------

def test_ordinal_pair_hand_values():
    assert float(ordinal_pair_loss(3.0, 1.0, 2.0, 1.0)) == pytest.approx(math.log1p(math.exp(-2)), abs=1e-12)
    assert float(ordinal_pair_loss(3.0, 1.0, 2.0, 1.0)) == pytest.approx(0.126928, abs=1e-6)
    assert float(ordinal_pair_loss(1.0, 3.0, 2.0, 1.0)) == pytest.approx(2.126928, abs=1e-6)
    assert float(ordinal_pair_loss(1.0, 1.0, 1.0, 1.0)) == 0.0
    # closer branch and the "otherwise" branch
    assert float(ordinal_pair_loss(1.0, 3.0, 1.0, 2.0)) == pytest.approx(math.log1p(math.exp(-2)), abs=1e-12)
    assert float(ordinal_pair_loss(1.5, 1.0, 1.05, 1.0)) == pytest.approx(0.5, abs=1e-15)


def test_ordinal_pair_clamps_exponent():
    v = float(ordinal_pair_loss(0.0, 1000.0, 2.0, 1.0))
    assert math.isfinite(v) and v == pytest.approx(math.log1p(math.exp(30)), rel=1e-12)


def test_ordinal_distillation_grids():
    c = grid([[2.0, 2.0], [2.0, 2.0]])
    assert float(ordinal_distillation_loss(c, c)) == 0.0
    out = ordinal_distillation_loss(grid([[1.0, 3.0]]), grid([[1.0, 2.0]]))
    # pixel (0, 1) against its left neighbour: teacher 2 > 1.1 * 1, student 3 - 1 = 2
    assert float(out) == pytest.approx(0.126928, abs=1e-6)
    with pytest.raises(ContractViolation):
        ordinal_distillation_loss(grid([[1.0]]), grid([[1.0]]))


def test_normalize_scale_shift():
    out = normalize_scale_shift(grid([1.0, 2.0, 3.0]))
    assert out.tolist() == pytest.approx([-1.5, 0.0, 1.5], abs=1e-15)
    assert torch.allclose(normalize_scale_shift(grid([2.0, 4.5, 7.0])), out, atol=1e-15)
    with pytest.raises(ContractViolation):
        normalize_scale_shift(grid([2.0, 2.0, 2.0]))


def test_scale_invariant_examples():
    # median 2 and mean absolute deviation 1 give [-1, 0, 2] for the second map
    assert float(scale_invariant_loss(grid([1.0, 2.0, 3.0]), grid([1.0, 2.0, 4.0]))) == pytest.approx(1 / 3, abs=1e-15)
    assert normalize_scale_shift(grid([1.0, 2.0, 4.0])).tolist() == [-1.0, 0.0, 2.0]
    d = grid([[1.0, 5.0], [2.0, 9.0]])
    assert float(scale_invariant_loss(DepthGrid.full(3 * d.depth), d)) < 1e-15
    assert float(scale_invariant_loss(DepthGrid.full(d.depth + 4), d)) < 1e-15


# --- schedule and depth map ---------------------------------------------------------------

def test_decay_factor_values():
    assert decay_factor(0) == 1.0
    assert decay_factor(10000) == pytest.approx(0.81, abs=1e-15)
    assert decay_factor(25000) == pytest.approx(0.6561, abs=1e-15)
    assert decay_factor(15000, DecaySchedule(continuous=True)) == pytest.approx(0.9**3, abs=1e-15)
    with pytest.raises(DomainError):
        decay_factor(-1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100000), st.integers(0, 100000), st.floats(0.5, 1.0), st.integers(1, 20000))
def test_decay_non_increasing(a, b, base, period):
    sched = DecaySchedule(base, period)
    lo, hi = sorted((a, b))
    assert decay_factor(hi, sched) <= decay_factor(lo, sched)
    assert decay_factor(lo % period, sched) == 1.0


def test_sigmoid_to_depth_values():
    assert float(sigmoid_to_depth(0.0)) == pytest.approx(100.0, abs=1e-12)
    assert float(sigmoid_to_depth(1.0)) == pytest.approx(0.1, abs=1e-15)
    assert float(sigmoid_to_depth(0.5)) == pytest.approx(1 / 5.005, abs=1e-15)
    assert float(sigmoid_to_depth(0.5)) == pytest.approx(0.199800, abs=1e-6)
    for bad in (-0.01, 1.01, math.nan):
        with pytest.raises(DomainError):
            sigmoid_to_depth(bad)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_sigmoid_to_depth_monotone(a, b):
    da, db = float(sigmoid_to_depth(a)), float(sigmoid_to_depth(b))
    assert 0.1 - 1e-12 <= da <= 100 + 1e-9
    if b - a > 1e-12:
        assert da > db


# --- properties ---------------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_components_finite_and_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.rand(5, 6, generator=g, dtype=DTYPE), torch.rand(5, 6, generator=g, dtype=DTYPE)
    r = photometric_residual(a, b)
    assert bool(torch.isfinite(r).all()) and float(r.min()) >= -1e-15
    assert float(photometric_residual(a, a).abs().max()) == 0.0
    maps = [r, photometric_residual(b, a.flip(0)), torch.rand(5, 6, generator=g, dtype=DTYPE)]
    m, _ = min_reprojection(maps)
    for x in maps:
        assert bool((m <= x).all())
    d1 = DepthGrid.full(torch.rand(5, 6, generator=g, dtype=DTYPE) + 0.1)
    d2 = DepthGrid.full(torch.rand(5, 6, generator=g, dtype=DTYPE) + 0.1)
    for v in (smoothness_loss(1 / d1.depth, a), ordinal_distillation_loss(d1, d2), scale_invariant_loss(d1, d2)):
        assert math.isfinite(float(v)) and float(v) >= 0


# --- total loss ---------------------------------------------------------------------------

def _small_intr():
    return default_intrinsics(32, 20)


def test_total_loss_identical_frames_is_zero():
    intr = _small_intr()
    img = torch.rand(20, 32, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    for domain in ("rectified", "fisheye"):
        cfg = LossConfig(w_sm=0, w_od=0, w_sd=0, scales=1, domain=domain)
        frames = Frames(img, [img, img], [RigidPose.identity()] * 2, intr, cfg)
        total, report = total_loss(frames, [torch.full((20, 32), 2.0, dtype=DTYPE)], keep_maps=True)
        assert 0.0 <= float(total) < 1e-12 and report.photometric == float(total)
        # auto-masking removed everything; the fallback kept the unmasked minimum
        assert bool(report.maps["mask"].any())


@pytest.mark.parametrize("domain", ["rectified", "fisheye"])
def test_total_loss_oracle_ground_truth(domain):
    snip = make_snippet(preset_scene("textured"), default_intrinsics())
    cfg = LossConfig(w_sm=0, w_od=0, w_sd=0, scales=1, domain=domain)
    frames = Frames(snip.target, snip.sources, snip.relative_poses, default_intrinsics(), cfg,
                    fisheye_valid=snip.gt_depth.valid)
    total, report = total_loss(frames, [snip.gt_depth.depth])
    assert float(total) < 0.01
    # a wrong depth is clearly worse
    worse, _ = total_loss(frames, [snip.gt_depth.depth * 0.5])
    assert float(worse) > 2 * float(total)


def test_total_loss_distillation_decay():
    snip = make_snippet(preset_scene("textured"), _small_intr())
    cfg = LossConfig(w_sm=0, w_od=1, w_sd=1, scales=1)
    frames = Frames(snip.target, snip.sources, snip.relative_poses, _small_intr(), cfg)
    teacher = DepthGrid.full(torch.rand(20, 32, generator=torch.Generator().manual_seed(1), dtype=DTYPE) + 0.5)
    depth = [torch.full((20, 32), 3.0, dtype=DTYPE) + torch.rand(20, 32, dtype=DTYPE)]
    _, r0 = total_loss(frames, depth, teacher, steps=0)
    _, r1 = total_loss(frames, depth, teacher, steps=10000)
    assert r0.ordinal == r1.ordinal and r0.photometric == r1.photometric
    d0, d1 = r0.total - r0.photometric, r1.total - r1.photometric
    assert d0 > 0 and r1.decay == pytest.approx(0.81, abs=1e-15)
    assert d1 == pytest.approx(0.81 * d0, rel=1e-12)


def test_total_loss_scale_averaging():
    snip = make_snippet(preset_scene("textured"), _small_intr())
    d = snip.gt_depth.depth
    one = Frames(snip.target, snip.sources, snip.relative_poses, _small_intr(), LossConfig(w_od=0, w_sd=0, scales=1))
    two = Frames(snip.target, snip.sources, snip.relative_poses, _small_intr(), LossConfig(w_od=0, w_sd=0, scales=2))
    _, r1 = total_loss(one, [d])
    _, r2 = total_loss(two, [d, d])
    assert r2.photometric == pytest.approx(r1.photometric, rel=1e-12)
    # levels weighted 1 and 1/2, then averaged
    assert r2.smoothness == pytest.approx(0.75 * r1.smoothness, rel=1e-12)
    with pytest.raises(ContractViolation):
        total_loss(two, [d])


def test_photometric_loss_matches_total():
    snip = make_snippet(preset_scene("mixed"), _small_intr())
    frames = Frames(snip.target, snip.sources, snip.relative_poses, _small_intr(),
                    LossConfig(w_sm=0, w_od=0, w_sd=0, scales=1))
    d = snip.gt_depth.depth * 1.1
    ph, _ = photometric_loss(frames, DepthGrid.full(d))
    _, report = total_loss(frames, [d])
    assert float(ph) == pytest.approx(report.photometric, rel=1e-12)


def test_report_json_round_trip():
    r = LossReport(0.1, 0.2, 0.3, 0.4, 1.0, 7, 0.81)
    line = r.to_json()
    assert "\n" not in line
    assert LossReport.from_json(line) == r


def test_loss_config_validation():
    with pytest.raises(ContractViolation):
        LossConfig(alpha=0.9, beta=1.1)
    with pytest.raises(ContractViolation):
        LossConfig(domain="spherical")
    with pytest.raises(ContractViolation):
        DecaySchedule(base=1.5)
