import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccm import data, metrics
from ccm.data import PairedSample
from ccm.metrics import MetricReport, evaluate, psnr, ssim

from reference_metrics import psnr_ref, ssim_ref


def random_pair(seed, shape=(3, 16, 16)):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, shape)
    b = np.clip(a + rng.normal(0, rng.uniform(0.02, 0.3), shape), 0, 1)
    return a, b


def test_psnr_identical_is_infinite():
    a = np.random.default_rng(0).uniform(0, 1, (3, 8, 8))
    assert psnr(a, a) == math.inf


def test_psnr_constant_offset():
    a = np.full((3, 8, 8), 0.5)
    # 0.6 - 0.5 is not exactly 0.1 in binary, hence the tolerance
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-12)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


def test_psnr_matches_reference():
    for seed in range(50):
        a, b = random_pair(seed)
        assert abs(psnr(a, b) - psnr_ref(a, b)) < 1e-6


def test_ssim_matches_reference():
    for seed in range(50):
        a, b = random_pair(seed)
        assert abs(ssim(a, b) - ssim_ref(a, b)) < 1e-4


def test_ssim_self_is_one():
    for seed in range(5):
        a, _ = random_pair(seed)
        assert ssim(a, a) == 1.0
        assert ssim(a, a, mode="channel") == 1.0


def test_ssim_negated_structure_is_negative():
    # local window means must vanish too, or the luminance term flips sign as well
    a = np.indices((16, 16)).sum(axis=0) % 2 - 0.5
    assert ssim(a, -a, data_range=1.0) < 0
    assert ssim_ref(a, -a, peak=1.0) < 0


def test_ssim_too_small():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((3, 10, 10)), np.zeros((3, 10, 10)))


def test_ssim_channel_mode_is_channel_mean():
    a, b = random_pair(3)
    assert ssim(a, b, mode="channel") == pytest.approx(np.mean([ssim(x, y) for x, y in zip(a, b)]), abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.01, 100.0))
def test_metric_symmetry_and_scaling(seed, scale):
    a, b = random_pair(seed, (3, 12, 12))
    assert psnr(a, b) == psnr(b, a)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    assert abs(psnr(a * scale, b * scale, max_val=scale) - psnr(a, b)) < 1e-9


# -- evaluation -------------------------------------------------------------------------


def dataset(n=4, size=16):
    return data.synth_lowlight(9, n, size)


def oracle_for(ds):
    lookup = {p.v.tobytes(): p.r for p in ds}
    return lambda v, seed: lookup[np.asarray(v, np.float32).tobytes()]


def test_perfect_predictor():
    ds = dataset()
    rep = evaluate(ds, oracle_for(ds))
    assert rep.mean_ssim == 1.0 and rep.mean_psnr == math.inf


def test_single_item_mean_is_item_value():
    ds = dataset(1)
    rep = evaluate(ds, lambda v, s: v)
    assert rep.mean_psnr == rep.psnr[0] and rep.mean_ssim == rep.ssim[0]


def test_means_are_averages_and_order_invariant():
    ds = dataset(6)

    def noisy(v, seed):
        return np.clip(v + np.random.default_rng(seed).normal(0, 0.1, v.shape), -1, 1)

    a = evaluate(ds, noisy, seed=3)
    b = evaluate(list(reversed(ds)), noisy, seed=3)
    assert a.mean_psnr == b.mean_psnr and a.mean_ssim == b.mean_ssim
    assert a.mean_psnr == pytest.approx(np.mean(a.psnr), rel=1e-14)


def test_eval_modes_resize_and_crop():
    ds = dataset(2, 32)
    seen = []

    def record(v, seed):
        seen.append(v.shape)
        return v

    evaluate(ds, record, mode="crop", size=16)
    evaluate(ds, record, mode="full-resize", size=16)
    assert seen == [(3, 16, 16)] * 4
    with pytest.raises(ValueError):
        evaluate(ds, record, mode="tiles")
    with pytest.raises(ValueError):
        evaluate([], record)


def test_report_text_layout():
    rep = MetricReport(["a", "b"], [10.0, math.inf], [0.5, 1.0], "crop")
    lines = rep.text().splitlines()
    assert lines[0] == "# eval mode=crop count=2"
    assert lines[1] == "# mean_psnr_db=inf mean_ssim=0.750000"
    assert lines[2] == "id\tpsnr_db\tssim"
    assert lines[3:] == ["a\t10.000000\t0.500000", "b\tinf\t1.000000"]


def test_item_seed_depends_on_id_only():
    assert metrics.item_seed(1, "x") == metrics.item_seed(1, "x")
    assert metrics.item_seed(1, "x") != metrics.item_seed(1, "y")


def test_ssim_bounds_on_dataset_pairs():
    for p in dataset(5):
        s = ssim(data.to_unit(p.v), data.to_unit(p.r))
        assert -1 <= s <= 1


def test_paired_sample_ids_in_report():
    ds = [PairedSample(np.zeros((3, 16, 16)), np.zeros((3, 16, 16)), "only")]
    assert evaluate(ds, lambda v, s: v).ids == ["only"]
