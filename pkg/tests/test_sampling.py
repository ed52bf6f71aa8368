import hashlib

import numpy as np
import pytest

from ccm.consistency import ConsistencyModel
from ccm.network import UNetConfig
from ccm.sampling import SampleRequest, initial_noise, sample_batch, sample_single_step
from ccm.schedule import NoiseSchedule
from ccm.tensor import ShapeError

SCHED = NoiseSchedule()
TINY = UNetConfig(out_channels=3, base_width=8, channel_mults=(1, 2), depth=1, time_embed_dim=8)


def trained_like(seed=0):
    model = ConsistencyModel.create(TINY, SCHED, seed=seed)
    rng = np.random.default_rng(seed + 5)
    for p in model.params.values():
        p.data = (p.data + 0.2 * rng.standard_normal(p.shape)).astype(np.float32)
    return model


def checksum(model):
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(model.params[k].data.tobytes())
        h.update(model.teacher_params[k].data.tobytes())
    return h.hexdigest()


def condition(seed=0, size=8):
    return np.random.default_rng(seed).uniform(-1, 1, (3, size, size)).astype(np.float32)


def test_deterministic_given_seed():
    model = trained_like()
    a = sample_single_step(model, SampleRequest(condition(), seed=3))
    b = sample_single_step(model, SampleRequest(condition(), seed=3))
    assert a.tobytes() == b.tobytes()


def test_untrained_model_closed_form():
    model = ConsistencyModel.create(TINY, SCHED, seed=0, dtype=np.float64)
    z = initial_noise((3, 8, 8), 11).astype(np.float64)
    a_skip = 0.25 / ((80.0 - 0.002) ** 2 + 0.25)
    expected = np.clip(a_skip * 80.0 * z, -1, 1)
    got = sample_single_step(model, SampleRequest(condition(), seed=11))
    np.testing.assert_allclose(got, expected, rtol=1e-6, atol=1e-7)


def test_output_shape_and_range():
    model = trained_like()
    out = sample_single_step(model, SampleRequest(condition(size=16), seed=0))
    assert out.shape == (3, 16, 16)
    assert out.min() >= -1 and out.max() <= 1
    raw = sample_single_step(model, SampleRequest(condition(size=16), seed=0, clamp=False))
    np.testing.assert_array_equal(np.clip(raw, -1, 1), out)


def test_sampling_does_not_touch_parameters():
    model = trained_like()
    before = checksum(model)
    sample_batch(model, [condition(i) for i in range(3)], seed=0)
    assert checksum(model) == before


def test_bad_extent_is_rejected():
    model = trained_like()
    with pytest.raises(ShapeError):
        sample_single_step(model, SampleRequest(np.zeros((3, 7, 7), np.float32)))
    with pytest.raises(ShapeError):
        sample_single_step(model, SampleRequest(np.zeros((1, 8, 8), np.float32)))


def test_batch_matches_single_steps():
    model = trained_like()
    conds = [condition(i) for i in range(3)]
    outs = sample_batch(model, conds, seed=40)
    for i, (v, out) in enumerate(zip(conds, outs)):
        assert out.tobytes() == sample_single_step(model, SampleRequest(v, seed=40 + i)).tobytes()


def test_identical_conditions_get_different_noise():
    model = trained_like()
    a, b = sample_batch(model, [condition(), condition()], seed=0)
    assert not np.array_equal(a, b)


def test_empty_and_mixed_batches():
    model = trained_like()
    assert sample_batch(model, [], seed=0) == []
    with pytest.raises(ShapeError):
        sample_batch(model, [condition(size=8), condition(size=16)], seed=0)
