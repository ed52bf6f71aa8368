import struct
import zlib

import numpy as np
import pytest

from ccm import checkpoint as ckpt
from ccm.checkpoint import Checkpoint, CheckpointError
from ccm.config import SCHEMA, ConfigError, RunConfig, desk_profile


def sample_checkpoint():
    rng = np.random.default_rng(0)
    gen = np.random.default_rng(42)
    gen.standard_normal(3)
    return Checkpoint(
        config_hash=bytes(range(32)), k=17, config_text="seed = 1\n",
        arrays={"param.a": rng.standard_normal((2, 3)).astype(np.float32),
                "param.scalar": np.array(1.5, np.float32),
                "adam.m.a": np.zeros((2, 3), np.float32)},
        opt_name="adam", opt_steps=17, rng_state=gen.bit_generator.state)


def test_round_trip_is_bitwise_stable(tmp_path):
    ck = sample_checkpoint()
    raw = ckpt.to_bytes(ck)
    back = ckpt.from_bytes(raw)
    assert ckpt.to_bytes(back) == raw
    assert back.k == 17 and back.opt_steps == 17 and back.config_text == "seed = 1\n"
    for k, v in ck.arrays.items():
        assert back.arrays[k].tobytes() == v.tobytes() and back.arrays[k].shape == v.shape
    path = ckpt.save(ck, tmp_path / "sub" / "x.ccmk")
    assert path.read_bytes() == raw
    assert ckpt.to_bytes(ckpt.load(path)) == raw


def test_rng_state_resumes_the_stream():
    ck = ckpt.from_bytes(ckpt.to_bytes(sample_checkpoint()))
    restored = np.random.default_rng()
    restored.bit_generator.state = ck.rng_state
    reference = np.random.default_rng(42)
    reference.standard_normal(3)
    assert restored.standard_normal(5).tobytes() == reference.standard_normal(5).tobytes()


def test_header_layout():
    raw = ckpt.to_bytes(sample_checkpoint())
    assert raw[:4] == b"CCMK"
    assert struct.unpack_from("<I", raw, 4) == (1,)
    assert raw[8:40] == bytes(range(32))
    assert struct.unpack_from("<QQ", raw, 40) == (17, 17)
    assert struct.unpack_from("<I", raw, len(raw) - 4)[0] == zlib.crc32(raw[:-4])


def test_group_strips_prefix():
    assert set(sample_checkpoint().group("param.")) == {"a", "scalar"}


@pytest.mark.parametrize("mutate", [
    lambda b: b[:-10],
    lambda b: b[:60] + bytes([b[60] ^ 0xFF]) + b[61:],
    lambda b: b"XXXX" + b[4:],
    lambda b: b"",
])
def test_corruption_is_detected(mutate):
    raw = ckpt.to_bytes(sample_checkpoint())
    with pytest.raises(CheckpointError):
        ckpt.from_bytes(mutate(raw))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        ckpt.load(tmp_path / "nope.ccmk")


# -- config ---------------------------------------------------------------------------------


def test_defaults_cover_every_key():
    cfg = RunConfig.from_text("", env={})
    assert set(cfg.values) == set(SCHEMA)
    cfg.validate(need_data=False)
    assert cfg.get("steps.s1") == 1280 and cfg.get("train.iterations") == 5000


def test_parse_comments_and_overrides():
    cfg = RunConfig.from_text("# comment\nseed = 3\nnet.channel_mults = 1, 2, 2\n",
                              {"seed": "4"}, env={})
    assert cfg.get("seed") == 4
    assert cfg.get("net.channel_mults") == (1, 2, 2)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="train.learning_rate"):
        RunConfig.from_text("train.learning_rate = 0.1\n", env={})


def test_malformed_line_and_value():
    with pytest.raises(ConfigError, match="line 1"):
        RunConfig.from_text("seed 3\n", env={})
    with pytest.raises(ConfigError, match="train.lr"):
        RunConfig.from_text("train.lr = fast\n", env={})


def test_seed_env_fallback():
    assert RunConfig.from_text("", env={"CCM_SEED": "9"}).get("seed") == 9
    assert RunConfig.from_text("seed = 2\n", env={"CCM_SEED": "9"}).get("seed") == 2


def test_hash_ignores_bookkeeping_keys():
    a = RunConfig.from_text("out_dir = a\ntrain.log_every = 10\n", env={})
    b = RunConfig.from_text("out_dir = b\n", env={})
    c = RunConfig.from_text("train.lr = 0.01\n", env={})
    assert a.hash() == b.hash() != c.hash()
    assert len(a.hash()) == 32


def test_canonical_round_trip():
    cfg = RunConfig.from_text("seed = 5\ntask = synth-modality\n", env={})
    again = RunConfig.from_text(cfg.canonical(), env={})
    assert again.values == cfg.values and again.hash() == cfg.hash()


def test_typed_views():
    cfg = RunConfig.from_text("", desk_profile(), env={})
    assert cfg.train().step_cfg.s1 == 160
    assert cfg.net().in_channels == 6
    assert cfg.schedule().sigma_max == 80.0
    assert cfg.crop().mode == "none"


@pytest.mark.parametrize("text,key", [
    ("task = imagenet\n", "task"),
    ("data.count = 0\n", "data.count"),
    ("steps.s0 = 2000\n", "steps"),
    ("crop.mode = random\n", "crop"),
    ("train.optimizer = lbfgs\n", "train"),
    ("task = paired-folder\n", "data.dir_v"),
])
def test_validation_names_the_key(text, key):
    cfg = RunConfig.from_text(text, env={})
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        cfg.validate()
