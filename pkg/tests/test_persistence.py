import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from unept.checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from unept.config import ConfigError, RunConfig, parse_config, serialize_config


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        text = serialize_config(cfg)
        assert parse_config(text) == cfg
        assert serialize_config(parse_config(text)) == text

    def test_comments_and_spacing(self):
        cfg = parse_config("# header\n\n  lr=0.003   # tuned\nsteps = 7\nscene_kinds = disc , rectangle\n")
        assert cfg.lr == 0.003 and cfg.steps == 7
        assert cfg.scene_kinds == ("disc", "rectangle")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key 'lerning_rate'"):
            parse_config("lerning_rate = 0.1\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config("lr = 0.1\nlr = 0.2\n")

    @pytest.mark.parametrize("text", ["steps = many", "augment = maybe", "just words", "strides = 8,x"])
    def test_bad_values(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_invalid_model_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("d_model = 30\n")

    @settings(max_examples=40, deadline=None)
    @given(lr=st.floats(1e-8, 1.0), decay=st.floats(0.0, 0.1), steps=st.integers(0, 10**6),
           seed=st.integers(0, 2**64 - 1), augment=st.booleans(),
           dataset=st.text(st.characters(whitelist_categories=("L", "N"), whitelist_characters="/_-."), max_size=20))
    def test_random_round_trip(self, lr, decay, steps, seed, augment, dataset):
        cfg = RunConfig(lr=lr, weight_decay=decay, steps=steps, seed=seed, augment=augment, dataset=dataset)
        assert parse_config(serialize_config(cfg)) == cfg


class TestCheckpoint:
    def test_header_layout(self):
        buf = encode_checkpoint({"w": np.array([[1.0, 2.0]])}, step=7)
        assert buf[:4] == b"EPT1"
        assert struct.unpack("<IQI", buf[4:20]) == (1, 7, 1)
        assert struct.unpack("<I", buf[20:24]) == (1,)
        assert buf[24:25] == b"w"
        assert struct.unpack("<IQQ", buf[25:45]) == (2, 1, 2)
        assert np.frombuffer(buf[45:], dtype="<f8").tolist() == [1.0, 2.0]

    def test_scalar_and_empty(self):
        tensors = {"s": np.array(3.5), "e": np.zeros((0, 4))}
        step, back = decode_checkpoint(encode_checkpoint(tensors, 0))
        assert back["s"].shape == () and back["s"] == 3.5 and back["e"].shape == (0, 4)

    @settings(max_examples=30, deadline=None)
    @given(st.dictionaries(st.text(min_size=1, max_size=12),
                           hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)),
                           max_size=5),
           st.integers(0, 2**64 - 1))
    def test_round_trip_bitwise(self, tensors, step):
        buf = encode_checkpoint(tensors, step)
        got_step, back = decode_checkpoint(buf)
        assert got_step == step and list(back) == list(tensors)
        for name, a in tensors.items():
            assert back[name].shape == a.shape
            assert back[name].tobytes() == np.ascontiguousarray(a).tobytes()
        assert encode_checkpoint(back, got_step) == buf

    def test_file_round_trip(self, tmp_path, rng):
        tensors = {"a.b": rng.standard_normal((3, 2)), "é": rng.standard_normal(4)}
        save_checkpoint(tmp_path / "x.ept", tensors, 12)
        step, back = load_checkpoint(tmp_path / "x.ept")
        assert step == 12
        for k in tensors:
            assert back[k].tobytes() == tensors[k].tobytes()

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XPT1" + b[4:],
        lambda b: b[:-3],
        lambda b: b + b"\0",
        lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
    ])
    def test_corrupt_rejected(self, mutate):
        buf = encode_checkpoint({"w": np.ones(3)}, 1)
        with pytest.raises(CheckpointError):
            decode_checkpoint(mutate(buf))
