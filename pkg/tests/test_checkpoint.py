"""Checkpoint file format: bitwise round trips, structural validation."""

import numpy as np
import pytest

from dsq.checkpoint import (load_checkpoint, load_module_arrays,
                            module_arrays, save_checkpoint)
from dsq.model import build_asr_model
from dsq.optim import RAdam


class TestRawFormat:
    def test_round_trip_is_bitwise(self, tmp_path, rng):
        arrays = {
            "a.w": rng.standard_normal((3, 4)),
            "b.bias": rng.standard_normal(5),
            "scalar": np.array(2.5),
            "single": rng.standard_normal((1, 1, 2)),
        }
        cfg = {"d": 8, "name": "tiny", "flag": True}
        path = tmp_path / "m.dsck"
        save_checkpoint(path, cfg, arrays)
        cfg2, arrays2, opt2 = load_checkpoint(path)
        assert cfg2 == cfg
        assert opt2 is None
        assert set(arrays2) == set(arrays)
        for k in arrays:
            assert arrays2[k].shape == arrays[k].shape
            assert np.array_equal(arrays2[k], arrays[k])

    def test_optimizer_table_round_trips(self, tmp_path, rng):
        arrays = {"w": rng.standard_normal(4)}
        opt = {"t": np.array([7.0]), "m.0": rng.standard_normal(4),
               "v.0": rng.standard_normal(4) ** 2}
        path = tmp_path / "m.dsck"
        save_checkpoint(path, {}, arrays, opt)
        _, _, opt2 = load_checkpoint(path)
        assert set(opt2) == set(opt)
        for k in opt:
            assert np.array_equal(opt2[k], opt[k])

    def test_float32_arrays_stay_float32(self, tmp_path, rng):
        arrays = {"w": rng.standard_normal((2, 3)).astype(np.float32)}
        path = tmp_path / "m.dsck"
        save_checkpoint(path, {}, arrays)
        _, arrays2, _ = load_checkpoint(path)
        assert arrays2["w"].dtype == np.float32
        assert np.array_equal(arrays2["w"], arrays["w"])

    def test_foreign_file_rejected(self, tmp_path):
        p = tmp_path / "x.dsck"
        p.write_bytes(b"ELF\x00" + b"\x00" * 32)
        with pytest.raises(ValueError):
            load_checkpoint(p)

    def test_future_version_rejected(self, tmp_path):
        p = tmp_path / "x.dsck"
        p.write_bytes(b"DSCK" + (99).to_bytes(4, "little") + b"\x00" * 8)
        with pytest.raises(ValueError):
            load_checkpoint(p)


class TestModuleArrays:
    def test_model_state_round_trip(self, tmp_path, tiny_model_cfg, tiny_vocab):
        model = build_asr_model(tiny_model_cfg, tiny_vocab.size, seed=4)
        path = tmp_path / "model.dsck"
        save_checkpoint(path, {}, module_arrays(model))
        _, arrays, _ = load_checkpoint(path)

        other = build_asr_model(tiny_model_cfg, tiny_vocab.size, seed=5)
        load_module_arrays(other, arrays)
        for (na, pa), (nb, pb) in zip(model.named_parameters(),
                                      other.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_optimizer_state_survives_the_file(self, tmp_path, tiny_model_cfg,
                                               tiny_vocab, rng):
        model = build_asr_model(tiny_model_cfg, tiny_vocab.size, seed=4)
        params = model.parameters()
        opt = RAdam(params, lr=1e-3)
        for p in params:
            p.grad = rng.standard_normal(p.data.shape)
        opt.step()
        path = tmp_path / "model.dsck"
        save_checkpoint(path, {}, module_arrays(model), opt.state_arrays())
        _, _, opt_arrays = load_checkpoint(path)
        opt2 = RAdam(params, lr=1e-3)
        opt2.load_state_arrays(opt_arrays)
        assert opt2.t == opt.t
        for m1, m2 in zip(opt.m, opt2.m):
            assert np.array_equal(m1, m2)
        for v1, v2 in zip(opt.v, opt2.v):
            assert np.array_equal(v1, v2)

    def test_missing_parameter_rejected(self, tmp_path, tiny_model_cfg,
                                        tiny_vocab):
        model = build_asr_model(tiny_model_cfg, tiny_vocab.size, seed=4)
        arrays = module_arrays(model)
        key = sorted(arrays)[0]
        del arrays[key]
        with pytest.raises(ValueError):
            load_module_arrays(model, arrays)

    def test_shape_mismatch_rejected(self, tiny_model_cfg, tiny_vocab):
        model = build_asr_model(tiny_model_cfg, tiny_vocab.size, seed=4)
        arrays = {k: v.copy() for k, v in module_arrays(model).items()}
        key = sorted(arrays)[0]
        arrays[key] = np.zeros(np.array(arrays[key].shape) + 1)
        with pytest.raises(ValueError):
            load_module_arrays(model, arrays)

    def test_extra_arrays_are_ignored(self, tiny_model_cfg, tiny_vocab, rng):
        model = build_asr_model(tiny_model_cfg, tiny_vocab.size, seed=4)
        arrays = dict(module_arrays(model))
        arrays["featstats.mean"] = rng.standard_normal(4)
        load_module_arrays(model, arrays)
