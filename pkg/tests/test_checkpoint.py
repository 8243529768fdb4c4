import numpy as np
import pytest

from osrkit import checkpoint as C
from osrkit import model as M
from osrkit import openset as O
from osrkit.data import NormStats
from osrkit.errors import FormatError

CFG = M.ModelConfig(28, 28, 1, 14, 8, 2, 2, 3)
STATS = NormStats(mean=0.1307, std=0.3081)


def build_artifacts(seed=1):
    vit = M.init_vit(CFG, seed=seed)
    head = O.init_detection_head(CFG, seed=seed + 1)
    centers = O.ClassCenters(np.random.default_rng(seed).normal(size=(3, 8)).astype(np.float32))
    return vit, head, centers


class TestRoundTrip:
    def test_values_survive(self, tmp_path):
        vit, head, centers = build_artifacts()
        path = tmp_path / "model.ckpt"
        C.save_checkpoint(path, CFG, vit, head, centers, init_seed=1, head_seed=2,
                          norm_stats=STATS, stage="final")
        loaded = C.load_checkpoint(path)
        assert loaded.config == CFG
        assert loaded.stage == "final"
        assert loaded.init_seed == 1 and loaded.head_seed == 2
        assert loaded.norm_stats == STATS
        for (name, a), (_, b) in zip(vit.named_parameters(), loaded.vit.named_parameters()):
            assert np.array_equal(a.data, b.data), name
        assert np.array_equal(loaded.head.weight.data, head.weight.data)
        assert np.array_equal(loaded.centers.centers, centers.centers)

    def test_save_load_save_is_bit_exact(self, tmp_path):
        vit, head, centers = build_artifacts()
        first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        C.save_checkpoint(first, CFG, vit, head, centers, init_seed=1, head_seed=2,
                          norm_stats=STATS, stage="final")
        loaded = C.load_checkpoint(first)
        C.save_checkpoint(second, loaded.config, loaded.vit, loaded.head, loaded.centers,
                          init_seed=loaded.init_seed, head_seed=loaded.head_seed,
                          norm_stats=loaded.norm_stats, stage=loaded.stage)
        assert first.read_bytes() == second.read_bytes()

    def test_stage1_checkpoint_omits_head(self, tmp_path):
        vit, _, _ = build_artifacts()
        path = tmp_path / "s1.ckpt"
        C.save_checkpoint(path, CFG, vit, init_seed=5, norm_stats=STATS, stage="stage1")
        loaded = C.load_checkpoint(path)
        assert loaded.head is None and loaded.centers is None
        assert loaded.head_seed is None

    def test_loaded_params_are_trainable(self, tmp_path):
        vit, head, centers = build_artifacts()
        path = tmp_path / "m.ckpt"
        C.save_checkpoint(path, CFG, vit, head, centers, init_seed=1,
                          norm_stats=STATS, stage="final")
        loaded = C.load_checkpoint(path)
        for _, p in loaded.vit.named_parameters():
            assert p.requires_grad and p.grad is not None


class TestCorruption:
    @pytest.fixture
    def saved(self, tmp_path):
        vit, head, centers = build_artifacts()
        path = tmp_path / "m.ckpt"
        C.save_checkpoint(path, CFG, vit, head, centers, init_seed=1,
                          norm_stats=STATS, stage="final")
        return path

    def test_bad_magic(self, saved, tmp_path):
        raw = bytearray(saved.read_bytes())
        raw[0] ^= 0xFF
        bad = tmp_path / "bad"
        bad.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            C.load_checkpoint(bad)

    def test_wrong_version(self, saved, tmp_path):
        raw = bytearray(saved.read_bytes())
        raw[8] = 99
        bad = tmp_path / "bad"
        bad.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            C.load_checkpoint(bad)

    def test_truncated_blob(self, saved, tmp_path):
        raw = saved.read_bytes()
        bad = tmp_path / "bad"
        bad.write_bytes(raw[:-10])
        with pytest.raises(FormatError, match="truncated"):
            C.load_checkpoint(bad)

    def test_trailing_garbage(self, saved, tmp_path):
        bad = tmp_path / "bad"
        bad.write_bytes(saved.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            C.load_checkpoint(bad)
