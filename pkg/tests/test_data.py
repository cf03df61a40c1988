"""Containers, synthetic data, splits, checkpoints."""

import numpy as np
import pytest

from hvt import data as D
from hvt.errors import (CheckpointCRCError, CheckpointMagicError,
                        CheckpointManifestError, CheckpointVersionError,
                        ContainerFormatError, InputError)
from hvt.model import HVTConfig, init_params, param_shapes
from hvt.ssl import linear_probe
from hvt.tensor import RngStream


class TestImageContainer:
    def test_save_load_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        c = D.ImageContainer(rng.random((5, 8, 8, 3), dtype=np.float32),
                             np.array([0, 1, 2, -1, 3], dtype=np.int32))
        path = tmp_path / "set.hvtimg"
        c.save(path)
        back = D.ImageContainer.load(path)
        assert np.array_equal(back.images, c.images)
        assert np.array_equal(back.labels, c.labels)

    def test_save_load_save_byte_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        c = D.ImageContainer(rng.random((3, 4, 4, 3), dtype=np.float32),
                             np.zeros(3, dtype=np.int32))
        p1, p2 = tmp_path / "a.img", tmp_path / "b.img"
        c.save(p1)
        D.ImageContainer.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.img"
        p.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(ContainerFormatError):
            D.ImageContainer.load(p)

    def test_truncated_file(self, tmp_path):
        rng = np.random.default_rng(2)
        c = D.ImageContainer(rng.random((2, 4, 4, 3), dtype=np.float32),
                             np.zeros(2, dtype=np.int32))
        p = tmp_path / "trunc.img"
        c.save(p)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(ContainerFormatError):
            D.ImageContainer.load(p)

    def test_normalize(self):
        img = np.full((1, 2, 2, 3), 0.75, dtype=np.float32)
        out = D.normalize_images(img, (0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
        np.testing.assert_allclose(out, 1.0)


class TestSyntheticData:
    def test_deterministic(self):
        a_l, a_u = D.generate_synthetic(3, size=(32, 32), seed=9, n_unlabeled=4)
        b_l, b_u = D.generate_synthetic(3, size=(32, 32), seed=9, n_unlabeled=4)
        assert np.array_equal(a_l.images, b_l.images)
        assert np.array_equal(a_u.images, b_u.images)

    def test_seven_classes_with_expected_labels(self):
        labeled, unlabeled = D.generate_synthetic(2, classes=7, size=(32, 32),
                                                  seed=0, n_unlabeled=5)
        assert sorted(set(labeled.labels.tolist())) == list(range(7))
        assert np.all(unlabeled.labels == -1)
        assert labeled.images.min() >= 0.0 and labeled.images.max() <= 1.0

    def test_linear_probe_on_raw_pixels_beats_chance(self):
        labeled, _ = D.generate_synthetic(12, size=(32, 32), seed=3)
        train, _, test = D.stratified_split(labeled, (0.70, 0.15, 0.15), seed=0)
        acc = linear_probe(train.images.reshape(len(train), -1), train.labels,
                           test.images.reshape(len(test), -1), test.labels,
                           classes=7, steps=200)
        assert acc > 1.0 / 7.0 + 0.15


class TestStratifiedSplit:
    def test_divisible_case_exact(self):
        labeled, _ = D.generate_synthetic(20, classes=3, size=(8, 8), seed=1)
        tr, va, te = D.stratified_split(labeled, seed=5)
        for cls in range(3):
            assert int((tr.labels == cls).sum()) == 14
            assert int((va.labels == cls).sum()) == 3
            assert int((te.labels == cls).sum()) == 3

    def test_partition_property(self):
        labeled, _ = D.generate_synthetic(7, classes=4, size=(8, 8), seed=2)
        tr, va, te = D.stratified_split(labeled, seed=5)
        assert len(tr) + len(va) + len(te) == len(labeled)
        key = lambda c: {c.images[i].tobytes() for i in range(len(c))}
        all_imgs = key(tr) | key(va) | key(te)
        assert len(all_imgs) == len(labeled)
        assert not (key(tr) & key(va)) and not (key(tr) & key(te)) and not (key(va) & key(te))

    def test_remainder_goes_to_train(self):
        labeled, _ = D.generate_synthetic(10, classes=2, size=(8, 8), seed=3)
        tr, va, te = D.stratified_split(labeled, seed=0)
        for cls in range(2):
            assert int((tr.labels == cls).sum()) == 8
            assert int((va.labels == cls).sum()) == 1
            assert int((te.labels == cls).sum()) == 1

    def test_deterministic(self):
        labeled, _ = D.generate_synthetic(5, classes=3, size=(8, 8), seed=4)
        a = D.stratified_split(labeled, seed=7)
        b = D.stratified_split(labeled, seed=7)
        for x, y in zip(a, b):
            assert np.array_equal(x.images, y.images)

    def test_class_below_minimum_rejected(self):
        labeled, _ = D.generate_synthetic(2, classes=2, size=(8, 8), seed=5)
        with pytest.raises(InputError):
            D.stratified_split(labeled)

    def test_unlabeled_rejected(self):
        c = D.ImageContainer(np.zeros((4, 4, 4, 3), np.float32),
                             np.array([0, 1, -1, 1], np.int32))
        with pytest.raises(InputError):
            D.stratified_split(c)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        cfg = HVTConfig.tiny(drop_path_max=0.0)
        params = init_params(cfg, RngStream(0))
        path = tmp_path / "model.ckpt"
        D.save_checkpoint(path, D.params_to_arrays(params), cfg, {"step": 12})
        arrays, snap, meta = D.load_checkpoint(path)
        assert meta == {"step": 12}
        assert D.config_from_snapshot(snap) == cfg
        assert arrays.keys() == params.keys()
        for k in params:
            assert np.array_equal(arrays[k], params[k].numpy())

    def test_save_load_save_byte_identical(self, tmp_path):
        cfg = HVTConfig.tiny(drop_path_max=0.0)
        params = init_params(cfg, RngStream(1))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        D.save_checkpoint(p1, D.params_to_arrays(params), cfg)
        arrays, snap, meta = D.load_checkpoint(p1)
        D.save_checkpoint(p2, arrays, D.config_from_snapshot(snap), meta or None)
        assert p1.read_bytes() == p2.read_bytes()

    def test_float64_preserved(self, tmp_path):
        arr = np.random.default_rng(0).normal(size=(3, 3))
        path = tmp_path / "f64.ckpt"
        D.save_checkpoint(path, {"x": arr})
        back, _, _ = D.load_checkpoint(path)
        assert back["x"].dtype == np.float64
        assert np.array_equal(back["x"], arr)

    def test_payload_corruption_raises_crc_error(self, tmp_path):
        path = tmp_path / "c.ckpt"
        D.save_checkpoint(path, {"x": np.ones((4, 4), np.float32)})
        blob = bytearray(path.read_bytes())
        blob[-30] ^= 0x01  # flip one payload bit
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointCRCError):
            D.load_checkpoint(path)

    def test_bad_magic_and_version(self, tmp_path):
        p = tmp_path / "m.ckpt"
        p.write_bytes(b"WRONGMAG" + b"\x00" * 16)
        with pytest.raises(CheckpointMagicError):
            D.load_checkpoint(p)
        good = tmp_path / "v.ckpt"
        D.save_checkpoint(good, {"x": np.ones(2, np.float32)})
        blob = bytearray(good.read_bytes())
        blob[8] = 99
        good.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            D.load_checkpoint(good)

    def test_manifest_mismatch_names_offenders(self, tmp_path):
        cfg = HVTConfig.tiny(drop_path_max=0.0)
        params = init_params(cfg, RngStream(2))
        path = tmp_path / "mm.ckpt"
        D.save_checkpoint(path, D.params_to_arrays(params), cfg)
        other = HVTConfig.desk(drop_path_max=0.0)
        with pytest.raises(CheckpointManifestError, match="wrong-shape"):
            D.load_checkpoint(path, expected_shapes=param_shapes(other))

    def test_manifest_match_accepts(self, tmp_path):
        cfg = HVTConfig.tiny(drop_path_max=0.0)
        params = init_params(cfg, RngStream(3))
        path = tmp_path / "ok.ckpt"
        D.save_checkpoint(path, D.params_to_arrays(params), cfg)
        arrays, _, _ = D.load_checkpoint(path, expected_shapes=param_shapes(cfg))
        assert set(arrays) == set(params)
