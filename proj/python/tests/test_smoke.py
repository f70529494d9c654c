import numpy as np
import pytest

import utsrmorph as um


def test_gen_synthetic_shapes_and_determinism():
    subs = um.gen_synthetic(dim=32, n_subjects=2, n_labels=2, seed=3)
    assert len(subs) == 2
    vol, mask, field = subs[0]
    assert vol.shape == (32, 32, 32) and vol.dtype == np.float32
    assert mask.shape == (32, 32, 32) and mask.dtype == np.uint8
    assert field.shape == (3, 32, 32, 32)
    assert set(np.unique(mask)) <= {0, 1, 2}
    again = um.gen_synthetic(dim=32, n_subjects=2, n_labels=2, seed=3)
    assert np.array_equal(vol, again[0][0])


def test_warp_zero_field_is_identity():
    rng = np.random.default_rng(0)
    vol = rng.random((8, 8, 8)).astype(np.float32)
    field = np.zeros((3, 8, 8, 8), np.float32)
    assert np.array_equal(um.warp(vol, field), vol)


def test_warp_unit_shift():
    vol = np.zeros((4, 4, 4), np.float32)
    vol[1, 1, 1] = 1.0
    field = np.zeros((3, 4, 4, 4), np.float32)
    field[0] = 1.0  # sample from x+1: content appears shifted one voxel -x
    out = um.warp(vol, field)
    assert out[1, 1, 0] == 1.0 and out[1, 1, 1] == 0.0


def test_metrics():
    a = np.zeros((6, 6, 6), np.uint8)
    b = np.zeros((6, 6, 6), np.uint8)
    a[1:4, 1:4, 1:4] = 1
    b[1:4, 1:4, 1:4] = 1
    per_label, mean = um.dice(a, b, [1])
    assert per_label[1] == 1.0 and mean == 1.0
    assert um.hd95(a, b, 1) == 0.0
    fold, sdlogj = um.jacobian_stats(np.zeros((3, 6, 6, 6), np.float32))
    assert fold == 0.0 and sdlogj == 0.0


def test_model_register_pair_zero_init_field():
    model = um.Model(variant="small", seed=1)
    assert model.param_count > 1_000_000
    rng = np.random.default_rng(1)
    moving = rng.random((32, 32, 32)).astype(np.float32)
    fixed = rng.random((32, 32, 32)).astype(np.float32)
    field, warped = model.register_pair(moving, fixed)
    assert field.shape == (3, 32, 32, 32)
    # the flow head is zero-initialized, so an untrained model is an identity
    assert np.array_equal(field, np.zeros_like(field))
    assert np.array_equal(warped, moving)


def test_model_checkpoint_roundtrip(tmp_path):
    model = um.Model(variant="small", seed=2)
    base = str(tmp_path / "ck")
    model.save_checkpoint(base)
    other = um.Model(variant="small", seed=99)
    other.load_checkpoint(base)
    rng = np.random.default_rng(2)
    moving = rng.random((32, 32, 32)).astype(np.float32)
    fixed = rng.random((32, 32, 32)).astype(np.float32)
    f1, _ = model.register_pair(moving, fixed)
    f2, _ = other.register_pair(moving, fixed)
    assert np.array_equal(f1, f2)


def test_bad_shapes_raise():
    with pytest.raises(Exception):
        um.warp(np.zeros((4, 4), np.float32), np.zeros((3, 4, 4, 4), np.float32))
    model = um.Model(variant="small", seed=0)
    with pytest.raises(Exception):
        # extents must be divisible by 32
        model.register_pair(np.zeros((16, 16, 16), np.float32),
                            np.zeros((16, 16, 16), np.float32))
