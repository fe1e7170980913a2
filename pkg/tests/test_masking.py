import numpy as np
import pytest

from clmae import autodiff as ad
from clmae.autodiff import Tensor
from clmae.masking import (CmmParams, NoVisibleTokens, apply_soft_mask, calibrate_head,
                           cmm_forward, cmm_tokens_forward, mask_to_pgm, random_mask, read_pgm,
                           select_visible, select_visible_batch, threshold)
from clmae.nn import patchify

GEOM = dict(h=16, w=16, c=1, p=8, d=16, heads=2, depth=1)


def test_zero_head_gives_half(rng):
    cmm = CmmParams.init(rng, **GEOM)
    cmm.head_out.w.data[...] = 0.0
    cmm.head_out.b.data[...] = 0.0
    z = cmm_forward(rng.uniform(size=(3, 16, 16, 1)), cmm)
    assert z.shape == (3, 4)
    assert np.all(z.data == 0.5)


def test_cmm_output_range(rng):
    cmm = CmmParams.init(rng, **GEOM)
    z = cmm_forward(rng.uniform(size=(2, 16, 16, 1)), cmm).data
    assert ((z > 0) & (z < 1)).all()


def test_cmm_geometry_mismatch(rng):
    cmm = CmmParams.init(rng, **GEOM)
    with pytest.raises(ValueError):
        cmm_forward(rng.uniform(size=(1, 24, 24, 1)), cmm)


def test_threshold_examples():
    assert threshold([0.7, 0.3]).tolist() == [1, 0]
    assert threshold([0.5]).tolist() == [1]
    assert threshold([0.1, 0.49]).tolist() == [0, 0]


def test_select_visible():
    tokens = Tensor(np.arange(15.0).reshape(5, 3))
    sel, rows = select_visible(tokens, [1, 0, 1, 0])
    assert rows.tolist() == [0, 1, 3]
    np.testing.assert_array_equal(sel.data, tokens.data[[0, 1, 3]])
    sel, rows = select_visible(tokens, [1, 1, 1, 1])
    np.testing.assert_array_equal(sel.data, tokens.data)
    with pytest.raises(NoVisibleTokens):
        select_visible(tokens, [0, 0, 0, 0])
    with pytest.raises(ValueError):
        select_visible(tokens, [1, 0, 1])


def test_select_visible_batch_padding():
    tokens = Tensor(np.arange(2 * 5 * 2.0).reshape(2, 5, 2))
    sel, rows, valid, bias = select_visible_batch(tokens, np.array([[1, 0, 1, 1], [0, 1, 0, 0]]))
    assert sel.shape == (2, 4, 2)
    assert rows[1, :2].tolist() == [0, 2]
    assert valid[1].tolist() == [True, True, False, False]
    assert (bias[1, 2:] < -1e8).all()


def test_soft_mask_identity_and_zero(rng):
    tokens = Tensor(rng.normal(size=(5, 3)))
    np.testing.assert_array_equal(apply_soft_mask(tokens, np.ones(4)).data, tokens.data)
    out = apply_soft_mask(tokens, np.zeros(4)).data
    np.testing.assert_array_equal(out[0], tokens.data[0])
    assert not out[1:].any()
    with pytest.raises(ValueError):
        apply_soft_mask(tokens, np.ones(3))


def test_random_mask_ratio(rng):
    m = random_mask(rng, 16, 0.75)
    assert m.sum() == 4
    assert random_mask(rng, 4, 0.99).sum() == 1


def test_calibration_hits_ratio(rng):
    cmm = CmmParams.init(rng, **GEOM)
    patches = patchify(rng.uniform(size=(64, 16, 16, 1)), 8).patches
    calibrate_head(cmm, patches, 0.75, 2.0)
    z = cmm_tokens_forward(patches, cmm).data
    assert 0.6 < 1 - threshold(z).mean() < 0.9
    # logits spread across images, so masks are not all the same
    assert len({row.tobytes() for row in threshold(z)}) > 1
    with pytest.raises(ValueError):
        calibrate_head(cmm, patches[:1], 0.75, 2.0)


def test_pgm_all_visible():
    data = mask_to_pgm(np.ones(4, dtype=np.int8), 2, 2, 3)
    assert data.startswith(b"P5\n6 6\n255\n")
    img = read_pgm(data)
    assert img.shape == (6, 6) and (img == 255).all()


def test_pgm_layout():
    img = read_pgm(mask_to_pgm(np.array([1, 0, 0, 1]), 2, 2, 2))
    assert img.tolist() == [[255, 255, 0, 0], [255, 255, 0, 0], [0, 0, 255, 255], [0, 0, 255, 255]]
