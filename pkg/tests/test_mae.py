import numpy as np
import pytest

from clmae import autodiff as ad
from clmae.autodiff import Tensor
from clmae.mae import (MaeParams, NoVisibleTokens, NothingToReconstruct, decode, embed, encode,
                       forward_hard, forward_soft, normalize_target, recon_loss)
from clmae.masking import select_visible

GEOM = dict(h=32, w=32, c=3, p=8, d=16, heads=2, depth=1, dec_d=8, dec_depth=1, dec_heads=2)


@pytest.fixture
def mae(rng):
    return MaeParams.init(rng, **GEOM)


def test_encoder_token_counts(mae, rng):
    patches = rng.normal(size=(16, 192))
    tokens = embed(patches, mae)
    assert encode(tokens, mae).shape == (17, 16)
    mask = np.zeros(16, dtype=np.int8)
    mask[[0, 5, 9, 15]] = 1
    vis, rows = select_visible(tokens, mask)
    assert encode(vis, mae).shape == (5, 16)
    with pytest.raises(NoVisibleTokens):
        encode(tokens[0:1], mae)


def test_decode_zero_projection(mae, rng):
    mae.dec_pred.w.data[...] = 0.0
    mae.dec_pred.b.data[...] = 0.0
    vis, rows = select_visible(embed(rng.normal(size=(16, 192)), mae), np.eye(16, dtype=int)[3])
    out = decode(encode(vis, mae), rows, mae)
    assert out.shape == (16, 192)
    assert not out.data.any()


def test_decode_rejects_bad_index(mae, rng):
    vis, rows = select_visible(embed(rng.normal(size=(16, 192)), mae), np.eye(16, dtype=int)[3])
    with pytest.raises(ValueError):
        decode(encode(vis, mae), np.array([0, 99]), mae)


def test_batched_hard_matches_single(mae, rng):
    patches = rng.normal(size=(2, 16, 192))
    masks = (rng.uniform(size=(2, 16)) < 0.3).astype(np.int8)
    masks[:, 0] = 1
    masks[1, :] = 0
    masks[1, 7] = 1
    batched = forward_hard(patches, masks, mae).data
    for b in range(2):
        vis, rows = select_visible(embed(patches[b], mae), masks[b])
        single = decode(encode(vis, mae), rows, mae).data
        np.testing.assert_allclose(batched[b], single, atol=1e-10)


def test_soft_with_binary_z_matches_hard_decoder_input(mae, rng):
    """With z all ones both paths see every token and agree exactly."""
    patches = rng.normal(size=(1, 16, 192))
    ones = np.ones((1, 16))
    np.testing.assert_allclose(forward_soft(patches, Tensor(ones), mae).data,
                               forward_hard(patches, ones.astype(np.int8), mae).data, atol=1e-10)


def test_normalize_target():
    assert not normalize_target(np.full((1, 4), 3.0)).target.any()
    np.testing.assert_allclose(normalize_target(np.array([[0.0, 2.0]])).target, [[-1.0, 1.0]],
                               atol=1e-6)
    t = normalize_target(np.array([[1.0, 5.0, 2.0]]))
    np.testing.assert_allclose(t.denormalize(t.target), [[1.0, 5.0, 2.0]])


def test_recon_loss_examples():
    target = np.array([[[0.0, 0.0], [1.0, -1.0]]])
    assert recon_loss(Tensor(target), target, [[1, 0]]).item() == 0.0
    assert recon_loss(Tensor(target + 1.0), target, [[0, 1]]).item() == pytest.approx(1.0)
    assert recon_loss(Tensor(np.zeros((1, 2, 2))), target, [[1, 0]]).item() == pytest.approx(1.0)
    with pytest.raises(NothingToReconstruct):
        recon_loss(Tensor(target), target, [[1, 1]])


def test_recon_loss_ignores_visible(rng):
    target = rng.normal(size=(1, 4, 3))
    pred = target.copy()
    pred[0, 0] += 100.0  # visible patch
    assert recon_loss(Tensor(pred), target, [[1, 0, 0, 1]]).item() == 0.0
