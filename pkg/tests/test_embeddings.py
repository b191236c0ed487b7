import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mctrans.embeddings import (CHANNEL_DEFAULT, WORD_DEFAULT, CapacityError, EmbeddingOptions,
                                embed_channel, embed_words, pos_enc, positional_table)
from mctrans.tensor import (BatchNormState, ConfigError, ShapeError, Tensor, add, matmul,
                            normalize_batch, softsign)


def channel_params(rng, d_in, d_model, zero=False):
    w = np.zeros((d_in, d_model)) if zero else rng.normal(size=(d_in, d_model))
    return {"W": Tensor(w), "b": Tensor(np.zeros(d_model)),
            "bn.gamma": Tensor(np.ones(d_model)), "bn.beta": Tensor(np.zeros(d_model))}


def test_pos_enc_examples():
    np.testing.assert_array_equal(pos_enc(0, 6), [0, 1, 0, 1, 0, 1])
    np.testing.assert_allclose(pos_enc(1, 4), [0.84147, 0.54030, 0.01000, 0.99995], atol=1e-4)
    table = positional_table(512, 64)
    assert table.min() >= -1 and table.max() <= 1


def test_pos_enc_is_deterministic():
    assert pos_enc(37, 16).tobytes() == pos_enc(37, 16).tobytes()


def test_pos_enc_capacity():
    with pytest.raises(CapacityError):
        pos_enc(512, 8)
    with pytest.raises(CapacityError):
        positional_table(513, 8)


def test_pos_enc_needs_even_width():
    with pytest.raises(ConfigError):
        pos_enc(0, 5)


def test_zero_input_gives_pure_positions(rng):
    p = channel_params(rng, 5, 8)
    out = embed_channel(Tensor(np.zeros((4, 5))), p, "infer", CHANNEL_DEFAULT, BatchNormState.fresh(8))
    np.testing.assert_array_equal(out.data, positional_table(4, 8))


def test_channel_output_shape(rng):
    p = channel_params(rng, 3, 16)
    out = embed_channel(Tensor(rng.normal(size=(7, 3))), p, "train", CHANNEL_DEFAULT,
                        BatchNormState.fresh(16))
    assert out.shape == (7, 16)


def test_channel_default_matches_hand_composition(rng):
    p = channel_params(rng, 5, 8)
    p["b"] = Tensor(rng.normal(size=8))
    x = Tensor(rng.normal(size=(6, 5)))
    got = embed_channel(x, p, "train", CHANNEL_DEFAULT, BatchNormState.fresh(8))
    proj = add(matmul(x, p["W"]), p["b"])
    want = add(softsign(normalize_batch(proj, BatchNormState.fresh(8), "train")),
               positional_table(6, 8))
    np.testing.assert_array_equal(got.data, want.data)


def test_channel_scale_switch(rng):
    p = channel_params(rng, 3, 4)
    x = Tensor(rng.normal(size=(5, 3)))
    plain = embed_channel(x, p, "infer", EmbeddingOptions("none", "none", False))
    scaled = embed_channel(x, p, "infer", EmbeddingOptions("none", "none", True))
    pos = positional_table(5, 4)
    np.testing.assert_allclose(scaled.data - pos, 2.0 * (plain.data - pos))


def test_channel_dim_mismatch(rng):
    with pytest.raises(ShapeError):
        embed_channel(Tensor(np.zeros((2, 4))), channel_params(rng, 5, 8), "infer",
                      CHANNEL_DEFAULT, BatchNormState.fresh(8))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**31))
def test_channel_embedding_is_time_permutation_equivariant(t, seed):
    r = np.random.default_rng(seed)
    p = channel_params(r, 3, 6)
    x = r.normal(size=(t, 3))
    perm = r.permutation(t)
    pos = positional_table(t, 6)
    a = embed_channel(Tensor(x), p, "train", CHANNEL_DEFAULT, BatchNormState.fresh(6)).data - pos
    b = embed_channel(Tensor(x[perm]), p, "train", CHANNEL_DEFAULT, BatchNormState.fresh(6)).data - pos
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_words_with_zero_weights_are_positions():
    p = {"W": Tensor(np.zeros((9, 8))), "b": Tensor(np.zeros(8))}
    np.testing.assert_array_equal(embed_words([1, 5, 2], p).data, positional_table(3, 8))


def test_word_gather_equals_one_hot_product(rng):
    w = rng.normal(size=(9, 8))
    p = {"W": Tensor(w), "b": Tensor(np.zeros(8))}
    out = embed_words([4], p).data - positional_table(1, 8)
    np.testing.assert_array_equal(out[0], np.eye(9)[4] @ w)


def test_distinct_words_get_distinct_rows(rng):
    p = {"W": Tensor(rng.normal(size=(9, 8))), "b": Tensor(np.zeros(8))}
    out = embed_words([[4, 6]], p).data - positional_table(2, 8)
    assert not np.allclose(out[0, 0], out[0, 1])


def test_word_id_out_of_range(rng):
    p = {"W": Tensor(rng.normal(size=(9, 8))), "b": Tensor(np.zeros(8))}
    with pytest.raises(IndexError):
        embed_words([9], p)


def test_default_options():
    assert (CHANNEL_DEFAULT.norm, CHANNEL_DEFAULT.activation, CHANNEL_DEFAULT.scale) == \
        ("batch", "softsign", False)
    assert (WORD_DEFAULT.norm, WORD_DEFAULT.activation, WORD_DEFAULT.scale) == ("none", "none", False)
    with pytest.raises(ConfigError):
        EmbeddingOptions(norm="layer")
