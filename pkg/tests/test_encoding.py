import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualtask.encoding import (
    EncoderConfig,
    TextEncoder,
    VisualEncoder,
    bigru_batch_backward,
    bigru_batch_forward,
    bigru_forward,
    conv1d_pool,
    conv1d_pool_batch_backward,
    conv1d_pool_batch_forward,
    encode_text,
    encode_visual,
    gru_backward,
    gru_forward,
    init_conv,
    init_gru,
    load_word_embeddings,
    pad_sequences,
    pad_tokens,
)
from dualtask.errors import EmptyInputError, EmptyQueryError, ShapeError
from dualtask.numeric import grad_check, sigmoid


def _gru_step_oracle(x, h, W, U, b):
    H = U.shape[1]
    z = sigmoid(W[:H] @ x + U[:H] @ h + b[:H])
    r = sigmoid(W[H : 2 * H] @ x + U[H : 2 * H] @ h + b[H : 2 * H])
    n = np.tanh(W[2 * H :] @ x + b[2 * H :] + r * (U[2 * H :] @ h))
    return (1 - z) * n + z * h


def test_gru_matches_per_step_oracle():
    rng = np.random.default_rng(0)
    p = init_gru(rng, 3, 4)
    p["b"] = rng.normal(size=12)
    seq = rng.normal(size=(5, 3))
    H, _ = gru_forward(seq[None], np.array([5]), p["W"], p["U"], p["b"])
    h = np.zeros(4)
    for t in range(5):
        h = _gru_step_oracle(seq[t], h, p["W"], p["U"], p["b"])
        np.testing.assert_allclose(H[0, t], h, atol=1e-14)


def test_gru_state_frozen_after_length():
    rng = np.random.default_rng(1)
    p = init_gru(rng, 2, 3)
    X = rng.normal(size=(1, 6, 2))
    H, _ = gru_forward(X, np.array([3]), p["W"], p["U"], p["b"])
    for t in range(3, 6):
        np.testing.assert_array_equal(H[0, t], H[0, 2])


@pytest.mark.parametrize("which", ["X", "W", "U", "b"])
def test_gru_gradcheck(which):
    rng = np.random.default_rng(2)
    p = init_gru(rng, 3, 4)
    p["b"] = rng.normal(size=12) * 0.5
    X = rng.normal(size=(3, 5, 3))
    lengths = np.array([5, 2, 4])
    G = rng.normal(size=(3, 5, 4))
    args = {"X": X, **p}
    pos = {"X": 0, "W": 1, "U": 2, "b": 3}[which]

    def f(v):
        a = dict(args)
        a[which] = v
        H, cache = gru_forward(a["X"], lengths, a["W"], a["U"], a["b"])
        return float((H * G).sum()), gru_backward(G, cache)[pos]

    assert grad_check(f, args[which]) < 1e-5


def test_bigru_padding_invariance_and_zero_padding():
    rng = np.random.default_rng(3)
    params = {"fw": init_gru(rng, 3, 2), "bw": init_gru(rng, 3, 2)}
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(7, 3))
    X, lengths = pad_sequences([a, b])
    H, _ = bigru_batch_forward(X, lengths, params["fw"], params["bw"])
    np.testing.assert_allclose(H[0, :4], bigru_forward(a, params), atol=1e-14)
    np.testing.assert_array_equal(H[0, 4:], 0.0)


def test_bigru_backward_direction_is_reversed_forward():
    rng = np.random.default_rng(4)
    g = init_gru(rng, 2, 3)
    seq = rng.normal(size=(5, 2))
    H = bigru_forward(seq, {"fw": g, "bw": g})
    Hr = bigru_forward(seq[::-1], {"fw": g, "bw": g})
    np.testing.assert_allclose(H[:, 3:], Hr[::-1, :3], atol=1e-14)


def test_bigru_gradcheck():
    rng = np.random.default_rng(5)
    fw, bw = init_gru(rng, 2, 3), init_gru(rng, 2, 3)
    X = rng.normal(size=(2, 4, 2))
    lengths = np.array([4, 3])
    G = rng.normal(size=(2, 4, 6))

    def f(v):
        H, cache = bigru_batch_forward(v, lengths, fw, bw)
        return float((H * G).sum()), bigru_batch_backward(G, cache)[0]

    def f_w(v):
        H, cache = bigru_batch_forward(X, lengths, fw, {**bw, "W": v})
        return float((H * G).sum()), bigru_batch_backward(G, cache)[2]["W"]

    assert grad_check(f, X) < 1e-5
    assert grad_check(f_w, bw["W"]) < 1e-5


def _conv_oracle(seq, K, b):
    F, w, _ = K.shape
    T = seq.shape[0]
    if T < w:
        return np.zeros(F)
    vals = np.array([[np.sum(K[f] * seq[t : t + w]) + b[f] for t in range(T - w + 1)] for f in range(F)])
    return np.maximum(vals.max(axis=1), 0.0)


def test_conv_pool_matches_loop_oracle():
    rng = np.random.default_rng(6)
    params = init_conv(rng, (2, 3), 4, 5)
    for w in params:
        params[w]["b"] = rng.normal(size=4)
    seq = rng.normal(size=(6, 5))
    out = conv1d_pool(seq, params)
    expected = np.concatenate([_conv_oracle(seq, params[w]["K"], params[w]["b"]) for w in (2, 3)])
    np.testing.assert_allclose(out, expected, atol=1e-13)


def test_conv_pool_short_sequence_gives_zeros():
    rng = np.random.default_rng(7)
    params = init_conv(rng, (2, 4), 3, 2)
    out = conv1d_pool(rng.normal(size=(3, 2)), params)
    np.testing.assert_array_equal(out[3:], 0.0)


def test_conv_pool_ignores_padding():
    rng = np.random.default_rng(8)
    params = init_conv(rng, (2, 3), 3, 2)
    a = rng.normal(size=(4, 2))
    X, lengths = pad_sequences([a, rng.normal(size=(9, 2))])
    X[0, 4:] = 100.0  # garbage in the padded region must not leak into the max
    out, _ = conv1d_pool_batch_forward(X, lengths, params)
    np.testing.assert_allclose(out[0], conv1d_pool(a, params), atol=1e-14)


def test_conv_pool_gradcheck():
    rng = np.random.default_rng(9)
    params = init_conv(rng, (2, 3), 3, 4)
    for w in params:
        params[w]["b"] = rng.normal(size=3) + 1.0
    H = rng.normal(size=(3, 5, 4))
    lengths = np.array([5, 3, 2])
    G = rng.normal(size=(3, 6))

    def f(v):
        out, cache = conv1d_pool_batch_forward(v, lengths, params)
        return float((out * G).sum()), conv1d_pool_batch_backward(G, cache)[0]

    def f_k(v):
        p = {2: {"K": v, "b": params[2]["b"]}, 3: params[3]}
        out, cache = conv1d_pool_batch_forward(H, lengths, p)
        return float((out * G).sum()), conv1d_pool_batch_backward(G, cache)[1][2]["K"]

    assert grad_check(f, H) < 1e-5
    assert grad_check(f_k, params[2]["K"]) < 1e-5


def test_padding_helpers():
    X, lengths = pad_sequences([np.ones((2, 3)), np.ones((4, 3))])
    assert X.shape == (2, 4, 3)
    np.testing.assert_array_equal(lengths, [2, 4])
    with pytest.raises(EmptyInputError):
        pad_sequences([np.zeros((0, 3))])
    with pytest.raises(ShapeError):
        pad_sequences([np.ones((2, 3)), np.ones((2, 4))])
    ids, tl = pad_tokens([[1, 2], [3]])
    np.testing.assert_array_equal(ids, [[1, 2], [3, 0]])
    with pytest.raises(EmptyQueryError):
        pad_tokens([[1], []])


def _small_config(**kw):
    base = dict(frame_feature_dim=6, word_embedding_dim=4, gru_hidden_dim=3, conv_filter_widths=(2, 3),
                conv_filters_per_width=2, common_dim=5, vocab_size=7)
    base.update(kw)
    return EncoderConfig(**base)


def test_encoder_shapes_and_levels():
    cfg = _small_config()
    rng = np.random.default_rng(10)
    vis = VisualEncoder.create(cfg, rng)
    txt = TextEncoder.create(cfg, rng)
    levels, phi = encode_visual(rng.normal(size=(5, 6)), vis)
    assert phi.shape == (5,)
    assert levels.level1.shape == (6,) and levels.level2.shape == (6,) and levels.level3.shape == (4,)
    levels_t, tau = encode_text([1, 4, 4], txt)
    assert tau.shape == (5,)
    np.testing.assert_allclose(levels_t.level1, np.array([0, 1, 0, 0, 2, 0, 0]) / 3)
    assert levels_t.concatenated.shape == (7 + 6 + 4,)


def test_visual_level1_is_frame_mean():
    cfg = _small_config()
    vis = VisualEncoder.create(cfg, np.random.default_rng(11))
    frames = np.random.default_rng(12).normal(size=(4, 6))
    levels, _ = encode_visual(frames, vis)
    np.testing.assert_allclose(levels.level1, frames.mean(axis=0))


def test_encoder_rejects_wrong_frame_dim():
    vis = VisualEncoder.create(_small_config(), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        encode_visual(np.ones((3, 5)), vis)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 6), st.integers(0, 1000))
def test_visual_encoding_independent_of_batch_companions(T, seed):
    rng = np.random.default_rng(seed)
    cfg = _small_config()
    vis = VisualEncoder.create(cfg, rng)
    a = rng.normal(size=(T, 6))
    _, alone = encode_visual(a, vis)
    X, lengths = pad_sequences([a, rng.normal(size=(8, 6))])
    phi, _ = vis.forward(X, lengths, train=False)
    np.testing.assert_allclose(phi[0], alone, atol=1e-12)


def test_load_word_embeddings(tmp_path):
    path = tmp_path / "vec.txt"
    path.write_text("cat 1 2 3\ndog 4 5 6\nunused 0 0 0\n")
    E = load_word_embeddings(path, ["dog", "bird", "cat"], 3, np.random.default_rng(0))
    np.testing.assert_array_equal(E[0], [4, 5, 6])
    np.testing.assert_array_equal(E[2], [1, 2, 3])
    assert np.abs(E[1]).max() < 1.0
    with pytest.raises(ShapeError):
        load_word_embeddings(path, ["cat"], 2, np.random.default_rng(0))
