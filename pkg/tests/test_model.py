import numpy as np
import pytest

from dualtask.encoding import EncoderConfig
from dualtask.model import DualTaskModel
from dualtask.numeric import numerical_gradient, relative_error
from dualtask.objectives import LossHyperParams


def _setup(seed=1):
    cfg = EncoderConfig(frame_feature_dim=5, word_embedding_dim=4, gru_hidden_dim=3, conv_filter_widths=(2, 3),
                        conv_filters_per_width=3, common_dim=6, vocab_size=7)
    model = DualTaskModel.create(cfg, seed=seed)
    rng = np.random.default_rng(0)
    frames = [rng.normal(size=(T, 5)) for T in (3, 4, 2, 5)]
    toks = [[1, 2, 3], [4, 5], [0, 6, 2, 1], [3]]
    Y = (rng.random((4, 7)) < 0.4).astype(float)
    return model, frames, toks, Y


@pytest.mark.parametrize("classification", ["class_sensitive", "bce"])
def test_full_model_gradients(classification):
    model, frames, toks, Y = _setup()
    hp = LossHyperParams(lam=0.3)
    _, grads = model.loss_and_grads(frames, toks, Y, None, hp, classification, update_running=False)

    def loss():
        b, _ = model.loss_and_grads(frames, toks, Y, None, hp, classification,
                                    update_running=False, with_grads=False)
        return b.combined

    for name, p in model.named_params().items():
        def fun(x, p=p):
            old = p.copy()
            p[...] = x
            v = loss()
            p[...] = old
            return v

        num = numerical_gradient(fun, p.copy(), 1e-5)
        assert relative_error(grads[name], num) < 1e-4, name


def test_params_and_bn_share_arrays_after_copy():
    model, *_ = _setup()
    twin = model.copy()
    twin.named_params()["vis.bn.gamma"][...] = 2.0
    assert np.all(twin.visual.bn.gamma == 2.0)
    assert np.all(model.visual.bn.gamma == 1.0)


def test_inference_embedding_is_batch_independent():
    model, frames, toks, _ = _setup()
    together = model.embed_videos(frames)
    for i, f in enumerate(frames):
        np.testing.assert_allclose(model.embed_videos([f])[0], together[i], atol=1e-12)
    t_all = model.embed_texts(toks)
    np.testing.assert_allclose(model.embed_texts([toks[1]])[0], t_all[1], atol=1e-12)


def test_concept_probabilities_in_unit_interval():
    model, frames, *_ = _setup()
    P = model.concept_probabilities(model.embed_videos(frames))
    assert P.shape == (4, 7)
    assert np.all((P > 0) & (P < 1))


def test_loss_weights_scale_components():
    model, frames, toks, Y = _setup()
    hp = LossHyperParams()
    b, _ = model.loss_and_grads(frames, toks, Y, None, hp, update_running=False, with_grads=False)
    b2, _ = model.loss_and_grads(frames, toks, Y, None, hp, matching_weight=0.0, classification_weight=2.0,
                                 update_running=False, with_grads=False)
    assert b.combined == pytest.approx(b.matching + b.classification)
    assert b2.combined == pytest.approx(2.0 * b.classification)
