"""The dual-task network: shared visual encoder, text encoder and concept
decoder, plus the joint loss with its hand-composed backward pass."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .encoding import EncoderConfig, TextEncoder, VisualEncoder, pad_sequences, pad_tokens
from .errors import ShapeError
from .numeric import (
    BatchNormState,
    batchnorm_backward,
    batchnorm_forward,
    linear_backward,
    linear_forward,
    sigmoid,
)
from .objectives import CLASSIFICATION_LOSSES, LossHyperParams, ranking_loss_backward, ranking_loss_terms


class ConceptDecoder:
    """Fully connected layer plus batch norm; sigmoid gives concept probabilities."""

    def __init__(self, d: int, m: int, rng: np.random.Generator):
        s = np.sqrt(6.0 / (d + m))
        self.bn = BatchNormState.create(m)
        self.params = {
            "fc.W": rng.uniform(-s, s, (m, d)),
            "fc.b": np.zeros(m),
            "bn.gamma": self.bn.gamma,
            "bn.beta": self.bn.beta,
        }

    def forward(self, phi, train: bool = False, update_running: bool = True):
        y, lcache = linear_forward(phi, self.params["fc.W"], self.params["fc.b"])
        self.bn.mode = "train" if train else "infer"
        logits, bcache = batchnorm_forward(y, self.bn, update_running=update_running)
        return sigmoid(logits), logits, (lcache, bcache)

    def backward(self, dlogits, cache):
        lcache, bcache = cache
        grads = {}
        dy, grads["bn.gamma"], grads["bn.beta"] = batchnorm_backward(dlogits, bcache)
        dphi, grads["fc.W"], grads["fc.b"] = linear_backward(dy, lcache)
        return grads, dphi

    def set_bn_arrays(self):
        self.bn.gamma = self.params["bn.gamma"]
        self.bn.beta = self.params["bn.beta"]


@dataclass
class LossBreakdown:
    matching: float
    classification: float
    combined: float
    per_pair_matching: np.ndarray
    per_pair_classification: np.ndarray


class DualTaskModel:
    BRANCHES = ("vis", "txt", "dec")

    def __init__(self, config: EncoderConfig, visual: VisualEncoder, text: TextEncoder,
                 decoder: ConceptDecoder):
        self.config = config
        self.visual = visual
        self.text = text
        self.decoder = decoder

    @classmethod
    def create(cls, config: EncoderConfig, seed: int = 0, embeddings=None) -> "DualTaskModel":
        rng = np.random.default_rng(seed)
        visual = VisualEncoder.create(config, rng)
        text = TextEncoder.create(config, rng, embeddings)
        decoder = ConceptDecoder(config.common_dim, config.vocab_size, rng)
        return cls(config, visual, text, decoder)

    def _branches(self):
        return {"vis": self.visual, "txt": self.text, "dec": self.decoder}

    def named_params(self) -> dict:
        """All trainable arrays in a fixed order, keyed ``branch.name``."""
        out = {}
        for prefix, branch in self._branches().items():
            for k, v in branch.params.items():
                out[f"{prefix}.{k}"] = v
        return out

    def bn_states(self) -> dict:
        return {prefix: b.bn for prefix, b in self._branches().items()}

    def copy(self) -> "DualTaskModel":
        return copy.deepcopy(self)

    def rebind_bn(self):
        """Restore gamma/beta sharing between ``params`` and the BN states."""
        for b in self._branches().values():
            b.set_bn_arrays()

    # -- inference ---------------------------------------------------------

    def embed_videos(self, frame_seqs, batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(frame_seqs), batch_size):
            X, L = pad_sequences(frame_seqs[i : i + batch_size], self.config.frame_feature_dim)
            phi, _ = self.visual.forward(X, L, train=False)
            out.append(phi)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.common_dim))

    def embed_texts(self, token_lists, batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(token_lists), batch_size):
            ids, L = pad_tokens(token_lists[i : i + batch_size])
            tau, _ = self.text.forward(ids, L, train=False)
            out.append(tau)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.common_dim))

    def concept_probabilities(self, phi) -> np.ndarray:
        phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
        probs, _, _ = self.decoder.forward(phi, train=False)
        return probs

    # -- training ----------------------------------------------------------

    def loss_and_grads(
        self,
        frames,
        token_lists,
        labels: np.ndarray,
        video_ids,
        hp: LossHyperParams,
        classification: str = "class_sensitive",
        matching_weight: float = 1.0,
        classification_weight: float = 1.0,
        update_running: bool = True,
        with_grads: bool = True,
    ):
        """Train-mode forward of one batch of video-caption pairs.

        Returns ``(LossBreakdown, grads)`` where ``grads`` is keyed like
        ``named_params``; the combined loss is the batch mean of the
        per-pair matching plus classification losses.
        """
        X, fl = pad_sequences(frames, self.config.frame_feature_dim)
        ids, tl = pad_tokens(token_lists)
        Y = np.asarray(labels, dtype=np.float64)
        B = X.shape[0]
        if Y.shape != (B, self.config.vocab_size):
            raise ShapeError(f"labels must be {(B, self.config.vocab_size)}, got {Y.shape}")

        phi, vcache = self.visual.forward(X, fl, train=True, update_running=update_running)
        tau, tcache = self.text.forward(ids, tl, train=True, update_running=update_running)
        m_pair, rcache = ranking_loss_terms(phi, tau, hp.margin, video_ids)
        probs, _, dcache = self.decoder.forward(phi, train=True, update_running=update_running)
        c_pair, dlogits = CLASSIFICATION_LOSSES[classification](probs, Y, hp)

        scale = 1.0 / B if hp.reduction == "mean" else 1.0
        match_total = float(m_pair.sum() * scale)
        class_total = float(c_pair.sum() * scale)
        breakdown = LossBreakdown(
            matching=match_total,
            classification=class_total,
            combined=matching_weight * match_total + classification_weight * class_total,
            per_pair_matching=m_pair,
            per_pair_classification=c_pair,
        )
        if not with_grads:
            return breakdown, None

        dphi_m, dtau = ranking_loss_backward(
            np.full(B, matching_weight * scale), rcache
        )
        dec_grads, dphi_c = self.decoder.backward(dlogits * (classification_weight * scale), dcache)
        vis_grads, _ = self.visual.backward(dphi_m + dphi_c, vcache)
        txt_grads = self.text.backward(dtau, tcache)

        grads = {}
        for prefix, g in (("vis", vis_grads), ("txt", txt_grads), ("dec", dec_grads)):
            for k, v in g.items():
                grads[f"{prefix}.{k}"] = v
        return breakdown, grads
