"""Multi-level visual and textual encoders.

Each branch turns a variable-length sequence into three pooled levels
(global mean, mean of biGRU states, max-pooled 1-d convolutions over the
biGRU states), concatenates them and projects the result into the common
space with a fully connected layer followed by batch normalization.

Sequences are processed in padded batches of shape ``(B, T, k)`` together
with an integer ``lengths`` vector; positions past a row's length are
masked out of every pooling step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, EmptyQueryError, ShapeError
from .numeric import (
    BatchNormState,
    batchnorm_backward,
    batchnorm_forward,
    linear_backward,
    linear_forward,
    relu,
    sigmoid,
)

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    frame_feature_dim: int = 32
    word_embedding_dim: int = 16
    gru_hidden_dim: int = 16
    conv_filter_widths: tuple = (2, 3, 4)
    conv_filters_per_width: int = 16
    common_dim: int = 64
    vocab_size: int = 1
    trainable_embeddings: bool = True

    def __post_init__(self):
        self.conv_filter_widths = tuple(int(w) for w in self.conv_filter_widths)
        counts = [self.frame_feature_dim, self.word_embedding_dim, self.gru_hidden_dim,
                  self.conv_filters_per_width, self.common_dim, self.vocab_size]
        if min(counts) < 1 or not self.conv_filter_widths or min(self.conv_filter_widths) < 1:
            raise ValueError(f"encoder sizes must all be >= 1: {self}")

    @property
    def conv_output_dim(self) -> int:
        return self.conv_filters_per_width * len(self.conv_filter_widths)

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["conv_filter_widths"] = list(self.conv_filter_widths)
        return d


@dataclass
class MultiLevelFeature:
    level1: np.ndarray
    level2: np.ndarray
    level3: np.ndarray

    @property
    def concatenated(self) -> np.ndarray:
        return np.concatenate([self.level1, self.level2, self.level3])


# ---------------------------------------------------------------------------
# Padding helpers
# ---------------------------------------------------------------------------


def length_mask(lengths: np.ndarray, T: int) -> np.ndarray:
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def pad_sequences(seqs, dim: int | None = None):
    """Stack ragged ``(T_i, k)`` arrays into ``(B, T_max, k)`` plus lengths."""
    seqs = [np.asarray(s, dtype=np.float64) for s in seqs]
    if any(s.ndim != 2 or s.shape[0] == 0 for s in seqs):
        raise EmptyInputError("every sequence needs at least one 2-d timestep")
    k = seqs[0].shape[1] if dim is None else dim
    if any(s.shape[1] != k for s in seqs):
        raise ShapeError(f"sequence feature widths disagree (expected {k})")
    lengths = np.array([s.shape[0] for s in seqs])
    X = np.zeros((len(seqs), lengths.max(), k))
    for i, s in enumerate(seqs):
        X[i, : s.shape[0]] = s
    return X, lengths


def pad_tokens(token_lists):
    lengths = np.array([len(t) for t in token_lists])
    if len(lengths) == 0 or lengths.min() == 0:
        raise EmptyQueryError("every token sequence needs at least one token")
    ids = np.zeros((len(token_lists), lengths.max()), dtype=np.int64)
    for i, t in enumerate(token_lists):
        ids[i, : len(t)] = t
    return ids, lengths


def _reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Per-row index reversing the valid prefix; padding stays in place."""
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------


def init_gru(rng: np.random.Generator, input_dim: int, hidden: int) -> dict:
    """Gate-stacked GRU weights: rows are [update, reset, candidate]."""
    s = 1.0 / np.sqrt(hidden)
    return {
        "W": rng.uniform(-s, s, (3 * hidden, input_dim)),
        "U": rng.uniform(-s, s, (3 * hidden, hidden)),
        "b": np.zeros(3 * hidden),
    }


def gru_forward(X, lengths, W, U, b):
    """Run a GRU over padded ``X``; state is frozen past each row's length.

    z = sig(Wz x + Uz h + bz), r = sig(Wr x + Ur h + br),
    n = tanh(Wn x + bn + r * (Un h)), h' = (1 - z) n + z h.
    """
    B, T, _ = X.shape
    h = U.shape[1]
    mask = length_mask(lengths, T)
    A = X @ W.T + b
    H = np.zeros((B, T, h))
    hprev = np.zeros((B, h))
    steps = []
    for t in range(T):
        u = hprev @ U.T
        a = A[:, t]
        z = sigmoid(a[:, :h] + u[:, :h])
        r = sigmoid(a[:, h : 2 * h] + u[:, h : 2 * h])
        un = u[:, 2 * h :]
        n = np.tanh(a[:, 2 * h :] + r * un)
        m = mask[:, t, None]
        hcur = m * ((1.0 - z) * n + z * hprev) + (1.0 - m) * hprev
        steps.append((hprev, z, r, n, un))
        H[:, t] = hcur
        hprev = hcur
    return H, (X, W, U, mask, steps)


def gru_backward(dH, cache):
    """Return ``(dX, dW, dU, db)``."""
    X, W, U, mask, steps = cache
    B, T, _ = X.shape
    h = U.shape[1]
    dA = np.zeros((B, T, 3 * h))
    dU = np.zeros_like(U)
    dnext = np.zeros((B, h))
    for t in range(T - 1, -1, -1):
        hprev, z, r, n, un = steps[t]
        m = mask[:, t, None]
        dh = dH[:, t] + dnext
        dhn = m * dh
        dprev = (1.0 - m) * dh + dhn * z
        dn = dhn * (1.0 - z)
        dz = dhn * (hprev - n)
        dan = dn * (1.0 - n * n)
        dr = dan * un
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        dA[:, t] = np.concatenate([daz, dar, dan], axis=1)
        du = np.concatenate([daz, dar, dan * r], axis=1)
        dU += du.T @ hprev
        dnext = dprev + du @ U
    dW = np.einsum("btj,btk->jk", dA, X)
    db = dA.sum(axis=(0, 1))
    return dA @ W, dW, dU, db


def bigru_batch_forward(X, lengths, fw: dict, bw: dict):
    """Bidirectional GRU; output ``(B, T, 2h)`` is zero at padded steps."""
    B, T, _ = X.shape
    rows = np.arange(B)[:, None]
    rev = _reverse_index(lengths, T)
    Hf, cf = gru_forward(X, lengths, fw["W"], fw["U"], fw["b"])
    Hr, cb = gru_forward(X[rows, rev], lengths, bw["W"], bw["U"], bw["b"])
    mask = length_mask(lengths, T)[..., None]
    H = np.concatenate([Hf, Hr[rows, rev]], axis=2) * mask
    return H, (cf, cb, rows, rev, mask, Hf.shape[2])


def bigru_batch_backward(dH, cache):
    """Return ``(dX, grads_fw, grads_bw)`` with grads keyed like the params."""
    cf, cb, rows, rev, mask, h = cache
    dH = dH * mask
    dXf, dWf, dUf, dbf = gru_backward(dH[..., :h], cf)
    dXr, dWb, dUb, dbb = gru_backward(dH[..., h:][rows, rev], cb)
    dX = dXf + dXr[rows, rev]
    return dX, {"W": dWf, "U": dUf, "b": dbf}, {"W": dWb, "U": dUb, "b": dbb}


def bigru_forward(seq, params: dict) -> np.ndarray:
    """biGRU over one sequence; ``params`` holds ``fw`` and ``bw`` dicts.

    Returns a ``(T, 2h)`` array whose row ``t`` is the forward state
    followed by the backward state at step ``t``.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise EmptyInputError("biGRU needs a non-empty (T, k) sequence")
    H, _ = bigru_batch_forward(seq[None], np.array([seq.shape[0]]), params["fw"], params["bw"])
    return H[0]


# ---------------------------------------------------------------------------
# 1-d convolution with max-pooling over time
# ---------------------------------------------------------------------------


def init_conv(rng: np.random.Generator, widths, n_filters: int, channels: int) -> dict:
    out = {}
    for w in widths:
        fan_in, fan_out = w * channels, n_filters
        s = np.sqrt(6.0 / (fan_in + fan_out))
        out[w] = {"K": rng.uniform(-s, s, (n_filters, w, channels)), "b": np.zeros(n_filters)}
    return out


def conv1d_pool_batch_forward(H, lengths, kernels: dict):
    """For each width: valid convolution over time, max-pool, then ReLU.

    Rows shorter than a width get a zero vector for that width (and no
    gradient).  Returns ``(B, F * n_widths)`` and a cache.
    """
    B, T, c = H.shape
    lengths = np.asarray(lengths)
    outs, caches = [], []
    for w, kp in kernels.items():
        K, bias = kp["K"], kp["b"]
        F = K.shape[0]
        short = lengths < w
        if short.any():
            log.debug("sequence shorter than conv width %d for %d rows; zero output", w, int(short.sum()))
        P = T - w + 1
        if P <= 0:
            outs.append(np.zeros((B, F)))
            caches.append(None)
            continue
        windows = np.concatenate([H[:, j : j + P] for j in range(w)], axis=2)
        Kf = K.reshape(F, w * c)
        pre = windows @ Kf.T + bias
        valid = np.arange(P)[None, :] < (lengths - w + 1)[:, None]
        masked = np.where(valid[..., None], pre, -np.inf)
        amax = masked.argmax(axis=1)
        mx = np.take_along_axis(pre, amax[:, None, :], axis=1)[:, 0, :]
        mx = np.where(short[:, None], 0.0, mx)
        outs.append(relu(mx))
        caches.append((w, windows, Kf, amax, mx, short, P, K.shape))
    return np.concatenate(outs, axis=1), (caches, H.shape, [kp["K"].shape[0] for kp in kernels.values()])


def conv1d_pool_batch_backward(dout, cache):
    """Return ``(dH, {width: {"K": dK, "b": db}})``."""
    caches, hshape, filter_counts = cache
    B, T, c = hshape
    dH = np.zeros(hshape)
    grads = {}
    col = 0
    for entry, F in zip(caches, filter_counts):
        d = dout[:, col : col + F]
        col += F
        if entry is None:
            continue
        w, windows, Kf, amax, mx, short, P, kshape = entry
        dmx = d * (mx > 0) * (~short)[:, None]
        dpre = np.zeros((B, P, F))
        np.put_along_axis(dpre, amax[:, None, :], dmx[:, None, :], axis=1)
        grads[w] = {
            "K": np.einsum("bpf,bpk->fk", dpre, windows).reshape(kshape),
            "b": dpre.sum(axis=(0, 1)),
        }
        dwin = dpre @ Kf
        for j in range(w):
            dH[:, j : j + P] += dwin[..., j * c : (j + 1) * c]
    return dH, grads


def conv1d_pool(seq, params: dict) -> np.ndarray:
    """Convolve-ReLU-max-pool one ``(T, c)`` sequence; ``params`` maps width -> {K, b}."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise EmptyInputError("conv pooling needs a non-empty (T, c) sequence")
    out, _ = conv1d_pool_batch_forward(seq[None], np.array([seq.shape[0]]), params)
    return out[0]


# ---------------------------------------------------------------------------
# Word embeddings
# ---------------------------------------------------------------------------


def load_word_embeddings(path, tokens, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Build a ``len(tokens) x dim`` matrix from a "token v1 ... vk" text file.

    Tokens missing from the file keep a small random initialization.
    """
    index = {t: i for i, t in enumerate(tokens)}
    E = rng.normal(0.0, 0.1, (len(tokens), dim))
    found = 0
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            i = index.get(parts[0])
            if i is None:
                continue
            vec = np.array([float(v) for v in parts[1:]])
            if vec.shape[0] != dim:
                raise ShapeError(f"{path}:{lineno}: expected {dim} values, got {vec.shape[0]}")
            E[i] = vec
            found += 1
    log.info("loaded %d/%d word vectors from %s", found, len(tokens), path)
    return E


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------


def _glorot(rng, fan_out, fan_in):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, (fan_out, fan_in))


@dataclass
class _MultiLevelEncoder:
    """Shared biGRU / conv / projection machinery for both branches."""

    config: EncoderConfig
    params: dict = field(default_factory=dict)
    bn: BatchNormState | None = None

    def _init_common(self, rng, input_dim: int, level1_dim: int):
        cfg = self.config
        h = cfg.gru_hidden_dim
        for direction in ("fw", "bw"):
            for k, v in init_gru(rng, input_dim, h).items():
                self.params[f"gru.{direction}.{k}"] = v
        for w, kp in init_conv(rng, cfg.conv_filter_widths, cfg.conv_filters_per_width, 2 * h).items():
            self.params[f"conv.{w}.K"] = kp["K"]
            self.params[f"conv.{w}.b"] = kp["b"]
        feat = level1_dim + 2 * h + cfg.conv_output_dim
        self.params["fc.W"] = _glorot(rng, cfg.common_dim, feat)
        self.params["fc.b"] = np.zeros(cfg.common_dim)
        self.bn = BatchNormState.create(cfg.common_dim)
        self.params["bn.gamma"] = self.bn.gamma
        self.params["bn.beta"] = self.bn.beta

    def _gru(self, direction):
        p = self.params
        return {k: p[f"gru.{direction}.{k}"] for k in ("W", "U", "b")}

    def _kernels(self):
        return {w: {"K": self.params[f"conv.{w}.K"], "b": self.params[f"conv.{w}.b"]}
                for w in self.config.conv_filter_widths}

    def _levels_forward(self, seq, lengths, level1):
        H, gcache = bigru_batch_forward(seq, lengths, self._gru("fw"), self._gru("bw"))
        level2 = H.sum(axis=1) / lengths[:, None]
        level3, ccache = conv1d_pool_batch_forward(H, lengths, self._kernels())
        return (level1, level2, level3), (gcache, ccache, lengths, level1.shape[1], level2.shape[1])

    def _levels_backward(self, df, cache, grads):
        gcache, ccache, lengths, n1, n2 = cache
        d2 = df[:, n1 : n1 + n2]
        d3 = df[:, n1 + n2 :]
        dH, cgrads = conv1d_pool_batch_backward(d3, ccache)
        T = dH.shape[1]
        dH += (d2 / lengths[:, None])[:, None, :] * length_mask(lengths, T)[..., None]
        dseq, gfw, gbw = bigru_batch_backward(dH, gcache)
        for direction, g in (("fw", gfw), ("bw", gbw)):
            for k, v in g.items():
                grads[f"gru.{direction}.{k}"] = v
        for w in self.config.conv_filter_widths:
            g = cgrads.get(w)
            grads[f"conv.{w}.K"] = g["K"] if g else np.zeros_like(self.params[f"conv.{w}.K"])
            grads[f"conv.{w}.b"] = g["b"] if g else np.zeros_like(self.params[f"conv.{w}.b"])
        return dseq

    def _project(self, f, train: bool, update_running: bool):
        y, lcache = linear_forward(f, self.params["fc.W"], self.params["fc.b"])
        self.bn.mode = "train" if train else "infer"
        out, bcache = batchnorm_forward(y, self.bn, update_running=update_running)
        return out, (lcache, bcache)

    def _project_backward(self, dout, cache, grads):
        lcache, bcache = cache
        dy, grads["bn.gamma"], grads["bn.beta"] = batchnorm_backward(dout, bcache)
        df, grads["fc.W"], grads["fc.b"] = linear_backward(dy, lcache)
        return df

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def set_bn_arrays(self):
        """Re-point the batch-norm state at the gamma/beta arrays in ``params``."""
        self.bn.gamma = self.params["bn.gamma"]
        self.bn.beta = self.params["bn.beta"]


class VisualEncoder(_MultiLevelEncoder):
    @classmethod
    def create(cls, config: EncoderConfig, rng: np.random.Generator) -> "VisualEncoder":
        enc = cls(config)
        enc._init_common(rng, config.frame_feature_dim, config.frame_feature_dim)
        return enc

    @property
    def feature_dim(self) -> int:
        c = self.config
        return c.frame_feature_dim + 2 * c.gru_hidden_dim + c.conv_output_dim

    def features(self, X, lengths):
        """Multi-level features ``f(v)`` for a padded frame batch."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != self.config.frame_feature_dim:
            raise ShapeError(
                f"frames must be (B, T, {self.config.frame_feature_dim}), got {X.shape}"
            )
        lengths = np.asarray(lengths)
        if lengths.min() < 1:
            raise EmptyInputError("every video needs at least one frame")
        mask = length_mask(lengths, X.shape[1])[..., None]
        level1 = (X * mask).sum(axis=1) / lengths[:, None]
        levels, cache = self._levels_forward(X, lengths, level1)
        return np.concatenate(levels, axis=1), levels, (cache, mask, lengths)

    def forward(self, X, lengths, train: bool = False, update_running: bool = True):
        f, levels, fcache = self.features(X, lengths)
        phi, pcache = self._project(f, train, update_running)
        return phi, (fcache, pcache, levels)

    def backward(self, dphi, cache):
        """Return ``(grads, dX)``; ``dX`` is the gradient w.r.t. the frames."""
        (lcache, mask, lengths), pcache, _ = cache
        grads = {}
        df = self._project_backward(dphi, pcache, grads)
        dX = self._levels_backward(df, lcache, grads)
        n1 = self.config.frame_feature_dim
        dX = dX + (df[:, :n1] / lengths[:, None])[:, None, :] * mask
        return grads, dX


class TextEncoder(_MultiLevelEncoder):
    @classmethod
    def create(cls, config: EncoderConfig, rng: np.random.Generator,
               embeddings: np.ndarray | None = None) -> "TextEncoder":
        enc = cls(config)
        V, e = config.vocab_size, config.word_embedding_dim
        if embeddings is None:
            embeddings = rng.normal(0.0, 0.1, (V, e))
        elif embeddings.shape != (V, e):
            raise ShapeError(f"embedding matrix must be {(V, e)}, got {embeddings.shape}")
        enc.params["embed"] = np.array(embeddings, dtype=np.float64)
        enc._init_common(rng, e, V)
        return enc

    @property
    def feature_dim(self) -> int:
        c = self.config
        return c.vocab_size + 2 * c.gru_hidden_dim + c.conv_output_dim

    def features(self, ids, lengths):
        ids = np.asarray(ids, dtype=np.int64)
        lengths = np.asarray(lengths)
        V = self.config.vocab_size
        if lengths.min() < 1:
            raise EmptyQueryError("every query needs at least one in-vocabulary token")
        mask = length_mask(lengths, ids.shape[1]).astype(bool)
        if ids[mask].min() < 0 or ids[mask].max() >= V:
            raise ShapeError("token index outside the vocabulary")
        B = ids.shape[0]
        level1 = np.zeros((B, V))
        rows = np.repeat(np.arange(B), mask.sum(axis=1))
        np.add.at(level1, (rows, ids[mask]), 1.0)
        level1 /= lengths[:, None]
        seq = self.params["embed"][ids] * mask[..., None]
        levels, cache = self._levels_forward(seq, lengths, level1)
        return np.concatenate(levels, axis=1), levels, (cache, ids, mask)

    def forward(self, ids, lengths, train: bool = False, update_running: bool = True):
        f, levels, fcache = self.features(ids, lengths)
        tau, pcache = self._project(f, train, update_running)
        return tau, (fcache, pcache, levels)

    def backward(self, dtau, cache):
        (lcache, ids, mask), pcache, _ = cache
        grads = {}
        df = self._project_backward(dtau, pcache, grads)
        dseq = self._levels_backward(df, lcache, grads)
        dE = np.zeros_like(self.params["embed"])
        if self.config.trainable_embeddings:
            np.add.at(dE, ids[mask], dseq[mask])
        grads["embed"] = dE
        return grads


def _single(levels, i=0):
    return MultiLevelFeature(levels[0][i].copy(), levels[1][i].copy(), levels[2][i].copy())


def encode_visual(frames, encoder: VisualEncoder):
    """Encode one video with inference batch-norm: ``(MultiLevelFeature, phi)``."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptyInputError("a video needs at least one frame")
    if frames.shape[1] != encoder.config.frame_feature_dim:
        raise ShapeError(
            f"frame dim {frames.shape[1]} != configured {encoder.config.frame_feature_dim}"
        )
    phi, cache = encoder.forward(frames[None], np.array([frames.shape[0]]), train=False)
    return _single(cache[2]), phi[0]


def encode_text(tokens, encoder: TextEncoder):
    """Encode one token-index sequence with inference batch-norm: ``(MultiLevelFeature, tau)``."""
    tokens = list(tokens)
    if not tokens:
        raise EmptyQueryError("query has no in-vocabulary tokens")
    tau, cache = encoder.forward(np.array([tokens]), np.array([len(tokens)]), train=False)
    return _single(cache[2]), tau[0]
