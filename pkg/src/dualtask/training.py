"""Dual-task training loop, validation-based model selection and the
binary checkpoint format."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import BatchPlan, Dataset, Vocabulary, caption_labels, tokenize
from .encoding import EncoderConfig
from .errors import FormatError, TrainingDivergenceError
from .model import DualTaskModel
from .numeric import Adam
from .objectives import LossHyperParams

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    margin: float = 0.2
    lam: float = 0.2
    seed: int = 0
    validation_metric: str = "mrr"
    checkpoint_path: str | None = None
    patience: int = 5
    classification_loss: str = "class_sensitive"
    matching_weight: float = 1.0
    classification_weight: float = 1.0
    reduction: str = "mean"
    val_fraction: float = 0.0
    prediction_clip: float = 1e-7

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.validation_metric != "mrr":
            raise ValueError(f"unsupported validation metric {self.validation_metric!r}")
        if self.classification_loss not in ("class_sensitive", "bce"):
            raise ValueError(f"unknown classification loss {self.classification_loss!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    @property
    def loss_hyperparams(self) -> LossHyperParams:
        return LossHyperParams(margin=self.margin, lam=self.lam, prediction_clip=self.prediction_clip,
                               reduction=self.reduction)


@dataclass
class TrainHistory:
    batch_losses: list = field(default_factory=list)  # (epoch, batch, matching, classification, combined)
    epoch_losses: list = field(default_factory=list)
    validation_scores: list = field(default_factory=list)


@dataclass
class ModelCheckpoint:
    model: DualTaskModel
    vocabulary: Vocabulary
    epoch: int
    validation_score: float
    train_config: TrainConfig = field(default_factory=TrainConfig)
    history: TrainHistory = field(default_factory=TrainHistory)

    @property
    def encoder_config(self) -> EncoderConfig:
        return self.model.config

    @property
    def vocab_hash(self) -> str:
        return self.vocabulary.hash


# ---------------------------------------------------------------------------
# Pair preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedPairs:
    video_ids: list
    frames: list
    tokens: list
    labels: np.ndarray

    def __len__(self):
        return len(self.video_ids)

    def take(self, idx):
        return ([self.frames[i] for i in idx], [self.tokens[i] for i in idx],
                self.labels[idx], [self.video_ids[i] for i in idx])


def prepare_pairs(data: Dataset, vocab: Vocabulary) -> PreparedPairs:
    """Encode captions to token ids and attach each video's label vector.

    Captions without any vocabulary token cannot be encoded and are skipped.
    """
    labels = {}
    vids, frames, toks, rows = [], [], [], []
    skipped = 0
    for pair in data.pairs:
        ids = vocab.encode(tokenize(pair.caption))
        if not ids:
            skipped += 1
            continue
        if pair.video_id not in labels:
            labels[pair.video_id] = caption_labels(pair.video_id, data.captions[pair.video_id], vocab).values
        vids.append(pair.video_id)
        frames.append(data.videos[pair.video_id])
        toks.append(ids)
        rows.append(labels[pair.video_id])
    if skipped:
        log.warning("skipped %d captions with no vocabulary token", skipped)
    Y = np.array(rows) if rows else np.zeros((0, vocab.size))
    return PreparedPairs(vids, frames, toks, Y)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def mean_reciprocal_rank(video_emb, video_ids, text_emb, target_ids) -> float:
    """MRR of each caption's own video under cosine scoring.

    Ties are broken by ascending video id, as in every ranked list.
    """
    V = np.asarray(video_emb, dtype=np.float64)
    Q = np.asarray(text_emb, dtype=np.float64)
    V = V / np.linalg.norm(V, axis=1, keepdims=True)
    Q = Q / np.linalg.norm(Q, axis=1, keepdims=True)
    S = Q @ V.T
    order = {v: i for i, v in enumerate(video_ids)}
    ids = np.asarray(video_ids, dtype=object)
    rr = []
    for q, target in enumerate(target_ids):
        j = order[target]
        s = S[q]
        ahead = np.sum(s > s[j]) + np.sum((s == s[j]) & (ids < target))
        rr.append(1.0 / (1 + ahead))
    return float(np.mean(rr))


def validate(model: DualTaskModel, data: Dataset, vocab: Vocabulary) -> float:
    vids = data.video_ids
    phi = model.embed_videos([data.videos[v] for v in vids])
    texts, targets = [], []
    for pair in data.pairs:
        ids = vocab.encode(tokenize(pair.caption))
        if ids:
            texts.append(ids)
            targets.append(pair.video_id)
    if not texts:
        return 0.0
    tau = model.embed_texts(texts)
    return mean_reciprocal_rank(phi, vids, tau, targets)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def evaluate_loss(model: DualTaskModel, pairs: PreparedPairs, config: TrainConfig, epoch: int = 0) -> float:
    """Mean combined loss over a fixed batch plan without touching any state."""
    plan = BatchPlan(config.seed, config.batch_size, len(pairs))
    hp = config.loss_hyperparams
    total, n = 0.0, 0
    for idx in plan.batches(epoch):
        frames, toks, Y, vids = pairs.take(idx)
        b, _ = model.loss_and_grads(frames, toks, Y, vids, hp, config.classification_loss,
                                    config.matching_weight, config.classification_weight,
                                    update_running=False, with_grads=False)
        total += b.combined * len(idx)
        n += len(idx)
    return total / n


def _split_validation(data: Dataset, fraction: float, seed: int):
    vids = data.video_ids
    n_val = max(1, int(round(fraction * len(vids))))
    perm = np.random.default_rng([seed, 7919]).permutation(len(vids))
    val = {vids[i] for i in perm[:n_val]}
    return data.subset([v for v in vids if v not in val]), data.subset(sorted(val))


def train(
    config: TrainConfig,
    data: Dataset,
    vocab: Vocabulary,
    encoder_config: EncoderConfig | None = None,
    validation: Dataset | None = None,
    embeddings: np.ndarray | None = None,
    model: DualTaskModel | None = None,
) -> ModelCheckpoint:
    """Train all parameters jointly on the dual-task loss.

    Selects the epoch with the best validation MRR and stops early after
    ``config.patience`` epochs without improvement.
    """
    if validation is None and config.val_fraction > 0:
        data, validation = _split_validation(data, config.val_fraction, config.seed)
    validation = validation if validation is not None else data
    if len(vocab) == 0:
        raise ValueError("vocabulary is empty")
    if encoder_config is None:
        encoder_config = EncoderConfig(vocab_size=vocab.size)
    if encoder_config.vocab_size != vocab.size:
        raise ValueError(f"encoder vocab_size {encoder_config.vocab_size} != vocabulary size {vocab.size}")

    pairs = prepare_pairs(data, vocab)
    if len(pairs) < 2:
        raise ValueError("training needs at least two encodable pairs")
    if model is None:
        model = DualTaskModel.create(encoder_config, seed=config.seed, embeddings=embeddings)
    params = model.named_params()
    if not encoder_config.trainable_embeddings:
        params = {k: v for k, v in params.items() if k != "txt.embed"}
    opt = Adam(lr=config.lr)
    plan = BatchPlan(config.seed, config.batch_size, len(pairs))
    hp = config.loss_hyperparams
    history = TrainHistory()

    best_score, best_epoch, best_model = -math.inf, 0, model.copy()
    stale = 0
    for epoch in range(config.epochs):
        epoch_total, seen = 0.0, 0
        for bi, idx in enumerate(plan.batches(epoch)):
            frames, toks, Y, vids = pairs.take(idx)
            b, grads = model.loss_and_grads(frames, toks, Y, vids, hp, config.classification_loss,
                                            config.matching_weight, config.classification_weight)
            if not np.isfinite(b.combined):
                raise TrainingDivergenceError(
                    f"non-finite loss at epoch {epoch} batch {bi}: matching={b.matching!r} "
                    f"classification={b.classification!r}"
                )
            opt.step(params, grads)
            history.batch_losses.append((epoch, bi, b.matching, b.classification, b.combined))
            epoch_total += b.combined * len(idx)
            seen += len(idx)
        history.epoch_losses.append(epoch_total / max(seen, 1))
        score = validate(model, validation, vocab)
        history.validation_scores.append(score)
        log.info("epoch %d loss %.5f val-mrr %.4f", epoch + 1, history.epoch_losses[-1], score)
        if score > best_score:
            best_score, best_epoch, best_model = score, epoch + 1, model.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop after %d stale epochs", stale)
                break

    ckpt = ModelCheckpoint(best_model, vocab, best_epoch, best_score, config, history)
    if config.checkpoint_path:
        save_checkpoint(ckpt, config.checkpoint_path)
    return ckpt


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DTCK"
CHECKPOINT_VERSION = 1


def _blocks(model: DualTaskModel):
    blocks = dict(model.named_params())
    for prefix, bn in model.bn_states().items():
        blocks[f"{prefix}.bn.running_mean"] = bn.running_mean
        blocks[f"{prefix}.bn.running_var"] = bn.running_var
    return blocks


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    """magic, u32 version, u64 header length, JSON header, float64 blocks."""
    blocks = _blocks(ckpt.model)
    header = {
        "encoder_config": ckpt.model.config.as_dict(),
        "train_config": asdict(ckpt.train_config),
        "vocab_hash": ckpt.vocabulary.hash,
        "vocabulary": [list(e) for e in ckpt.vocabulary.entries],
        "epoch": ckpt.epoch,
        "validation_score": ckpt.validation_score,
        "bn": {p: {"momentum": s.momentum, "epsilon": s.epsilon} for p, s in ckpt.model.bn_states().items()},
        "blocks": [[name, list(arr.shape)] for name, arr in blocks.items()],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(raw)) + raw)
        for arr in blocks.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, vocab: Vocabulary | None = None) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a DTCK checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    stored_vocab = Vocabulary.from_entries(header["vocabulary"])
    if stored_vocab.hash != header["vocab_hash"]:
        raise FormatError(f"{path}: embedded vocabulary does not match its hash")
    if vocab is not None and vocab.hash != header["vocab_hash"]:
        raise FormatError(f"{path}: vocabulary hash mismatch (checkpoint {header['vocab_hash'][:12]}, "
                          f"given {vocab.hash[:12]})")
    enc = EncoderConfig(**header["encoder_config"])
    model = DualTaskModel.create(enc, seed=0)
    blocks = _blocks(model)
    off = 16 + hlen
    for name, shape in header["blocks"]:
        if name not in blocks or list(blocks[name].shape) != shape:
            raise FormatError(f"{path}: unexpected block {name} {shape}")
        n = int(np.prod(shape))
        if off + 8 * n > len(data):
            raise FormatError(f"{path}: truncated at block {name}")
        blocks[name][...] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
    for prefix, s in model.bn_states().items():
        s.momentum = header["bn"][prefix]["momentum"]
        s.epsilon = header["bn"][prefix]["epsilon"]
    known = {f.name for f in fields(TrainConfig)}
    tcfg = TrainConfig(**{k: v for k, v in header["train_config"].items() if k in known})
    return ModelCheckpoint(model, stored_vocab, header["epoch"], header["validation_score"], tcfg)
