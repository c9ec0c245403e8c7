"""Command-line entry point: ``dualtask <command> [options]``.

Every option can also be given in a ``key = value`` config file passed
with ``--config``; flags override the file.  Exit status is 0 on success,
1 on a user error (bad flag, missing input, malformed file) and 2 on an
internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from .boolean import LeafScorer, eval_boolean, eval_single_vector
from .encoding import EncoderConfig, load_word_embeddings
from .errors import DualTaskError, EmptyInputError
from .evaluation import (
    DEFAULT_DEPTH,
    JudgmentSet,
    Stratum,
    average_precision,
    concept_recall_at_k,
    inferred_ap,
    randomization_test,
    read_judgments,
    read_run,
    read_strata,
    write_judgments,
    write_run,
    write_strata,
)
from .index import (
    RankedList,
    build_index,
    encode_query,
    export_index_tsv,
    load_index,
    query_to_concepts,
    save_index,
    search_combined,
)
from .interpret import PruneSpec, decode_concepts, prune_by_keywords, pruning_report
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("dualtask")

COMMANDS = ("gen-synthetic", "build-vocab", "train", "index", "search", "bool-search",
            "concepts", "prune", "eval", "sig-test")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration keys
# ---------------------------------------------------------------------------


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _str_list(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


@dataclass(frozen=True)
class Key:
    type: object
    default: object
    help: str


_TRAIN_HELP = {
    "epochs": "training epochs",
    "batch_size": "pairs per mini-batch",
    "lr": "Adam learning rate",
    "margin": "ranking-loss margin",
    "lam": "weight of the positive-class term in the class-sensitive loss",
    "seed": "seed for every random choice",
    "validation_metric": "model-selection metric (mrr)",
    "checkpoint_path": "also save the best checkpoint here",
    "patience": "early-stop after this many epochs without improvement",
    "classification_loss": "class_sensitive or bce",
    "matching_weight": "weight of the matching loss",
    "classification_weight": "weight of the classification loss",
    "reduction": "batch reduction of the losses (mean or sum)",
    "val_fraction": "fraction of training videos held out for validation",
    "prediction_clip": "clip predicted probabilities to [c, 1-c] inside the loss",
}
_ENCODER_HELP = {
    "frame_feature_dim": "frame feature dimension (default: inferred from the features)",
    "word_embedding_dim": "word embedding dimension",
    "gru_hidden_dim": "hidden size of each GRU direction",
    "conv_filter_widths": "comma-separated 1-d convolution widths",
    "conv_filters_per_width": "filters per convolution width",
    "common_dim": "dimension of the common space",
    "trainable_embeddings": "update word embeddings during training (true/false)",
}


def _registry() -> dict:
    keys = {}
    for f in fields(TrainConfig):
        default = f.default
        typ = {int: int, float: float, str: str}.get(type(default), str)
        keys[f.name] = Key(typ, default, _TRAIN_HELP[f.name])
    for f in fields(EncoderConfig):
        if f.name == "vocab_size":
            continue
        default = f.default
        if f.name == "frame_feature_dim":
            keys[f.name] = Key(int, None, _ENCODER_HELP[f.name])
        elif f.name == "conv_filter_widths":
            keys[f.name] = Key(_int_list, default, _ENCODER_HELP[f.name])
        elif f.name == "trainable_embeddings":
            keys[f.name] = Key(_bool, default, _ENCODER_HELP[f.name])
        else:
            keys[f.name] = Key(int, default, _ENCODER_HELP[f.name])
    other = {
        # paths
        "captions": Key(str, None, "caption file (video_id<TAB>caption)"),
        "features": Key(str, None, "frame features (.dtff binary or text)"),
        "val_captions": Key(str, None, "validation caption file"),
        "val_features": Key(str, None, "validation frame features"),
        "vocab": Key(str, None, "vocabulary file"),
        "stopwords": Key(str, None, "stopword list, one per line (default: built-in English list)"),
        "word_embeddings": Key(str, None, "pretrained word vectors (token v1 v2 ...)"),
        "model": Key(str, None, "model checkpoint (.dtck)"),
        "index": Key(str, None, "video index (.dtix)"),
        "run": Key(str, None, "run file (qid Q0 video_id rank score tag)"),
        "run_a": Key(str, None, "first run file"),
        "run_b": Key(str, None, "second run file"),
        "qrels": Key(str, None, "judgment file (qid video_id rel stratum_id)"),
        "strata": Key(str, None, "strata file (stratum_id depth_from depth_to rate)"),
        "queries": Key(str, None, "query file (qid<TAB>text)"),
        "ground_truth": Key(str, None, "ground-truth concepts (video_id<TAB>token token ...)"),
        "out": Key(str, None, "output path (default: standard output where allowed)"),
        "out_dir": Key(str, None, "output directory"),
        "tsv": Key(str, None, "also write a human-readable TSV dump here"),
        # search and evaluation
        "query": Key(str, None, "a single query text"),
        "query_id": Key(str, "q0", "query id used with --query"),
        "theta": Key(float, 0.3, "fusion weight of the concept score"),
        "topk": Key(int, DEFAULT_DEPTH, "result depth"),
        "scorer": Key(str, "combined", "embedding, concept or combined"),
        "mode": Key(str, "split", "split: per-leaf retrieval and fusion; single: one vector"),
        "run_tag": Key(str, None, "run tag (default: hash of the effective config)"),
        "concept_topk": Key(int, None, "store only each video's top-k concept probabilities"),
        "video": Key(_str_list, (), "comma-separated video ids (default: all)"),
        "k": Key(int, 10, "decoded concepts per video"),
        "keywords": Key(_str_list, (), "comma-separated pruning keywords"),
        "concept_depth": Key(int, 30, "decoded-concept depth searched for keywords"),
        "result_depth": Key(int, 10, "number of top results pruned"),
        "metric": Key(str, None, "ap or infap (default: infap when --strata is given)"),
        "iterations": Key(int, 10000, "randomization-test iterations"),
        "min_count": Key(int, 5, "minimum number of captions containing a token"),
        # synthetic corpus
        "n_videos": Key(int, 200, "number of synthetic videos"),
        "n_concepts": Key(int, 20, "number of latent concepts"),
        "frames_min": Key(int, 8, "minimum frames per video"),
        "frames_max": Key(int, 16, "maximum frames per video"),
        "captions_per_video": Key(int, 3, "captions per video"),
        "noise": Key(float, 0.5, "frame noise standard deviation"),
        "style_lexicon": Key(int, 0, "size of the per-video style word lexicon"),
        "style_words": Key(int, 0, "style words per video"),
        "n_bool_queries": Key(int, 10, "number of NOT queries"),
        # process
        "threads": Key(int, 1, "upper bound on internal worker threads"),
        "events": Key(str, None, "append JSON-lines phase events here"),
        "repro_log": Key(str, None, "write the effective config here (config-file format)"),
    }
    keys.update(other)
    return keys


KEYS = _registry()
_TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
_ENCODER_KEYS = [f.name for f in fields(EncoderConfig) if f.name != "vocab_size"]
_COMMON = ["seed", "threads", "events", "repro_log"]

# command -> (keys offered as flags, required keys, description)
SPECS = {
    "gen-synthetic": (
        ["out_dir", "n_videos", "n_concepts", "frame_feature_dim", "frames_min", "frames_max",
         "captions_per_video", "noise", "style_lexicon", "style_words", "n_bool_queries"],
        ["out_dir"],
        "Write a synthetic corpus with queries and complete judgments.",
    ),
    "build-vocab": (["captions", "out", "min_count", "stopwords"], ["captions", "out"],
                    "Build the concept vocabulary from training captions."),
    "train": (
        ["captions", "features", "vocab", "out", "val_captions", "val_features", "word_embeddings"]
        + [k for k in _TRAIN_KEYS if k != "seed"] + _ENCODER_KEYS,
        ["captions", "features", "vocab", "out"],
        "Train the dual-task model and save the best checkpoint.",
    ),
    "index": (["model", "features", "out", "concept_topk", "tsv"], ["model", "features", "out"],
              "Embed and decode every video into an index file."),
    "search": (["index", "model", "query", "query_id", "queries", "theta", "topk", "scorer", "run_tag", "out"],
               ["index", "model"], "Rank videos for free-text queries; writes run lines."),
    "bool-search": (["index", "model", "query", "query_id", "queries", "theta", "topk", "scorer", "mode",
                     "run_tag", "out"],
                    ["index", "model"], "Rank videos for Boolean queries; writes run lines."),
    "concepts": (["index", "model", "video", "k", "ground_truth", "out"], ["index", "model"],
                 "Show each video's top decoded concepts."),
    "prune": (["index", "model", "run", "keywords", "concept_depth", "result_depth", "qrels", "run_tag", "out"],
              ["index", "model", "run", "keywords"],
              "Keep top results whose decoded concepts contain every keyword."),
    "eval": (["run", "qrels", "strata", "metric", "topk", "out"], ["run", "qrels"],
             "Score a run file against judgments."),
    "sig-test": (["run_a", "run_b", "qrels", "strata", "metric", "topk", "iterations", "out"],
                 ["run_a", "run_b", "qrels"], "Paired randomization test between two runs."),
}

# keys that do not change any output and stay out of the run-tag hash
_UNHASHED = {"out", "out_dir", "tsv", "events", "repro_log", "threads", "run_tag"}


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        if key not in KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _convert(key, value.strip())
    return out


def _convert(key: str, value):
    try:
        return KEYS[key].type(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid value for {key}: {value!r} ({exc})") from None


def _format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def config_hash(cfg: dict) -> str:
    items = {k: _format_value(v) for k, v in sorted(cfg.items()) if k not in _UNHASHED and v is not None}
    return hashlib.sha256(json.dumps(items, sort_keys=True).encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualtask", description="Dual-task video search: concept-free embedding "
                     "matching and concept decoding, Boolean queries and evaluation.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name in COMMANDS:
        keys, required, desc = SPECS[name]
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", help="key = value config file; flags override it")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
        for key in list(keys) + _COMMON:
            spec = KEYS[key]
            default = spec.default
            shown = f" (default: {_format_value(default)})" if default not in (None, ()) else ""
            req = " [required]" if key in required else ""
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=argparse.SUPPRESS,
                           metavar=key.upper(), help=spec.help + shown + req)
    return parser


def effective_config(command: str, ns: argparse.Namespace) -> dict:
    keys, required, _ = SPECS[command]
    cfg = {k: KEYS[k].default for k in list(keys) + _COMMON}
    if getattr(ns, "config", None):
        cfg.update(read_config_file(ns.config))
    for k in list(keys) + _COMMON:
        if k in vars(ns):
            cfg[k] = _convert(k, vars(ns)[k])
    missing = [k for k in required if cfg.get(k) in (None, ())]
    if missing:
        raise UsageError(f"dualtask {command}: missing required option(s) "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    if cfg.get("run_tag") is None and "run_tag" in keys:
        cfg["run_tag"] = "dt-" + config_hash(cfg)
    return cfg


# ---------------------------------------------------------------------------
# Event log
# ---------------------------------------------------------------------------


class EventLog:
    """One JSON object per phase: name, wall time and key metrics."""

    def __init__(self, path):
        self.path = path
        self.t0 = time.perf_counter()

    def emit(self, phase: str, **metrics):
        now = time.perf_counter()
        record = {"phase": phase, "wall_time": round(now - self.t0, 6), **metrics}
        self.t0 = now
        log.info("%s", json.dumps(record, sort_keys=True))
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True, default=str) + "\n")


class _Output:
    def __init__(self, path):
        self.path = path

    def __enter__(self):
        self.fh = open(self.path, "w", encoding="utf-8", newline="\n") if self.path else sys.stdout
        return self.fh

    def __exit__(self, *exc):
        if self.path:
            self.fh.close()
        else:
            self.fh.flush()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _read_queries(cfg) -> list:
    if cfg.get("query") is not None and cfg.get("queries"):
        raise UsageError("give either --query or --queries, not both")
    if cfg.get("query") is not None:
        return [(cfg["query_id"], cfg["query"])]
    if not cfg.get("queries"):
        raise UsageError("missing --query or --queries")
    out = []
    with open(cfg["queries"], encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            qid, sep, text = line.partition("\t")
            if not sep:
                raise UsageError(f"{cfg['queries']}:{lineno}: expected 'qid<TAB>text'")
            out.append((qid, text))
    return out


def _load_model_and_index(cfg):
    ckpt = load_checkpoint(cfg["model"])
    index = load_index(cfg["index"])
    if index.vocab_hash and index.vocab_hash != ckpt.vocab_hash:
        raise UsageError("index and model were built with different vocabularies")
    return ckpt, index


def cmd_gen_synthetic(cfg, events):
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    dim = cfg["frame_feature_dim"] or 32
    ds = data_mod.generate_synthetic_corpus(
        cfg["seed"], cfg["n_videos"], cfg["n_concepts"], dim, (cfg["frames_min"], cfg["frames_max"]),
        captions_per_video=cfg["captions_per_video"], noise=cfg["noise"],
        style_lexicon=cfg["style_lexicon"], style_words_per_video=cfg["style_words"],
    )
    data_mod.write_captions(out / "captions.tsv", ds.captions)
    data_mod.write_features(out / "features.dtff", ds.videos)
    with open(out / "latent.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for vid, concepts in ds.latent.items():
            fh.write(f"{vid}\t{' '.join(concepts)}\n")
    strata = {"all": Stratum(1, DEFAULT_DEPTH, 1.0)}
    write_strata(out / "strata.txt", strata)
    for stem, kind, n in (("queries", "single", None), ("bool_queries", "and_not", cfg["n_bool_queries"])):
        qs = data_mod.synthetic_queries(ds, kind, n=n, seed=cfg["seed"])
        with open(out / f"{stem}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            for q in qs:
                fh.write(f"{q.qid}\t{q.text}\n")
        write_judgments(out / f"{stem}_qrels.txt",
                        [JudgmentSet.complete(q.qid, {v: v in q.relevant for v in ds.video_ids}) for q in qs])
    events.emit("gen-synthetic", videos=len(ds.videos), concepts=cfg["n_concepts"])
    return 0


def cmd_build_vocab(cfg, events):
    captions = data_mod.read_captions(cfg["captions"])
    stop = data_mod.load_stopwords(cfg["stopwords"]) if cfg["stopwords"] else None
    vocab = data_mod.build_vocabulary([c for caps in captions.values() for c in caps], cfg["min_count"], stop)
    if len(vocab) == 0:
        raise UsageError("no token reaches the minimum count; the vocabulary would be empty")
    vocab.save(cfg["out"])
    events.emit("build-vocab", size=len(vocab), hash=vocab.hash)
    return 0


def cmd_train(cfg, events):
    ds = data_mod.load_dataset(cfg["captions"], cfg["features"])
    vocab = data_mod.Vocabulary.load(cfg["vocab"])
    val = None
    if cfg["val_captions"] or cfg["val_features"]:
        if not (cfg["val_captions"] and cfg["val_features"]):
            raise UsageError("--val-captions and --val-features go together")
        val = data_mod.load_dataset(cfg["val_captions"], cfg["val_features"])
    dims = {X.shape[1] for X in ds.videos.values()}
    if len(dims) != 1:
        raise UsageError(f"videos have mixed feature dimensions {sorted(dims)}")
    frame_dim = cfg["frame_feature_dim"] or dims.pop()
    enc = EncoderConfig(frame_feature_dim=frame_dim, vocab_size=vocab.size,
                        **{k: cfg[k] for k in _ENCODER_KEYS if k != "frame_feature_dim"})
    emb = None
    if cfg["word_embeddings"]:
        emb = load_word_embeddings(cfg["word_embeddings"], vocab.tokens, enc.word_embedding_dim,
                                   np.random.default_rng(cfg["seed"]))
    tcfg = TrainConfig(**{k: cfg[k] for k in _TRAIN_KEYS})
    events.emit("load", videos=len(ds.videos), vocab=len(vocab))
    ckpt = train(tcfg, ds, vocab, enc, validation=val, embeddings=emb)
    save_checkpoint(ckpt, cfg["out"])
    events.emit("train", best_epoch=ckpt.epoch, validation_mrr=ckpt.validation_score,
                epochs_run=len(ckpt.history.epoch_losses), final_loss=ckpt.history.epoch_losses[-1])
    return 0


def cmd_index(cfg, events):
    ckpt = load_checkpoint(cfg["model"])
    videos = data_mod.read_features(cfg["features"])
    index = build_index(ckpt, videos, cfg["concept_topk"])
    save_index(index, cfg["out"])
    if cfg["tsv"]:
        export_index_tsv(index, cfg["tsv"], ckpt.vocabulary)
    events.emit("index", videos=len(index), flagged=sum(e.flagged for e in index.entries))
    return 0


def _search_one(index, ckpt, qid, text, cfg) -> RankedList:
    scorer, theta, depth = cfg["scorer"], cfg["theta"], cfg["topk"]
    if scorer == "combined":
        return search_combined(index, text, ckpt, theta, qid, depth)
    if scorer == "embedding":
        scores = index.embedding_scores(encode_query(text, ckpt))
    elif scorer == "concept":
        scores = index.concept_scores(query_to_concepts(text, ckpt.vocabulary))
    else:
        raise UsageError(f"unknown scorer {scorer!r}")
    return RankedList.from_scores(index.video_ids, scores, qid, scorer, depth)


def _write_lists(cfg, lists):
    with _Output(cfg["out"]) as fh:
        for ranked in lists:
            for line in ranked.to_run_lines(cfg["run_tag"]):
                fh.write(line + "\n")


def _run_queries(cfg, fn):
    queries = _read_queries(cfg)
    lists = []
    for qid, text in queries:
        try:
            ranked = fn(qid, text)
        except EmptyInputError as exc:
            if len(queries) == 1:
                raise
            log.warning("query %s skipped: %s", qid, exc)
            continue
        for note in ranked.notes:
            log.warning("query %s: %s", qid, note)
        lists.append(ranked)
    _write_lists(cfg, lists)
    return lists


def cmd_search(cfg, events):
    ckpt, index = _load_model_and_index(cfg)
    lists = _run_queries(cfg, lambda qid, text: _search_one(index, ckpt, qid, text, cfg))
    events.emit("search", queries=len(lists), scorer=cfg["scorer"], theta=cfg["theta"])
    return 0


def cmd_bool_search(cfg, events):
    ckpt, index = _load_model_and_index(cfg)
    if cfg["mode"] == "split":
        scorer = LeafScorer(cfg["scorer"], ckpt, cfg["theta"])

        def fn(qid, text):
            return eval_boolean(index, text, scorer, query_id=qid, depth=cfg["topk"])
    elif cfg["mode"] == "single":
        def fn(qid, text):
            return eval_single_vector(index, text, ckpt, cfg["theta"], qid, cfg["topk"])
    else:
        raise UsageError(f"unknown mode {cfg['mode']!r}")
    lists = _run_queries(cfg, fn)
    events.emit("bool-search", queries=len(lists), mode=cfg["mode"])
    return 0


def _read_ground_truth(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            vid, _, toks = line.rstrip("\n").partition("\t")
            if vid:
                out[vid] = data_mod.tokenize(toks)
    return out


def cmd_concepts(cfg, events):
    ckpt, index = _load_model_and_index(cfg)
    vids = list(cfg["video"]) or index.video_ids
    unknown = [v for v in vids if v not in index.video_ids]
    if unknown:
        raise UsageError(f"unknown video id(s): {', '.join(unknown[:5])}")
    k = min(cfg["k"], ckpt.vocabulary.size)
    truth = _read_ground_truth(cfg["ground_truth"]) if cfg["ground_truth"] else {}
    recalls = []
    with _Output(cfg["out"]) as fh:
        for vid in vids:
            dec = decode_concepts(index.entry(vid), ckpt.vocabulary, k)
            fh.write(vid + "\t" + " ".join(f"{t}:{p:.4f}" for t, p in dec.concepts) + "\n")
            if truth.get(vid):
                recalls.append(concept_recall_at_k(dec, truth[vid], k))
    metrics = {"videos": len(vids)}
    if recalls:
        metrics[f"recall@{k}"] = float(np.mean(recalls))
        print(f"recall@{k}\t{np.mean(recalls):.4f}", file=sys.stderr)
    events.emit("concepts", **metrics)
    return 0


def _read_complete_qrels(path) -> dict:
    return {q: js.judgments for q, js in read_judgments(path).items()}


def cmd_prune(cfg, events):
    ckpt, index = _load_model_and_index(cfg)
    runs = read_run(cfg["run"])
    spec = PruneSpec(tuple(cfg["keywords"]), cfg["concept_depth"], cfg["result_depth"])
    qrels = _read_complete_qrels(cfg["qrels"]) if cfg["qrels"] else None
    kept_lists = []
    totals = np.zeros(6, dtype=int)
    for qid, ranked in runs.items():
        kept, removed = prune_by_keywords(ranked, index, spec, ckpt.vocabulary)
        kept_lists.append(kept)
        if qrels is not None:
            r = pruning_report(kept, removed, qrels.get(qid, {}))
            totals += [r.true_positive_kept, r.false_positive_kept, r.true_positive_removed,
                       r.false_positive_removed, r.unjudged_kept, r.unjudged_removed]
            print(f"{qid}\tprecision {r.precision_before:.4f} -> {r.precision_after:.4f}\t"
                  f"fp_removed {r.false_positive_removal_rate:.4f}\ttp_kept {r.true_positive_retention_rate:.4f}",
                  file=sys.stderr)
    _write_lists(cfg, kept_lists)
    names = ["tp_kept", "fp_kept", "tp_removed", "fp_removed", "unjudged_kept", "unjudged_removed"]
    events.emit("prune", queries=len(runs), **({n: int(v) for n, v in zip(names, totals)} if qrels else {}))
    return 0


def per_query_scores(runs: dict, judgments: dict, metric: str, depth: int) -> dict:
    """Per-query metric over every judged query; a missing run scores 0."""
    out = {}
    for qid in sorted(judgments):
        js = judgments[qid]
        ranked = runs.get(qid, RankedList([], qid)).top(depth)
        if metric == "ap":
            if not js.relevant:
                log.warning("query %s has no relevant video; AP undefined, skipped", qid)
                continue
            out[qid] = average_precision(ranked, js)
        elif metric == "infap":
            out[qid] = inferred_ap(ranked, js)
        else:
            raise UsageError(f"unknown metric {metric!r}")
    return out


def _judgments(cfg):
    strata = read_strata(cfg["strata"]) if cfg["strata"] else None
    metric = cfg["metric"] or ("infap" if strata else "ap")
    return read_judgments(cfg["qrels"], strata), metric


def cmd_eval(cfg, events):
    judgments, metric = _judgments(cfg)
    scores = per_query_scores(read_run(cfg["run"]), judgments, metric, cfg["topk"])
    if not scores:
        raise UsageError("no query could be scored")
    mean = float(np.mean(list(scores.values())))
    with _Output(cfg["out"]) as fh:
        for qid, v in scores.items():
            fh.write(f"{metric}\t{qid}\t{v:.6f}\n")
        fh.write(f"m{metric}\tall\t{mean:.6f}\n")
    events.emit("eval", metric=metric, queries=len(scores), mean=mean)
    return 0


def cmd_sig_test(cfg, events):
    judgments, metric = _judgments(cfg)
    a = per_query_scores(read_run(cfg["run_a"]), judgments, metric, cfg["topk"])
    b = per_query_scores(read_run(cfg["run_b"]), judgments, metric, cfg["topk"])
    qids = sorted(set(a) & set(b))
    if len(qids) < 2:
        raise UsageError("the randomization test needs at least two scored queries")
    va, vb = [a[q] for q in qids], [b[q] for q in qids]
    p = randomization_test(va, vb, cfg["iterations"], cfg["seed"])
    with _Output(cfg["out"]) as fh:
        fh.write(f"queries\t{len(qids)}\nm{metric}_a\t{np.mean(va):.6f}\nm{metric}_b\t{np.mean(vb):.6f}\n"
                 f"p_value\t{p:.6g}\n")
    events.emit("sig-test", queries=len(qids), p_value=p)
    return 0


HANDLERS = {
    "gen-synthetic": cmd_gen_synthetic, "build-vocab": cmd_build_vocab, "train": cmd_train,
    "index": cmd_index, "search": cmd_search, "bool-search": cmd_bool_search,
    "concepts": cmd_concepts, "prune": cmd_prune, "eval": cmd_eval, "sig-test": cmd_sig_test,
}


def _write_repro(cfg: dict, command: str) -> None:
    lines = [f"# dualtask {command}"]
    lines += [f"{k} = {_format_value(v)}" for k, v in sorted(cfg.items()) if v is not None and v != ()]
    text = "\n".join(lines) + "\n"
    log.info("effective config:\n%s", text)
    if cfg.get("repro_log"):
        Path(cfg["repro_log"]).write_text(text, encoding="utf-8")


def run(command: str, cfg: dict) -> int:
    events = EventLog(cfg.get("events"))
    _write_repro(cfg, command)
    events.emit("config", command=command, config_hash=config_hash(cfg))
    return HANDLERS[command](cfg, events)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = effective_config(ns.command, ns)
        return run(ns.command, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("run 'dualtask <command> --help' for usage", file=sys.stderr)
        return 1
    except (DualTaskError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
