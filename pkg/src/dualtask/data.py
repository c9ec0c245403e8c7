"""Corpus ingestion, vocabulary construction, labels, batching and a
synthetic video-caption generator for desk-scale experiments."""

from __future__ import annotations

import hashlib
import logging
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyVocabularyError, FormatError
from .objectives import LabelVector

log = logging.getLogger(__name__)

# NLTK English stopword list.
ENGLISH_STOPWORDS = frozenset("""
i me my myself we our ours ourselves you you're you've you'll you'd your yours
yourself yourselves he him his himself she she's her hers herself it it's its
itself they them their theirs themselves what which who whom this that that'll
these those am is are was were be been being have has had having do does did
doing a an the and but if or because as until while of at by for with about
against between into through during before after above below to from up down in
out on off over under again further then once here there when where why how all
any both each few more most other some such no nor not only own same so than too
very s t can will just don don't should should've now d ll m o re ve y ain aren
aren't couldn couldn't didn didn't doesn doesn't hadn hadn't hasn hasn't haven
haven't isn isn't ma mightn mightn't mustn mustn't needn needn't shan shan't
shouldn shouldn't wasn wasn't weren weren't won won't wouldn wouldn't
""".split())

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(caption: str) -> list[str]:
    """Lowercase and split on every run of non-alphanumeric characters."""
    return [t for t in _TOKEN_SPLIT.split(caption.lower()) if t]


def load_stopwords(path=None) -> frozenset:
    if path is None:
        return ENGLISH_STOPWORDS
    with open(path, encoding="utf-8") as fh:
        return frozenset(line.strip().lower() for line in fh if line.strip())


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    """Concept tokens in canonical order with their caption counts."""

    entries: tuple
    index: dict = field(compare=False, repr=False, hash=False)

    @classmethod
    def from_entries(cls, entries) -> "Vocabulary":
        entries = tuple((str(t), int(c)) for t, c in entries)
        index = {t: i for i, (t, _) in enumerate(entries)}
        if len(index) != len(entries):
            raise FormatError("duplicate token in vocabulary")
        return cls(entries, index)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token) -> bool:
        return token in self.index

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def tokens(self) -> list[str]:
        return [t for t, _ in self.entries]

    def token(self, i: int) -> str:
        return self.entries[i][0]

    def encode(self, tokens) -> list[int]:
        """Map tokens to indices, dropping out-of-vocabulary tokens."""
        return [self.index[t] for t in tokens if t in self.index]

    def to_text(self) -> str:
        return "".join(f"{t}\t{c}\n" for t, c in self.entries)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise FormatError(f"{path}:{lineno}: expected 'token<TAB>count'")
                entries.append((parts[0], int(parts[1])))
        return cls.from_entries(entries)


def build_vocabulary(captions, min_count: int = 5, stopwords=None) -> Vocabulary:
    """Keep tokens found in at least ``min_count`` distinct captions.

    Order is descending count, ties broken by the token string.
    """
    captions = list(captions)
    if not captions:
        raise EmptyVocabularyError("no captions given")
    stop = ENGLISH_STOPWORDS if stopwords is None else frozenset(stopwords)
    counts = Counter()
    for caption in captions:
        counts.update(set(tokenize(caption)))
    kept = [(t, c) for t, c in counts.items() if c >= min_count and t not in stop]
    if not kept:
        raise EmptyVocabularyError(f"no token reaches min_count={min_count}")
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return Vocabulary.from_entries(kept)


def caption_labels(video_id: str, captions, vocab: Vocabulary) -> LabelVector:
    """Union over all captions of the video's vocabulary tokens."""
    present = set()
    for caption in captions:
        present.update(vocab.encode(tokenize(caption)))
    labels = LabelVector.from_indices(sorted(present), vocab.size)
    if labels.positive_count == 0:
        log.warning("video %s has no vocabulary token in its captions", video_id)
    return labels


# ---------------------------------------------------------------------------
# Dataset and batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VideoTextPair:
    video_id: str
    caption: str


@dataclass
class Dataset:
    videos: dict  # video_id -> (n_frames, dim) float64 array
    captions: dict  # video_id -> list of caption strings
    pairs: list = field(default_factory=list)
    latent: dict = field(default_factory=dict)  # synthetic ground truth: video_id -> concept names
    concept_names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.pairs:
            self.pairs = [VideoTextPair(v, c) for v in self.captions for c in self.captions[v]]
        for p in self.pairs:
            if p.video_id not in self.videos:
                raise FormatError(f"pair references unknown video {p.video_id!r}")
            if not p.caption.strip():
                raise FormatError(f"empty caption for video {p.video_id!r}")

    @property
    def video_ids(self) -> list[str]:
        return list(self.videos)

    def all_captions(self) -> list[str]:
        return [c for v in self.captions for c in self.captions[v]]

    def subset(self, video_ids) -> "Dataset":
        keep = [v for v in self.videos if v in set(video_ids)]
        return Dataset(
            videos={v: self.videos[v] for v in keep},
            captions={v: list(self.captions.get(v, [])) for v in keep},
            latent={v: self.latent[v] for v in keep if v in self.latent},
            concept_names=list(self.concept_names),
        )

    def label_matrix(self, vocab: Vocabulary) -> dict:
        return {v: caption_labels(v, self.captions.get(v, []), vocab) for v in self.videos}


@dataclass(frozen=True)
class BatchPlan:
    """Seeded epoch permutations split into batches.

    A trailing batch of size one is dropped (batch norm needs two rows).
    """

    seed: int
    batch_size: int
    n_items: int

    def permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.n_items)

    def batches(self, epoch: int) -> list[np.ndarray]:
        perm = self.permutation(epoch)
        out = [perm[i : i + self.batch_size] for i in range(0, self.n_items, self.batch_size)]
        if out and len(out[-1]) < 2:
            out.pop()
        return out


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

CONCEPT_WORDS = (
    "cat dog tree palm car person woman man child bird horse boat plane train bicycle "
    "guitar piano ball beach mountain river snow street crowd kitchen table chair phone "
    "computer book flower grass sky sun rain fire water road bridge building house door "
    "window hat backpack helmet dress shirt coat scarf glasses camera bottle cup wine beer "
    "drinking dancing running swimming cooking singing talking walking riding jumping "
    "sitting standing eating reading playing driving flying fishing painting skating "
    "balloon curtain flag truck bus motorcycle sheep cow elephant lion monkey duck fish "
    "two three"
).split()

CAPTION_PREFIXES = ("a video of", "footage showing", "a clip with", "scene with", "we see")


def concept_name(i: int) -> str:
    return CONCEPT_WORDS[i] if i < len(CONCEPT_WORDS) else f"concept{i:04d}"


def latent_inclusion_probabilities(n_latent: int, max_concepts: int = 4):
    """Declared marginal and pairwise inclusion probabilities of the generator.

    Each video draws K ~ Uniform{1..min(max_concepts, n)} concepts without
    replacement, so P(i) = E[K]/n and P(i, j) = E[K(K-1)] / (n(n-1)).
    """
    kmax = min(max_concepts, n_latent)
    ks = np.arange(1, kmax + 1)
    p_single = ks.mean() / n_latent
    p_pair = (ks * (ks - 1)).mean() / (n_latent * (n_latent - 1)) if n_latent > 1 else 0.0
    return float(p_single), float(p_pair)


def generate_synthetic_corpus(
    seed: int,
    n_videos: int,
    n_latent_concepts: int,
    frame_dim: int,
    frames_per_video,
    *,
    captions_per_video: int = 3,
    noise: float = 0.5,
    mention_prob: float = 0.8,
    max_concepts: int = 4,
    style_lexicon: int = 0,
    style_words_per_video: int = 0,
    style_mention_prob: float = 0.9,
    prefixes=CAPTION_PREFIXES,
) -> Dataset:
    """Videos built from latent concepts with matching captions.

    Frames are the sum of the video's Gaussian concept prototypes plus
    isotropic noise.  Captions name a random subset of the video's
    concepts behind a generic prefix; optional "style" words, private to
    each video and unrelated to its frames, imitate caption vocabulary
    that cannot be predicted visually.  ``frames_per_video`` is an int or
    an inclusive ``(lo, hi)`` range.  Each caption opens with one of
    ``prefixes``.
    """
    if min(n_videos, n_latent_concepts, frame_dim, captions_per_video) < 1:
        raise ValueError("counts must be >= 1")
    rng = np.random.default_rng(seed)
    names = [concept_name(i) for i in range(n_latent_concepts)]
    prototypes = rng.normal(0.0, 1.0, (n_latent_concepts, frame_dim))
    style_words = [f"w{i:04d}" for i in range(style_lexicon)]
    kmax = min(max_concepts, n_latent_concepts)
    width = len(str(n_videos - 1))

    videos, captions, latent = {}, {}, {}
    for v in range(n_videos):
        vid = f"v{v:0{width}d}"
        k = int(rng.integers(1, kmax + 1))
        chosen = np.sort(rng.choice(n_latent_concepts, size=k, replace=False))
        if isinstance(frames_per_video, int):
            T = frames_per_video
        else:
            T = int(rng.integers(frames_per_video[0], frames_per_video[1] + 1))
        base = prototypes[chosen].sum(axis=0)
        videos[vid] = base[None, :] + noise * rng.normal(0.0, 1.0, (T, frame_dim))
        latent[vid] = tuple(names[i] for i in chosen)
        style = []
        if style_lexicon and style_words_per_video:
            pick = rng.choice(style_lexicon, size=min(style_words_per_video, style_lexicon), replace=False)
            style = [style_words[i] for i in pick]
        caps = []
        for _ in range(captions_per_video):
            said = [names[i] for i in chosen if rng.random() < mention_prob]
            if not said:
                said = [names[chosen[rng.integers(k)]]]
            said = [said[i] for i in rng.permutation(len(said))]
            extra = [w for w in style if rng.random() < style_mention_prob]
            prefix = prefixes[rng.integers(len(prefixes))]
            caps.append(" ".join([prefix, " and ".join(said)] + extra))
        captions[vid] = caps
    return Dataset(videos=videos, captions=captions, latent=latent, concept_names=names)


@dataclass(frozen=True)
class SyntheticQuery:
    qid: str
    text: str
    relevant: frozenset
    kind: str


def synthetic_queries(dataset: Dataset, kind: str = "single", n: int | None = None,
                      seed: int = 0, min_relevant: int = 1) -> list[SyntheticQuery]:
    """Queries with exact relevance from the latent concepts.

    ``single``: one concept, relevant iff present.
    ``sentence``: as ``single``, phrased like a caption ("footage showing dog").
    ``and``:    two concepts, relevant iff both present (plain text "a b").
    ``and_not``: Boolean ``"a" AND NOT "b"``, relevant iff a present and b absent.
    """
    rng = np.random.default_rng(seed)
    sets = {v: set(c) for v, c in dataset.latent.items()}
    names = [c for c in dataset.concept_names if any(c in s for s in sets.values())]

    def rel(pred):
        return frozenset(v for v, s in sets.items() if pred(s))

    out = []
    if kind in ("single", "sentence"):
        for c in names:
            r = rel(lambda s, c=c: c in s)
            if len(r) >= min_relevant:
                text = c if kind == "single" else f"{CAPTION_PREFIXES[len(out) % len(CAPTION_PREFIXES)]} {c}"
                out.append(SyntheticQuery(f"q{len(out):03d}", text, r, kind))
    elif kind in ("and", "and_not"):
        pairs = [(a, b) for i, a in enumerate(names) for b in names[i + 1 :]]
        for j in rng.permutation(len(pairs)):
            a, b = pairs[j]
            if kind == "and":
                r = rel(lambda s: a in s and b in s)
                text = f"{a} {b}"
            else:
                r = rel(lambda s: a in s and b not in s)
                # only contrastive pairs: b must co-occur with a somewhere
                if not any(a in s and b in s for s in sets.values()):
                    continue
                text = f'"{a}" AND NOT "{b}"'
            if len(r) >= min_relevant:
                out.append(SyntheticQuery(f"q{len(out):03d}", text, r, kind))
            if n is not None and len(out) >= n:
                break
    else:
        raise ValueError(f"unknown query kind {kind!r}")
    return out[:n] if n is not None else out


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_captions(path, captions: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for vid, caps in captions.items():
            for c in caps:
                if "\t" in c or "\n" in c:
                    raise FormatError(f"caption for {vid} contains a tab or newline")
                fh.write(f"{vid}\t{c}\n")


def read_captions(path) -> dict:
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            vid, sep, cap = line.partition("\t")
            if not sep or not cap.strip():
                raise FormatError(f"{path}:{lineno}: expected 'video_id<TAB>caption'")
            out.setdefault(vid, []).append(cap)
    return out


def write_features_text(path, videos: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for vid, X in videos.items():
            X = np.asarray(X, dtype=np.float64)
            fh.write(f"{vid}\t{X.shape[0]}\t{X.shape[1]}\n")
            for row in X:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_features_text(path) -> dict:
    videos = {}
    with open(path, encoding="utf-8") as fh:
        lines = iter(enumerate(fh, 1))
        for lineno, line in lines:
            if not line.strip():
                continue
            head = line.rstrip("\n").split("\t")
            if len(head) != 3:
                raise FormatError(f"{path}:{lineno}: expected 'video_id<TAB>n_frames<TAB>dim'")
            vid, n, dim = head[0], int(head[1]), int(head[2])
            X = np.empty((n, dim))
            for t in range(n):
                try:
                    rl, row = next(lines)
                except StopIteration:
                    raise FormatError(f"{path}: {vid} truncated after {t} frames") from None
                vals = row.split()
                if len(vals) != dim:
                    raise FormatError(f"{path}:{rl}: expected {dim} values, got {len(vals)}")
                X[t] = [float(x) for x in vals]
            videos[vid] = X
    return videos


FEATURES_MAGIC = b"DTFF"
FORMAT_VERSION = 1


def write_features_binary(path, videos: dict) -> None:
    """Little-endian: magic, u32 version, u32 count, then per video
    u16 id length, id bytes, u32 n_frames, u32 dim, float64 values."""
    with open(path, "wb") as fh:
        fh.write(FEATURES_MAGIC + struct.pack("<II", FORMAT_VERSION, len(videos)))
        for vid, X in videos.items():
            X = np.ascontiguousarray(X, dtype="<f8")
            b = vid.encode("utf-8")
            fh.write(struct.pack("<H", len(b)) + b + struct.pack("<II", *X.shape))
            fh.write(X.tobytes())


def read_features_binary(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != FEATURES_MAGIC:
        raise FormatError(f"{path}: not a DTFF file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    videos = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            vid = data[off + 2 : off + 2 + n].decode("utf-8")
            off += 2 + n
            T, dim = struct.unpack_from("<II", data, off)
            off += 8
            size = T * dim * 8
            if off + size > len(data):
                raise FormatError(f"{path}: truncated record for {vid}")
            videos[vid] = np.frombuffer(data, dtype="<f8", count=T * dim, offset=off).reshape(T, dim).astype(np.float64)
            off += size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated file") from exc
    return videos


def read_features(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    return read_features_binary(path) if magic == FEATURES_MAGIC else read_features_text(path)


def write_features(path, videos: dict) -> None:
    if str(path).endswith(".dtff"):
        write_features_binary(path, videos)
    else:
        write_features_text(path, videos)


def load_dataset(captions_path, features_path) -> Dataset:
    captions = read_captions(captions_path)
    videos = read_features(features_path)
    missing = [v for v in captions if v not in videos]
    if missing:
        raise FormatError(f"captions reference {len(missing)} videos without features, e.g. {missing[0]!r}")
    return Dataset(videos=videos, captions=captions)
