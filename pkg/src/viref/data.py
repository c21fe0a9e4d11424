"""Vocabulary, tokenisation, padding/filtering, splits and on-disk formats.

Feature files (``.vrft``) hold a little-endian header ``VRFT | version |
frames | streams | dim`` followed by ``frames * streams * dim`` float32 values,
frame-major then stream-major.  Per-frame sequences have 5 streams; clip-level
files for the encoder-free baseline have one frame and 6 streams.
"""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .diffcore import DegenerateBatchError

START, END, UNK, NIL = "<start>", "<end>", "<unk>", "<nil>"
RESERVED = (START, END, UNK, NIL)

N_STREAMS = 5
N_CLIP_STREAMS = 6
STREAM_NAMES = ("main_appearance", "context_appearance", "scene", "main_mask", "context_mask")
CLIP_STREAM_NAMES = (
    "avg_main_appearance",
    "avg_context_appearance",
    "motion_main",
    "motion_context",
    "motion_pair",
    "motion_scene",
)

FEATURE_MAGIC = b"VRFT"
FEATURE_VERSION = 1
SPLITS = ("train", "val", "test")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, then split on whitespace with punctuation as separate tokens."""
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# vocabulary and token sequences


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must begin with the reserved tokens {RESERVED}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def start_id(self) -> int:
        return self.index[START]

    @property
    def end_id(self) -> int:
        return self.index[END]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def nil_id(self) -> int:
        return self.index[NIL]

    @property
    def reserved_ids(self) -> set[int]:
        return {self.index[t] for t in RESERVED}

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocabulary(train_refexps: Iterable[str], external_words: Iterable[str] = (), min_count: int = 2) -> Vocabulary:
    """Reserved tokens first, then every word seen ``min_count`` times in training plus the external words, sorted."""
    counts = Counter(tok for text in train_refexps for tok in tokenize(text))
    words = {w for w, c in counts.items() if c >= min_count}
    words.update(w.lower() for w in external_words if w.strip())
    words.difference_update(RESERVED)
    return Vocabulary(list(RESERVED) + sorted(words))


@dataclass(frozen=True)
class TokenSequence:
    """Token ids ``<start> w_1 .. w_n <end>``; ``len()`` excludes ``<start>``."""

    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids) - 1

    @property
    def n_words(self) -> int:
        return len(self.ids) - 2

    def validate(self, vocab: Vocabulary) -> "TokenSequence":
        ids = self.ids
        if len(ids) < 2 or ids[0] != vocab.start_id or ids[-1] != vocab.end_id:
            raise ValueError("token sequence must start with <start> and end with <end>")
        inner = ids[1:-1]
        if any(i in (vocab.start_id, vocab.end_id, vocab.nil_id) for i in inner):
            raise ValueError("reserved token inside a token sequence")
        if any(not 0 <= i < len(vocab) for i in ids):
            raise ValueError("token id out of range")
        return self


def encode_refexp(text: str, vocab: Vocabulary) -> TokenSequence:
    words = tokenize(text)
    if not words:
        raise ValueError("cannot encode an empty referring expression")
    return TokenSequence((vocab.start_id, *(vocab.id(w) for w in words), vocab.end_id))


def decode(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    skip = {vocab.start_id, vocab.end_id, vocab.nil_id}
    return " ".join(vocab.token(i) for i in ids if i not in skip)


@dataclass
class PaddedBatch:
    """``tokens`` is (batch, length) padded with <nil>; ``mask`` marks prediction targets."""

    tokens: np.ndarray
    mask: np.ndarray
    kept: list[int]
    n_dropped: int

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.tokens[:, 1:]

    @property
    def target_mask(self) -> np.ndarray:
        return self.mask[:, 1:]


def keep_by_length(seqs: Sequence[TokenSequence], max_len: int = 25) -> list[int]:
    """Indices of sequences with fewer than ``max_len`` words."""
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    return [i for i, s in enumerate(seqs) if s.n_words < max_len]


def filter_and_pad(seqs: Sequence[TokenSequence], max_len: int = 25, nil_id: int | None = None) -> PaddedBatch:
    """Drop sequences of ``max_len`` or more words, pad the rest with <nil>.

    ``mask[b, t]`` is True for the positions that are prediction targets:
    every real token after ``<start>`` up to and including ``<end>``.
    """
    kept = keep_by_length(seqs, max_len)
    if not kept:
        raise DegenerateBatchError("every sequence was dropped by the length filter")
    if nil_id is None:
        nil_id = RESERVED.index(NIL)
    width = max(len(seqs[i].ids) for i in kept)
    tokens = np.full((len(kept), width), nil_id, dtype=np.int64)
    mask = np.zeros((len(kept), width), dtype=bool)
    for row, i in enumerate(kept):
        ids = seqs[i].ids
        tokens[row, : len(ids)] = ids
        mask[row, 1 : len(ids)] = True
    return PaddedBatch(tokens, mask, kept, len(seqs) - len(kept))


# ---------------------------------------------------------------------------
# splits


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier split."""
    quotas = [n * r for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda k: (-(quotas[k] - counts[k]), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    return counts


def split_dataset(records: Sequence, ratios: Sequence[float] = (0.6, 0.1, 0.3), seed: int = 0) -> list[str]:
    """Seeded shuffle then partition; returns the split name for each record, in input order."""
    if len(records) < 3:
        raise ValueError("need at least 3 records to split")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    counts = split_counts(len(records), ratios)
    perm = np.random.default_rng(seed).permutation(len(records))
    labels = [""] * len(records)
    start = 0
    for name, c in zip(SPLITS, counts):
        for i in perm[start : start + c]:
            labels[int(i)] = name
        start += c
    return labels


# ---------------------------------------------------------------------------
# feature files


class FeatureFileError(ValueError):
    pass


class BadMagicError(FeatureFileError):
    pass


class TruncatedFeatureError(FeatureFileError):
    pass


class StreamCountError(FeatureFileError):
    pass


@dataclass
class FeatureSequence:
    """Per-frame features, shape (frames, 5, dim)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[1] != N_STREAMS:
            raise StreamCountError(f"feature sequence needs shape (m, {N_STREAMS}, D), got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ValueError("feature sequence needs at least one frame")

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def concatenated(self) -> np.ndarray:
        return self.data.reshape(self.m, -1)


@dataclass
class ClipFeatureSet:
    """Clip-level features, shape (6, dim)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] != N_CLIP_STREAMS:
            raise StreamCountError(f"clip features need shape ({N_CLIP_STREAMS}, D), got {self.data.shape}")

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def feature_bytes(data: np.ndarray) -> bytes:
    data = np.asarray(data)
    m, s, d = data.shape
    header = FEATURE_MAGIC + struct.pack("<IIII", FEATURE_VERSION, m, s, d)
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def parse_feature_bytes(buf: bytes, expect_streams: int | None = None) -> np.ndarray:
    if len(buf) < 20:
        raise TruncatedFeatureError("feature file shorter than its header")
    if buf[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"bad feature file magic {buf[:4]!r}")
    version, m, s, d = struct.unpack_from("<IIII", buf, 4)
    if version != FEATURE_VERSION:
        raise BadMagicError(f"unsupported feature file version {version}")
    if s not in (N_STREAMS, N_CLIP_STREAMS):
        raise StreamCountError(f"stream count {s} is neither {N_STREAMS} nor {N_CLIP_STREAMS}")
    if expect_streams is not None and s != expect_streams:
        raise StreamCountError(f"expected {expect_streams} streams, file has {s}")
    n = m * s * d
    if len(buf) != 20 + 4 * n:
        raise TruncatedFeatureError(f"payload has {len(buf) - 20} bytes, header implies {4 * n}")
    return np.frombuffer(buf, dtype="<f4", offset=20).reshape(m, s, d).astype(np.float32)


def write_feature_file(path, data: np.ndarray) -> None:
    Path(path).write_bytes(feature_bytes(data))


def load_feature_sequence(path) -> FeatureSequence:
    return FeatureSequence(parse_feature_bytes(Path(path).read_bytes(), N_STREAMS))


def load_clip_features(path) -> ClipFeatureSet:
    arr = parse_feature_bytes(Path(path).read_bytes(), N_CLIP_STREAMS)
    if arr.shape[0] != 1:
        raise FeatureFileError(f"clip feature file must have one frame, has {arr.shape[0]}")
    return ClipFeatureSet(arr[0])


def write_feature_sequence(path, fs: FeatureSequence) -> None:
    write_feature_file(path, fs.data)


def write_clip_features(path, cf: ClipFeatureSet) -> None:
    write_feature_file(path, cf.data[None])


# ---------------------------------------------------------------------------
# manifest


@dataclass
class PairRecord:
    video_id: str
    pair_id: str
    direction: str
    frame_count: int
    feature_path: str
    clip_feature_path: str
    refexps: list[str] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValueError(f"{self.pair_id}: frame_count must be >= 1")
        if not self.refexps:
            raise ValueError(f"{self.pair_id}: at least one referring expression required")
        if self.split not in SPLITS:
            raise ValueError(f"{self.pair_id}: unknown split {self.split!r}")
        if self.direction not in ("straight", "reverse"):
            raise ValueError(f"{self.pair_id}: direction must be straight or reverse")


def write_manifest(path, records: Iterable[PairRecord]) -> None:
    lines = [json.dumps(asdict(r), sort_keys=True) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path) -> list[PairRecord]:
    records = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(PairRecord(**json.loads(line)))
        except (TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}:{n}: bad manifest record ({exc})") from None
    ids = [r.pair_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate pair ids")
    return records


# ---------------------------------------------------------------------------
# embeddings


class EmbeddingParseError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    vectors: np.ndarray
    matched: list[str]
    trainable: bool = True

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def random_embeddings(vocab: Vocabulary, dim: int = 50, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-0.1, 0.1, size=(len(vocab), dim)).astype(np.float32)


def load_embeddings(path, vocab: Vocabulary, dim: int = 50, seed: int = 0) -> EmbeddingTable:
    """Read ``token v_1 .. v_dim`` lines; tokens not in the file keep a seeded U(-0.1, 0.1) row."""
    vectors = random_embeddings(vocab, dim, seed)
    matched = []
    text = Path(path).read_text(encoding="utf-8") if path is not None else ""
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != dim + 1:
            raise EmbeddingParseError(f"line {n}: expected token plus {dim} values, got {len(parts) - 1} values")
        try:
            vec = np.array([float(v) for v in parts[1:]], dtype=np.float32)
        except ValueError:
            raise EmbeddingParseError(f"line {n}: non-numeric value") from None
        if parts[0] in vocab:
            vectors[vocab.index[parts[0]]] = vec
            matched.append(parts[0])
    return EmbeddingTable(vectors, matched)


# ---------------------------------------------------------------------------
# loaded dataset


@dataclass
class Example:
    record: int
    tokens: TokenSequence


class Dataset:
    """Manifest records with their features loaded and expressions encoded."""

    def __init__(self, records: list[PairRecord], vocab: Vocabulary, features: dict, clips: dict):
        self.records = records
        self.vocab = vocab
        self.features: dict[str, FeatureSequence] = features
        self.clips: dict[str, ClipFeatureSet] = clips
        self.by_id = {r.pair_id: i for i, r in enumerate(records)}

    @classmethod
    def load(cls, manifest_path, vocab: Vocabulary | None = None, vocab_path=None, feature_root=None) -> "Dataset":
        """Feature paths in the manifest resolve against ``feature_root`` (default: the manifest's directory)."""
        manifest_path = Path(manifest_path)
        records = read_manifest(manifest_path)
        if vocab is None:
            vocab = Vocabulary.load(vocab_path if vocab_path is not None else manifest_path.parent / "vocab.txt")
        root = Path(feature_root) if feature_root is not None else manifest_path.parent
        feats = {r.pair_id: load_feature_sequence(root / r.feature_path) for r in records}
        clips = {r.pair_id: load_clip_features(root / r.clip_feature_path) for r in records}
        return cls(records, vocab, feats, clips)

    def split(self, name: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == name]

    def examples(self, split: str, max_len: int = 25) -> list[Example]:
        """Every (record, expression) pair of a split, minus expressions of ``max_len`` words or more."""
        out = []
        for i in self.split(split):
            for text in self.records[i].refexps:
                seq = encode_refexp(text, self.vocab)
                if seq.n_words < max_len:
                    out.append(Example(i, seq))
        return out

    def videos(self) -> dict[str, list[int]]:
        groups: dict[str, list[int]] = {}
        for i, r in enumerate(self.records):
            groups.setdefault(r.video_id, []).append(i)
        return groups
