"""The three model variants behind one interface.

``viref``    encoder LSTM over attention-scaled frame features; at every decoder
             step the feature attention network (FAN) picks new stream weights,
             the encoder is re-run with them, and the word estimation network
             (WEN) reads the decoder state together with the re-run encoding.
``viref_a``  same encoder/decoder without the per-step attention loop.
``viref_e``  no recurrent encoder; a feature processing network (FPN) maps
             clip-level features to the decoder's initial hidden state.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .data import N_CLIP_STREAMS, N_STREAMS, ClipFeatureSet, EmbeddingTable, FeatureSequence, TokenSequence, Vocabulary
from .diffcore import (
    AffineStack,
    ConfigError,
    LstmStack,
    LstmState,
    ParameterStore,
    ShapeError,
    Tensor,
    affine_stack_forward,
    component_rng,
    lstm_forward,
    nll,
    no_grad,
)
from .diffcore import autodiff as ad

VARIANTS = ("viref", "viref_a", "viref_e")


class UnsupportedVariantError(ValueError):
    pass


class FeatureKindError(ValueError):
    pass


@dataclass
class VirefConfig:
    enc_layers: int = 6
    dec_layers: int = 6
    hidden: int = 512
    dim: int = 4096
    n_streams: int = N_STREAMS
    vocab_size: int = 1024
    embed_dim: int = 50
    dropout: float = 0.2
    fan_widths: tuple[int, ...] | None = None
    wen_widths: tuple[int, ...] | None = None
    fpn_widths: tuple[int, ...] | None = None

    def __post_init__(self):
        H = self.hidden
        if self.fan_widths is None:
            self.fan_widths = (H, H, self.n_streams)
        if self.wen_widths is None:
            self.wen_widths = (H, H, self.vocab_size)
        if self.fpn_widths is None:
            self.fpn_widths = (H, H, H)
        self.fan_widths = tuple(self.fan_widths)
        self.wen_widths = tuple(self.wen_widths)
        self.fpn_widths = tuple(self.fpn_widths)

    def validate(self) -> "VirefConfig":
        for name in ("enc_layers", "dec_layers", "hidden", "dim", "vocab_size", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_streams != N_STREAMS:
            raise ConfigError(f"stream count must be {N_STREAMS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        for name in ("fan_widths", "wen_widths", "fpn_widths"):
            w = getattr(self, name)
            if len(w) != 3 or min(w) < 1:
                raise ConfigError(f"{name} must be 3 positive widths, got {w}")
        if self.fan_widths[-1] != self.n_streams:
            raise ConfigError("FAN output width must equal the stream count")
        if self.wen_widths[-1] != self.vocab_size:
            raise ConfigError("WEN output width must equal the vocabulary size")
        if self.fpn_widths[-1] != self.hidden:
            raise ConfigError("FPN output width must equal the hidden size")
        if self.enc_layers != self.dec_layers:
            raise ConfigError("encoder and decoder need the same number of layers for the state transfer")
        return self

    @property
    def encoder_input_dim(self) -> int:
        return self.n_streams * self.dim

    @classmethod
    def from_dict(cls, d: dict) -> "VirefConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class PairFeatures(NamedTuple):
    """What a model needs to know about one (main, context) pair."""

    frames: FeatureSequence | None = None
    clip: ClipFeatureSet | None = None


@dataclass
class FeatureBatch:
    frames: np.ndarray | None  # (R, M, 5, D)
    frame_mask: np.ndarray | None  # (R, M) bool, None when every row has M frames
    clips: np.ndarray | None  # (R, 6 * D)

    def __len__(self) -> int:
        arr = self.frames if self.frames is not None else self.clips
        return arr.shape[0]

    def rows(self, idx) -> "FeatureBatch":
        idx = np.asarray(idx, dtype=np.intp)
        return FeatureBatch(
            None if self.frames is None else self.frames[idx],
            None if self.frame_mask is None else self.frame_mask[idx],
            None if self.clips is None else self.clips[idx],
        )


def _as_pair(x) -> PairFeatures:
    if isinstance(x, PairFeatures):
        return x
    if isinstance(x, FeatureSequence):
        return PairFeatures(frames=x)
    if isinstance(x, ClipFeatureSet):
        return PairFeatures(clip=x)
    if isinstance(x, tuple) and len(x) == 2:
        return PairFeatures(*x)
    raise TypeError(f"cannot interpret {type(x).__name__} as pair features")


def make_feature_batch(items: Sequence, dtype=np.float32, need_frames=True, need_clips=True) -> FeatureBatch:
    pairs = [_as_pair(x) for x in items]
    frames = mask = clips = None
    if need_frames:
        if any(p.frames is None for p in pairs):
            raise FeatureKindError("this variant needs per-frame feature sequences")
        M = max(p.frames.m for p in pairs)
        dims = {p.frames.dim for p in pairs}
        if len(dims) != 1:
            raise ShapeError(f"inconsistent feature dims in batch: {sorted(dims)}")
        D = dims.pop()
        frames = np.zeros((len(pairs), M, N_STREAMS, D), dtype=dtype)
        mask = np.zeros((len(pairs), M), dtype=bool)
        for r, p in enumerate(pairs):
            frames[r, : p.frames.m] = p.frames.data
            mask[r, : p.frames.m] = True
        if mask.all():
            mask = None
    if need_clips:
        if any(p.clip is None for p in pairs):
            raise FeatureKindError("this variant needs clip-level features")
        clips = np.stack([p.clip.data.reshape(-1) for p in pairs]).astype(dtype)
    return FeatureBatch(frames, mask, clips)


def scale_features(frame: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Multiply stream k of one frame (5, D) by a[k] and concatenate to (5 * D,)."""
    frame = np.asarray(frame)
    a = np.asarray(a)
    if frame.ndim != 2 or frame.shape[0] != a.shape[0]:
        raise ShapeError(f"frame of shape {frame.shape} does not match {a.shape[0]} weights")
    return (frame * a[:, None]).reshape(-1)


class _ScaleStreams(ad.Function):
    """(R, M, S, D) constant frames times per-row stream weights (R, S) -> (R, M, S * D)."""

    def forward(self, a, frames=None):
        self.frames = frames
        R, M, S, D = frames.shape
        return (frames * a[:, None, :, None]).reshape(R, M, S * D)

    def backward(self, g):
        R, M, S, D = self.frames.shape
        return (np.einsum("rmsd,rmsd->rs", g.reshape(R, M, S, D), self.frames),)


def _scale_streams(frames: np.ndarray, a: Tensor) -> Tensor:
    return _ScaleStreams.apply(a, frames=frames)


class RefExpModel:
    """One model variant: tag, config and parameters."""

    def __init__(
        self,
        tag: str,
        config: VirefConfig,
        seed: int = 0,
        embeddings: EmbeddingTable | np.ndarray | None = None,
        store: ParameterStore | None = None,
        dtype=np.float32,
    ):
        if tag not in VARIANTS:
            raise UnsupportedVariantError(f"unknown variant {tag!r}; expected one of {VARIANTS}")
        self.tag = tag
        self.config = config.validate()
        self.seed = seed
        c = config
        self.decoder = LstmStack("dec", c.dec_layers, c.embed_dim, c.hidden)
        self.encoder = LstmStack("enc", c.enc_layers, c.encoder_input_dim, c.hidden) if tag != "viref_e" else None
        self.fan = AffineStack("fan", c.hidden, c.fan_widths) if tag == "viref" else None
        wen_in = 2 * c.hidden if tag == "viref" else c.hidden
        self.wen = AffineStack("wen", wen_in, c.wen_widths)
        self.fpn = AffineStack("fpn", N_CLIP_STREAMS * c.dim, c.fpn_widths) if tag == "viref_e" else None
        self.encoder_runs = 0
        if store is None:
            store = self._init_store(embeddings, dtype)
        self.store = store
        self._check_store()

    # -- construction -------------------------------------------------------

    def _init_store(self, embeddings, dtype) -> ParameterStore:
        c = self.config
        rng = component_rng(self.seed, "model.init")
        store = ParameterStore(dtype)
        if embeddings is None:
            table = component_rng(self.seed, "model.embedding").uniform(-0.1, 0.1, size=(c.vocab_size, c.embed_dim))
        else:
            table = embeddings.vectors if isinstance(embeddings, EmbeddingTable) else np.asarray(embeddings)
            if table.shape != (c.vocab_size, c.embed_dim):
                raise ShapeError(f"embedding table {table.shape} does not match ({c.vocab_size}, {c.embed_dim})")
        trainable = embeddings.trainable if isinstance(embeddings, EmbeddingTable) else True
        store.add("embedding", table, trainable=trainable)
        if self.encoder is not None:
            store.add("enc.h0", np.zeros((c.enc_layers, c.hidden)))
            store.add("enc.c0", np.zeros((c.enc_layers, c.hidden)))
            self.encoder.init_params(store, rng)
        if self.tag == "viref":
            store.add("attn.init_logits", np.zeros(c.n_streams))
            self.fan.init_params(store, rng)
        if self.fpn is not None:
            self.fpn.init_params(store, rng)
        self.decoder.init_params(store, rng)
        self.wen.init_params(store, rng)
        return store

    def _check_store(self) -> None:
        self.decoder.check(self.store)
        if self.encoder is not None:
            self.encoder.check(self.store)
        want = {"embedding": (self.config.vocab_size, self.config.embed_dim)}
        for stack in (self.fan, self.wen, self.fpn):
            if stack is None:
                continue
            n_in = stack.input_dim
            for layer, width in enumerate(stack.widths):
                w, b = stack.param_names(layer)
                want[w], want[b] = (n_in, width), (width,)
                n_in = width
        for name, shape in want.items():
            if name not in self.store:
                raise ShapeError(f"parameter {name!r} missing for variant {self.tag}")
            if self.store[name].shape != shape:
                raise ShapeError(f"parameter {name!r} has shape {self.store[name].shape}, expected {shape}")

    def astype(self, dtype) -> "RefExpModel":
        return RefExpModel(self.tag, self.config, self.seed, store=self.store.copy(dtype))

    def with_store(self, store: ParameterStore) -> "RefExpModel":
        """Same variant and config over another store (for example a finite-difference probe)."""
        return RefExpModel(self.tag, self.config, self.seed, store=store)

    @property
    def dtype(self):
        return self.store.dtype

    @property
    def needs_frames(self) -> bool:
        return self.tag != "viref_e"

    def batch(self, items: Sequence) -> FeatureBatch:
        return make_feature_batch(items, self.dtype, need_frames=self.needs_frames, need_clips=not self.needs_frames)

    def _fb(self, features) -> FeatureBatch:
        if isinstance(features, FeatureBatch):
            return features
        return self.batch([features])

    # -- building blocks ----------------------------------------------------

    def _a0(self) -> Tensor:
        return ad.softmax_op(self.store["attn.init_logits"])

    def initial_attention(self) -> np.ndarray:
        if self.tag != "viref":
            raise UnsupportedVariantError(f"variant {self.tag} has no attention weights")
        with no_grad():
            return self._a0().data.copy()

    def _encoder_init_state(self, rows: int) -> LstmState:
        layers = []
        for layer in range(self.config.enc_layers):
            h = ad.broadcast_to(ad.take_rows(self.store["enc.h0"], [layer]), (rows, self.config.hidden))
            c = ad.broadcast_to(ad.take_rows(self.store["enc.c0"], [layer]), (rows, self.config.hidden))
            layers.append((h, c))
        return LstmState(layers)

    def _encode(self, fb: FeatureBatch, a: Tensor, train=False, rng=None) -> LstmState:
        """Run the encoder over every row of ``fb`` with stream weights ``a`` (5,) or (R, 5)."""
        frames = fb.frames
        R = frames.shape[0]
        if a.data.ndim == 1:
            a = ad.broadcast_to(ad.reshape(a, (1, -1)), (R, a.shape[0]))
        x = _scale_streams(frames, a)
        self.encoder_runs += R
        _, state = lstm_forward(
            x,
            self._encoder_init_state(R),
            self.encoder,
            self.store,
            train=train,
            dropout_p=self.config.dropout,
            rng=rng,
            mask=fb.frame_mask,
        )
        return state

    def _uniform_weights(self) -> Tensor:
        n = self.config.n_streams
        return Tensor(np.full(n, 1.0 / n, dtype=self.dtype))

    def encode_sequence(self, features, a) -> LstmState:
        """Final encoder state after all frames, frames scaled by attention weights ``a``."""
        if self.encoder is None:
            raise UnsupportedVariantError("viref_e has no recurrent encoder")
        fb = self._fb(features)
        if fb.frames is None or fb.frames.shape[1] == 0:
            raise ValueError("empty feature sequence")
        return self._encode(fb, ad.as_tensor(np.asarray(a, dtype=self.dtype) if not isinstance(a, Tensor) else a))

    def _decoder_init(self, fb: FeatureBatch, train=False, rng=None) -> LstmState:
        if self.tag == "viref_e":
            if fb.clips is None:
                raise FeatureKindError("viref_e needs clip-level features")
            h = affine_stack_forward(fb.clips, self.fpn, self.store, train=train, dropout_p=self.config.dropout, rng=rng)
            c = Tensor(np.zeros(h.shape, dtype=self.dtype))
            return LstmState([(h, c) for _ in range(self.config.dec_layers)])
        if fb.frames is None:
            raise FeatureKindError(f"{self.tag} needs per-frame feature sequences")
        a = self._a0() if self.tag == "viref" else self._uniform_weights()
        return self._encode(fb, a, train, rng)

    def decoder_init(self, features) -> LstmState:
        with no_grad():
            return self._decoder_init(self._fb(features))

    def _fan(self, h: Tensor, train=False, rng=None) -> Tensor:
        logits = affine_stack_forward(h, self.fan, self.store, train=train, dropout_p=self.config.dropout, rng=rng)
        return ad.softmax_op(logits)

    def _wen_input(self, h: Tensor, fb: FeatureBatch, train=False, rng=None) -> tuple[Tensor, Tensor | None]:
        if self.tag != "viref":
            return h, None
        a = self._fan(h, train, rng)
        enc = self._encode(fb, a, train, rng)
        return ad.concat([h, enc.top_hidden], axis=-1), a

    def _word_logits(self, wen_in: Tensor, train=False, rng=None) -> Tensor:
        return affine_stack_forward(wen_in, self.wen, self.store, train=train, dropout_p=self.config.dropout, rng=rng)

    def _embed(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        e = ad.take_rows(self.store["embedding"], ids.reshape(-1))
        return ad.reshape(e, (*ids.shape, self.config.embed_dim))

    # -- decoding -----------------------------------------------------------

    def step_log_probs(self, word_ids, state: LstmState, fb: FeatureBatch):
        """One decoder step for a batch of rows: (log-probs (R, N), new state, attention or None)."""
        word_ids = np.asarray(word_ids, dtype=np.intp).reshape(-1)
        with no_grad():
            x = self._embed(word_ids[:, None])
            _, new_state = lstm_forward(x, state, self.decoder, self.store)
            wen_in, a = self._wen_input(new_state.top_hidden, fb)
            logp = ad.log_softmax(self._word_logits(wen_in))
        return logp.data, new_state, None if a is None else a.data

    def decode_step(self, word_id: int, state: LstmState, features):
        """(probabilities over the vocabulary, new decoder state, attention weights or None)."""
        fb = self._fb(features)
        logp, new_state, a = self.step_log_probs([word_id], state, fb)
        probs = np.exp(logp[0])
        return probs / probs.sum(), new_state, None if a is None else a[0]

    def teacher_forced(self, fb: FeatureBatch, tokens: np.ndarray, mask: np.ndarray, train=False, rng=None):
        """Log-probabilities of every masked target position.

        ``tokens`` (R, L) start with <start>; ``mask`` (R, L) flags prediction
        targets. Returns (log-probs (K, N), target ids (K,), source row (K,)).
        """
        tokens = np.asarray(tokens)
        mask = np.asarray(mask, dtype=bool)
        R, L = tokens.shape
        T = L - 1
        inputs, targets, tmask = tokens[:, :-1], tokens[:, 1:], mask[:, 1:]
        state0 = self._decoder_init(fb, train, rng)
        hd, _ = lstm_forward(
            self._embed(inputs), state0, self.decoder, self.store, train=train, dropout_p=self.config.dropout, rng=rng
        )
        rows = np.flatnonzero(tmask.reshape(-1))
        h = ad.take_rows(ad.reshape(hd, (R * T, self.config.hidden)), rows)
        src = rows // T
        wen_in, _ = self._wen_input(h, fb.rows(src) if self.tag == "viref" else fb, train, rng)
        logp = ad.log_softmax(self._word_logits(wen_in, train, rng))
        return logp, targets.reshape(-1)[rows], src

    def loss(self, fb: FeatureBatch, tokens, mask, train=False, rng=None) -> Tensor:
        """Mean per-token cross-entropy over the masked targets."""
        logp, tgt, _ = self.teacher_forced(fb, tokens, mask, train, rng)
        return nll(logp, tgt)

    def score_rows(self, fb: FeatureBatch, tokens, mask) -> np.ndarray:
        """Sum of target log-probabilities per row (eval mode)."""
        with no_grad():
            logp, tgt, src = self.teacher_forced(fb, tokens, mask)
        picked = logp.data[np.arange(tgt.size), tgt].astype(np.float64)
        out = np.zeros(len(tokens))
        np.add.at(out, src, picked)
        return out

    def sequence_log_prob(self, features, tokens) -> float:
        """log p(w_1 .. w_n, <end> | pair) under teacher forcing; <start> is not scored."""
        ids = _strip_padding(tokens, self.config.vocab_size)
        arr = np.asarray([ids])
        mask = np.zeros_like(arr, dtype=bool)
        mask[0, 1:] = True
        return float(self.score_rows(self._fb(features), arr, mask)[0])

    def score_candidates(self, candidates: Sequence, tokens) -> np.ndarray:
        """sequence_log_prob of one expression for every candidate pair, in one batch."""
        ids = _strip_padding(tokens, self.config.vocab_size)
        arr = np.tile(np.asarray(ids), (len(candidates), 1))
        mask = np.zeros_like(arr, dtype=bool)
        mask[:, 1:] = True
        return self.score_rows(self.batch(candidates), arr, mask)

    def num_parameters(self) -> int:
        return self.store.num_elements()


# reserved ids follow the fixed vocabulary layout: <start>=0, <end>=1, <unk>=2, <nil>=3
_START, _END, _NIL = 0, 1, 3


def _strip_padding(tokens, vocab_size: int) -> list[int]:
    ids = list(tokens.ids if isinstance(tokens, TokenSequence) else tokens)
    while ids and ids[-1] == _NIL:
        ids.pop()
    if len(ids) < 2 or ids[0] != _START or ids[-1] != _END:
        raise ValueError("token sequence must be <start> ... <end> (optionally followed by <nil> padding)")
    inner = ids[1:-1]
    if any(i in (_START, _END, _NIL) for i in inner):
        raise ValueError("reserved token inside the expression")
    if any(not 0 <= i < vocab_size for i in ids):
        raise ValueError("token id out of range")
    return ids


def build_model(tag: str, config: VirefConfig, vocab: Vocabulary | None = None, seed: int = 0, **kw) -> RefExpModel:
    if vocab is not None and len(vocab) != config.vocab_size:
        config = replace(config, vocab_size=len(vocab), wen_widths=(*config.wen_widths[:2], len(vocab)))
    return RefExpModel(tag, config, seed, **kw)
