"""Training, beam-search generation and generative comprehension ranking."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, Example, TokenSequence, encode_refexp, filter_and_pad, tokenize
from .diffcore import AdamState, ConfigError, adam_step, backward, component_rng, no_grad
from .metrics import GenerationReport, RetrievalReport, generation_report, retrieval_metrics
from .models import PairFeatures, RefExpModel

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite training loss {value} at step {step}")
        self.step = step
        self.value = value


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 10
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    max_len: int = 25
    dropout: bool = True
    max_steps: int | None = None
    stop_below: float | None = None

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]]  # (epoch, train loss, val loss)
    best_epoch: int
    best_val: float
    steps: int
    checkpoint: bytes = field(repr=False, default=b"")

    @property
    def train_losses(self) -> list[float]:
        return [t for _, t, _ in self.history]

    @property
    def val_losses(self) -> list[float]:
        return [v for _, _, v in self.history]


def pair_features(dataset: Dataset, record: int) -> PairFeatures:
    pid = dataset.records[record].pair_id
    return PairFeatures(dataset.features[pid], dataset.clips[pid])


def make_batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator) -> list[list[Example]]:
    """Shuffle, then sort within buckets of a few batches by length so padding stays small."""
    order = rng.permutation(len(examples))
    bucket = batch_size * 4
    batches = []
    for start in range(0, len(order), bucket):
        chunk = sorted(order[start : start + bucket], key=lambda i: (len(examples[i].tokens), i))
        for b in range(0, len(chunk), batch_size):
            batches.append([examples[i] for i in chunk[b : b + batch_size]])
    return [batches[i] for i in rng.permutation(len(batches))]


def _batch_arrays(model: RefExpModel, dataset: Dataset, batch: Sequence[Example], max_len: int):
    pb = filter_and_pad([e.tokens for e in batch], max_len, dataset.vocab.nil_id)
    fb = model.batch([pair_features(dataset, batch[i].record) for i in pb.kept])
    return fb, pb


def mean_token_loss(model: RefExpModel, dataset: Dataset, examples: Sequence[Example], batch_size=32, max_len=25) -> float:
    """Masked per-token cross-entropy over ``examples`` in eval mode."""
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(examples), batch_size):
            fb, pb = _batch_arrays(model, dataset, examples[start : start + batch_size], max_len)
            n = int(pb.target_mask.sum())
            total += model.loss(fb, pb.tokens, pb.mask).item() * n
            count += n
    return total / count


def train(
    model: RefExpModel,
    dataset: Dataset,
    config: TrainConfig,
    train_split: str = "train",
    val_split: str = "val",
) -> TrainResult:
    """Adam on the masked teacher-forced loss with early stopping on validation loss.

    The model's store ends up holding the parameters of the best validation epoch.
    """
    config.validate()
    train_ex = dataset.examples(train_split, config.max_len)
    val_ex = dataset.examples(val_split, config.max_len)
    if not train_ex or not val_ex:
        raise ValueError(f"need non-empty {train_split!r} and {val_split!r} splits")
    batch_rng = component_rng(config.seed, "train.batches")
    drop_rng = component_rng(config.seed, "train.dropout")
    opt = AdamState()
    history: list[tuple[int, float, float]] = []
    best_val, best_epoch, best = math.inf, 0, model.store.snapshot()
    bad_epochs = 0
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        tot, cnt = 0.0, 0
        for batch in make_batches(train_ex, config.batch_size, batch_rng):
            fb, pb = _batch_arrays(model, dataset, batch, config.max_len)
            loss = model.loss(fb, pb.tokens, pb.mask, train=config.dropout, rng=drop_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(step, value)
            grads = backward(loss, model.store)
            adam_step(model.store, grads, opt, lr=config.lr)
            step += 1
            n = int(pb.target_mask.sum())
            tot += value * n
            cnt += n
            if config.max_steps is not None and step >= config.max_steps:
                break
        val = mean_token_loss(model, dataset, val_ex, max_len=config.max_len)
        if not np.isfinite(val):
            raise TrainingDivergedError(step, val)
        history.append((epoch, tot / cnt, val))
        log.info("epoch %d step %d train %.4f val %.4f", epoch, step, tot / cnt, val)
        if val < best_val:
            best_val, best_epoch, best = val, epoch, model.store.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
        if bad_epochs >= config.patience:
            break
        if config.max_steps is not None and step >= config.max_steps:
            break
        if config.stop_below is not None and val < config.stop_below:
            break
    model.store.restore(best)
    return TrainResult(history, best_epoch, best_val, step, model.store.to_bytes())


def write_loss_history(result: TrainResult, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = out / "train_loss.txt", out / "val_loss.txt"
    for path, col in zip(paths, (1, 2)):
        path.write_text("".join(f"{row[0]}\t{row[col]:.8f}\n" for row in result.history))
    return paths


# ---------------------------------------------------------------------------
# generation


@dataclass
class Generated:
    ids: tuple[int, ...]
    log_prob: float
    finished: bool

    def tokens(self) -> TokenSequence:
        return TokenSequence(self.ids)


def generate(model: RefExpModel, features, beam_size: int = 3, max_len: int = 25, start_id: int = 0, end_id: int = 1) -> Generated:
    """Beam search for argmax_r p(r | pair) without length normalisation.

    Finished hypotheses stay in the beam and compete with the expansions of
    unfinished ones; ties are broken by the lexicographically smaller id
    sequence. ``max_len`` bounds the number of tokens generated after <start>.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    fb = model.batch([features])
    state = model.decoder_init(fb)
    # each hypothesis: (log prob, ids, finished); live rows of `state` follow the unfinished ones in order
    beam: list[tuple[float, tuple[int, ...], bool]] = [(0.0, (start_id,), False)]
    for _ in range(max_len):
        live = [h for h in beam if not h[2]]
        if not live:
            break
        logp, new_state, _ = model.step_log_probs([h[1][-1] for h in live], state, fb.rows([0] * len(live)))
        logp = logp.astype(np.float64)
        cands = [(h[0], h[1], True, -1) for h in beam if h[2]]
        for k, h in enumerate(live):
            for w in range(logp.shape[1]):
                cands.append((h[0] + logp[k, w], h[1] + (w,), w == end_id, k))
        cands.sort(key=lambda c: (-c[0], c[1]))
        kept = cands[:beam_size]
        beam = [(c[0], c[1], c[2]) for c in kept]
        rows = [c[3] for c in kept if not c[2]]
        if rows:
            state = new_state.select(rows)
    finished = [h for h in beam if h[2]]
    pool = finished if finished else beam
    best = min(pool, key=lambda h: (-h[0], h[1]))
    return Generated(best[1], float(best[0]), best[2])


# ---------------------------------------------------------------------------
# comprehension


@dataclass
class RankedRetrieval:
    query: str
    ranking: list[tuple[str, float]]
    rank: int | None = None


def comprehend(
    model: RefExpModel,
    refexp: TokenSequence,
    candidates: Sequence[tuple[str, PairFeatures]],
    ground_truth: str | None = None,
    query_text: str = "",
) -> RankedRetrieval:
    """Rank candidate pairs by log p(refexp | pair); exact ties keep input order."""
    if not candidates:
        raise ValueError("comprehension needs at least one candidate pair")
    scores = model.score_candidates([c for _, c in candidates], refexp)
    order = np.argsort(-scores, kind="stable")
    ranking = [(candidates[i][0], float(scores[i])) for i in order]
    rank = None
    if ground_truth is not None:
        ids = [pid for pid, _ in ranking]
        if ids.count(ground_truth) != 1:
            raise ValueError(f"ground truth {ground_truth!r} must appear exactly once among the candidates")
        rank = ids.index(ground_truth) + 1
    return RankedRetrieval(query_text, ranking, rank)


# ---------------------------------------------------------------------------
# evaluation over a split


@dataclass
class EvaluationResult:
    generation: GenerationReport
    retrieval: RetrievalReport
    generated: dict[str, str]
    retrievals: list[RankedRetrieval]
    generation_seconds: float
    comprehension_seconds: float
    n_parameters: int


def evaluate(model: RefExpModel, dataset: Dataset, split: str = "test", beam_size: int = 3, max_len: int = 25) -> EvaluationResult:
    """Generate for every pair of ``split`` and rank every pair of its video for each of its expressions."""
    vocab = dataset.vocab
    test = dataset.split(split)
    if not test:
        raise ValueError(f"split {split!r} is empty")
    generated, references = {}, {}
    t0 = time.perf_counter()
    for i in test:
        out = generate(model, pair_features(dataset, i), beam_size, max_len, vocab.start_id, vocab.end_id)
        pid = dataset.records[i].pair_id
        generated[pid] = [vocab.token(t) for t in out.ids[1:] if t not in (vocab.end_id, vocab.nil_id)]
        references[pid] = [tokenize(t) for t in dataset.records[i].refexps]
    gen_time = (time.perf_counter() - t0) / len(test)

    videos = dataset.videos()
    retrievals = []
    t0 = time.perf_counter()
    for i in test:
        rec = dataset.records[i]
        cands = [(dataset.records[j].pair_id, pair_features(dataset, j)) for j in videos[rec.video_id]]
        for text in rec.refexps:
            seq = encode_refexp(text, vocab)
            retrievals.append(comprehend(model, seq, cands, rec.pair_id, text))
    comp_time = (time.perf_counter() - t0) / max(len(retrievals), 1)

    gen_report = generation_report(generated, references, vocab)
    ret_report = retrieval_metrics([r.rank for r in retrievals])
    gen_text = {pid: " ".join(toks) for pid, toks in generated.items()}
    return EvaluationResult(gen_report, ret_report, gen_text, retrievals, gen_time, comp_time, model.num_parameters())
