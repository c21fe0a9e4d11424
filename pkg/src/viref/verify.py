"""Verification helpers: finite-difference checks of the full losses and a small overfit run."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import ClipFeatureSet, Dataset, FeatureSequence, TokenSequence, build_vocabulary, filter_and_pad
from .diffcore import GradCheckResult, finite_difference_check
from .models import PairFeatures, RefExpModel, VirefConfig
from .synth import WorldConfig, generate_synthetic_dataset
from .tasks import TrainConfig, train


@dataclass
class TinySetup:
    layers: int = 2
    hidden: int = 8
    dim: int = 6
    vocab_size: int = 12
    frames: int = 3
    re_length: int = 4
    embed_dim: int = 5
    seed: int = 0


def tiny_problem(tag: str, setup: TinySetup = TinySetup()):
    """A float64 model plus a two-sequence batch; the second sequence is one word shorter."""
    s = setup
    cfg = VirefConfig(
        enc_layers=s.layers,
        dec_layers=s.layers,
        hidden=s.hidden,
        dim=s.dim,
        vocab_size=s.vocab_size,
        embed_dim=s.embed_dim,
        dropout=0.2,
    )
    model = RefExpModel(tag, cfg, seed=s.seed, dtype=np.float64)
    rng = np.random.default_rng(s.seed + 1)
    pairs = [
        PairFeatures(FeatureSequence(rng.normal(size=(s.frames, 5, s.dim))), ClipFeatureSet(rng.normal(size=(6, s.dim))))
        for _ in range(2)
    ]
    seqs = []
    for n in (s.re_length, s.re_length - 1):
        words = rng.integers(4, s.vocab_size, size=n)
        seqs.append(TokenSequence((0, *map(int, words), 1)))
    batch = filter_and_pad(seqs, max_len=25)
    return model, pairs, batch


# A step of 1e-4 balances truncation error (order step**2) against rounding
# noise in the extended-precision oracle (about 1e-19 / step in absolute terms),
# which at 1e-5 already swamps the few gradient entries that sit near 1e-10.
VERIFY_EPSILON = 1e-4


def gradcheck_variant(
    tag: str,
    setup: TinySetup = TinySetup(),
    epsilon: float = VERIFY_EPSILON,
    train: bool = True,
    max_per_param: int | None = None,
) -> GradCheckResult:
    """Max relative error between reverse-mode and central-difference gradients of the loss.

    With ``train`` the loss uses dropout with a mask stream re-seeded on each
    call, so every evaluation sees the same masks.
    """
    model, pairs, batch = tiny_problem(tag, setup)

    def forward(store):
        m = model.with_store(store)
        fb = m.batch(pairs)
        rng = np.random.default_rng(setup.seed + 2) if train else None
        return m.loss(fb, batch.tokens, batch.mask, train=train, rng=rng)

    return finite_difference_check(forward, model.store, epsilon, max_per_param=max_per_param, sample_seed=setup.seed)


def overfit_dataset(n_pairs: int = 8, seed: int = 0) -> Dataset:
    """``n_pairs`` synthetic pairs (one per video) with one expression each, all in the train split."""
    corpus = generate_synthetic_dataset(WorldConfig(video_count=n_pairs, pairs_per_video=1, seed=seed))
    records = [replace(r, refexps=r.refexps[:1], split="train") for r in corpus.records]
    vocab = build_vocabulary([r.refexps[0] for r in records], min_count=1)
    return Dataset(records, vocab, corpus.features, corpus.clips)


def overfit_run(n_pairs: int = 8, hidden: int = 32, layers: int = 2, max_steps: int = 2000, target: float = 0.05, seed: int = 0):
    """Train VIREF on :func:`overfit_dataset` until the eval-mode train loss drops below ``target``.

    One full batch per epoch, no dropout. Returns (model, dataset, TrainResult).
    """
    dataset = overfit_dataset(n_pairs, seed)
    dim = next(iter(dataset.features.values())).dim
    cfg = VirefConfig(enc_layers=layers, dec_layers=layers, hidden=hidden, dim=dim, vocab_size=len(dataset.vocab), embed_dim=16, dropout=0.0)
    model = RefExpModel("viref", cfg, seed=seed)
    tc = TrainConfig(lr=3e-3, batch_size=n_pairs, max_epochs=max_steps, patience=max_steps, seed=seed, dropout=False, max_steps=max_steps, stop_below=target)
    result = train(model, dataset, tc, val_split="train")
    return model, dataset, result
