"""Beam search against exhaustive enumeration on a five-token vocabulary.

With beam width 5**4 = 625 every sequence of up to four tokens survives, so the
beam must return the exact argmax. Narrow beams may miss it.
"""

import itertools
import math

import numpy as np

from viref.data import ClipFeatureSet, FeatureSequence
from viref.models import PairFeatures, RefExpModel, VirefConfig
from viref.tasks import generate

cfg = VirefConfig(enc_layers=2, dec_layers=2, hidden=8, dim=6, vocab_size=5, embed_dim=5)
rng = np.random.default_rng(0)
pair = PairFeatures(FeatureSequence(rng.normal(size=(3, 5, 6))), ClipFeatureSet(rng.normal(size=(6, 6))))


def log_prob(model, ids):
    state, total = model.decoder_init(pair), 0.0
    for prev, nxt in zip(ids[:-1], ids[1:]):
        p, state, _ = model.decode_step(prev, state, pair)
        total += math.log(p[nxt])
    return total


for seed in range(3):
    model = RefExpModel("viref", cfg, seed=seed)
    model.store["wen.l2.w"].data[...] *= 5.0
    finished = []
    for n in range(4):
        for words in itertools.product([0, 2, 3, 4], repeat=n):
            ids = (0, *words, 1)
            finished.append((log_prob(model, ids), ids))
    best_lp, best_ids = max(finished, key=lambda f: (f[0], [-x for x in f[1]]))
    print(f"model {seed}: brute force {best_ids} log p = {best_lp:.6f}")
    for width in (1, 3, 625):
        out = generate(model, pair, beam_size=width, max_len=4)
        print(f"    beam {width:>3}: {out.ids} log p = {out.log_prob:.6f}")
