"""Independent reference implementations used as test oracles."""

import math

import numpy as np

WORDS = ["the", "red", "car", "parked", "near", "van", "blue", "moving"]


def random_bleu_cases(n, seed=0):
    """Candidates edited from one of their references so that many scores are non-zero."""
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(n):
        vocab = WORDS[: int(rng.integers(3, len(WORDS) + 1))]
        refs = [list(rng.choice(vocab, size=int(rng.integers(1, 11)))) for _ in range(int(rng.integers(1, 4)))]
        cand = list(refs[0])
        for _ in range(int(rng.integers(0, 3))):
            cand[int(rng.integers(len(cand)))] = str(rng.choice(vocab))
        start = int(rng.integers(0, 2))
        cand = cand[start:] + list(rng.choice(vocab, size=int(rng.integers(0, 3))))
        if not cand:
            cand = [vocab[0]]
        cases.append((cand, refs))
    return cases


def exhaustive_best(model, pair, max_len, end_id=1):
    """Best finished sequence by brute force over every continuation of <start>.

    Returns (ids, log_prob, best_any) where best_any is the highest log prob over
    all terminal sequences: finished ones plus unfinished ones of length max_len.
    Ties go to the lexicographically smaller id sequence.
    """
    n = model.config.vocab_size
    finished = []
    best_any = -math.inf

    def walk(ids, lp, state):
        nonlocal best_any
        if len(ids) - 1 == max_len:
            best_any = max(best_any, lp)
            return
        probs, new_state, _ = model.decode_step(ids[-1], state, pair)
        for w in range(n):
            nxt = lp + math.log(probs[w])
            if w == end_id:
                finished.append((ids + (w,), nxt))
                best_any = max(best_any, nxt)
            else:
                walk(ids + (w,), nxt, new_state)

    walk((0,), 0.0, model.decoder_init(pair))
    ids, lp = min(finished, key=lambda f: (-f[1], f[0]))
    return ids, lp, best_any


def chain_log_prob(model, pair, ids):
    """Sum of log p(w_t | w_<t) by repeated decode_step; accepts any token ids."""
    state = model.decoder_init(pair)
    total = 0.0
    for prev, nxt in zip(ids[:-1], ids[1:]):
        probs, state, _ = model.decode_step(prev, state, pair)
        total += math.log(probs[nxt])
    return total


def slow_bleu4(cand, refs):
    """Sentence BLEU-4 by explicit loops over n-gram positions."""
    precisions = []
    for n in range(1, 5):
        grams = [tuple(cand[i : i + n]) for i in range(len(cand) - n + 1)]
        if not grams:
            return 0.0
        matched = 0
        for g in set(grams):
            in_cand = sum(1 for x in grams if x == g)
            best = 0
            for ref in refs:
                best = max(best, sum(1 for i in range(len(ref) - n + 1) if tuple(ref[i : i + n]) == g))
            matched += min(in_cand, best)
        if matched == 0:
            return 0.0
        precisions.append(matched / len(grams))
    c = len(cand)
    lengths = sorted(len(r) for r in refs)
    r = lengths[int(np.argmin([abs(x - c) for x in lengths]))]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * float(np.prod(precisions)) ** 0.25
