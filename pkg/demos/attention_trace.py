"""Watch the stream attention change word by word on a model overfit to 8 pairs.

The five streams are: main object appearance, context object appearance,
scene, main object motion, context object motion.
"""

import numpy as np

from viref.data import encode_refexp
from viref.tasks import pair_features
from viref.verify import overfit_run

STREAMS = ("main", "context", "scene", "main-mot", "ctx-mot")

model, ds, result = overfit_run()
print(f"overfit to {len(ds.records)} pairs: CE {result.best_val:.4f} after {result.steps} steps\n")
print("initial attention a0:", np.round(model.initial_attention(), 3))

rec = ds.records[0]
pair = pair_features(ds, 0)
ids = encode_refexp(rec.refexps[0], ds.vocab).ids
state = model.decoder_init(pair)
print(f"\n{'next word':>12}  " + " ".join(f"{s:>8}" for s in STREAMS) + "   p(word)")
for prev, nxt in zip(ids[:-1], ids[1:]):
    probs, state, a = model.decode_step(prev, state, pair)
    print(f"{ds.vocab.token(nxt):>12}  " + " ".join(f"{x:8.3f}" for x in a) + f"   {probs[nxt]:.3f}")
model.encoder_runs = 0
model.sequence_log_prob(pair, ids)
print(f"\nscoring {len(ids) - 1} predicted tokens ran the encoder {model.encoder_runs} times (one per step plus the a0 pass)")
