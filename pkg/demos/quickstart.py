"""Synthesize a small world, train VIREF for a few epochs, then generate and rank.

Run from the repository root:  python3 demos/quickstart.py
"""

from viref.data import Dataset, decode, encode_refexp
from viref.models import VirefConfig, build_model
from viref.synth import WorldConfig, generate_synthetic_dataset
from viref.tasks import TrainConfig, comprehend, generate, pair_features, train

corpus = generate_synthetic_dataset(WorldConfig(video_count=12, seed=1))
ds = Dataset(corpus.records, corpus.vocab, corpus.features, corpus.clips)
print(f"{len(ds.records)} pairs, vocabulary of {len(ds.vocab)} tokens")

cfg = VirefConfig(enc_layers=2, dec_layers=2, hidden=32, dim=corpus.config.dim, vocab_size=len(ds.vocab), embed_dim=16)
model = build_model("viref", cfg, ds.vocab, seed=1)
result = train(model, ds, TrainConfig(lr=3e-3, max_epochs=150, patience=8, seed=1))
print(f"best validation loss {result.best_val:.3f} at epoch {result.best_epoch} ({result.steps} steps)")

i = ds.split("test")[0]
rec = ds.records[i]
out = generate(model, pair_features(ds, i), beam_size=3)
print(f"\npair {rec.pair_id}")
print("  reference :", rec.refexps[0])
print("  generated :", decode(out.tokens(), ds.vocab), f"(log p = {out.log_prob:.2f})")

cands = [(ds.records[j].pair_id, pair_features(ds, j)) for j in ds.videos()[rec.video_id]]
res = comprehend(model, encode_refexp(rec.refexps[0], ds.vocab), cands, ground_truth=rec.pair_id)
print(f"\nranking the {len(cands)} pairs of {rec.video_id} for the reference (ground truth at rank {res.rank}):")
for pid, score in res.ranking:
    print(f"  {pid}  {score:8.2f}")
