from dataclasses import replace

import numpy as np
import pytest

from viref.data import Dataset, load_clip_features, load_feature_sequence, tokenize
from viref.diffcore import ConfigError
from viref.synth import LatentPair, World, WorldConfig, generate_synthetic_dataset


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_dataset(WorldConfig())


def test_default_world_shape(corpus):
    assert len(corpus.records) == 200
    labels = [r.split for r in corpus.records]
    assert [labels.count(s) for s in ("train", "val", "test")] == [120, 20, 60]
    for r in corpus.records:
        assert len(r.refexps) == 3
        assert 4 <= r.frame_count <= 8


def test_same_seed_same_bytes():
    a = generate_synthetic_dataset(WorldConfig(video_count=3))
    b = generate_synthetic_dataset(WorldConfig(video_count=3))
    assert a.records == b.records
    for pid in a.features:
        assert a.features[pid].data.tobytes() == b.features[pid].data.tobytes()
        assert a.clips[pid].data.tobytes() == b.clips[pid].data.tobytes()
    c = generate_synthetic_dataset(WorldConfig(video_count=3, seed=1))
    assert any(a.features[p].data.tobytes() != c.features[p].data.tobytes() for p in a.features)


def test_identical_latents_give_identical_features():
    world = World(WorldConfig(noise_std=0.0))
    lat = LatentPair(1, 2, 0, 3, 1, 2)
    np.testing.assert_array_equal(world.clean_frames(lat, 5), world.clean_frames(lat, 5))


def test_main_color_touches_main_and_scene_streams_only():
    world = World(WorldConfig(noise_std=0.0))
    a = world.clean_frames(LatentPair(1, 0, 2, 3, 1, 0), 6)
    b = world.clean_frames(LatentPair(1, 3, 2, 3, 1, 0), 6)
    differs = [not np.array_equal(a[:, s], b[:, s]) for s in range(5)]
    assert differs == [True, False, True, False, False]


def test_reverse_pairs_swap_the_objects(corpus):
    for r in corpus.records:
        if r.direction != "reverse":
            continue
        k = int(r.pair_id[-2:])
        prev = corpus.latents[f"{r.video_id}_p{k - 1:02d}"]
        lat = corpus.latents[r.pair_id]
        assert (lat.main_class, lat.main_color) == (prev.context_class, prev.context_color)
        assert (lat.context_class, lat.context_color) == (prev.main_class, prev.main_color)


def _nearest_centroid_accuracy(noise_std):
    cfg = WorldConfig(noise_std=noise_std)
    corp = generate_synthetic_dataset(cfg)
    x = np.stack([corp.features[r.pair_id].data[0, 0] for r in corp.records]).astype(np.float64)
    y = np.array([corp.latents[r.pair_id].main_class for r in corp.records])
    assert len(x) == 200
    fit, ev = slice(0, 100), slice(100, 200)
    centroids = np.stack([x[fit][y[fit] == k].mean(axis=0) for k in range(len(cfg.classes))])
    d = ((x[ev][:, None, :] - centroids[None]) ** 2).sum(-1)
    return float((d.argmin(1) == y[ev]).mean())


def test_main_class_is_recoverable_without_noise():
    assert _nearest_centroid_accuracy(0.0) == 1.0


def test_main_class_is_recoverable_with_noise():
    assert _nearest_centroid_accuracy(0.1) >= 0.95


def test_refexps_name_the_latents(corpus):
    cfg = corpus.config
    for r in corpus.records[:20]:
        lat = corpus.latents[r.pair_id]
        words = set(tokenize(r.refexps[0]))
        assert {cfg.classes[lat.main_class], cfg.colors[lat.main_color], cfg.motions[lat.main_motion]} <= words
        assert set(tokenize(cfg.relations[lat.relation])) <= words


def test_vocabulary_covers_every_expression(corpus):
    for r in corpus.records:
        for text in r.refexps:
            assert all(w in corpus.vocab for w in tokenize(text))


def test_written_corpus_loads_with_config_shapes(tmp_path):
    cfg = WorldConfig(video_count=4, dim=24, min_frames=3, max_frames=5)
    corp = generate_synthetic_dataset(cfg, out_dir=tmp_path)
    for r in corp.records:
        fs = load_feature_sequence(tmp_path / r.feature_path)
        assert fs.m == r.frame_count and fs.dim == 24
        assert load_clip_features(tmp_path / r.clip_feature_path).dim == 24
    ds = Dataset.load(tmp_path / "manifest.jsonl")
    assert ds.vocab.tokens == corp.vocab.tokens
    assert len(ds.records) == 20


@pytest.mark.parametrize(
    "change",
    [dict(dim=8), dict(min_frames=5, max_frames=4), dict(noise_std=-1.0), dict(colors=("red", "red"))],
)
def test_invalid_world_configs(change):
    with pytest.raises(ConfigError):
        replace(WorldConfig(), **change).validate()


def test_unknown_world_keys_rejected():
    with pytest.raises(ConfigError):
        WorldConfig.from_dict({"videos": 3})
