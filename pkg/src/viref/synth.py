"""Deterministic synthetic videos of object pairs with templated relational expressions.

Each attribute value owns one column of a seeded random orthonormal basis:
appearance streams are sums of the class and colour columns, and the two mask
streams encode each object's 1-d position through Gaussian bumps projected
onto a further block of columns.  The main object moves with a speed set by
its motion verb; the context object trails it by a gap whose trajectory is
set by the relation.  Everything is a pure function of the config.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    ClipFeatureSet,
    FeatureSequence,
    PairRecord,
    Vocabulary,
    build_vocabulary,
    split_dataset,
    tokenize,
    write_clip_features,
    write_feature_sequence,
    write_manifest,
)
from .diffcore import ConfigError, derive_seed

N_POSITION_BUMPS = 8

TEMPLATES = (
    "the {mc} {mk} {mm} {rel} the {cc} {ck}",
    "a {mc} {mk} {mm} {rel} a {cc} {ck}",
    "the {mc} {mk} that is {mm} {rel} the {cc} {ck}",
)


@dataclass
class WorldConfig:
    video_count: int = 40
    pairs_per_video: int = 5
    min_frames: int = 4
    max_frames: int = 8
    dim: int = 32
    classes: tuple[str, ...] = ("car", "van", "truck", "person")
    colors: tuple[str, ...] = ("red", "blue", "white", "black")
    motions: tuple[str, ...] = ("parked", "moving", "turning")
    relations: tuple[str, ...] = ("near", "approaching", "moving away from", "behind")
    noise_std: float = 0.05
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.6, 0.1, 0.3)

    def __post_init__(self):
        for name in ("classes", "colors", "motions", "relations", "split_ratios"):
            setattr(self, name, tuple(getattr(self, name)))

    @property
    def n_latent_columns(self) -> int:
        return len(self.classes) + len(self.colors) + N_POSITION_BUMPS

    def validate(self) -> "WorldConfig":
        if self.video_count < 1 or self.pairs_per_video < 1:
            raise ConfigError("video_count and pairs_per_video must be positive")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError("need 1 <= min_frames <= max_frames")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        for name in ("classes", "colors", "motions", "relations"):
            values = getattr(self, name)
            if not values or len(set(values)) != len(values):
                raise ConfigError(f"{name} must be a non-empty list of distinct values")
        if self.dim < self.n_latent_columns:
            raise ConfigError(
                f"dim {self.dim} too small: attributes need {self.n_latent_columns} orthogonal directions"
            )
        if self.video_count * self.pairs_per_video < 3:
            raise ConfigError("need at least 3 pairs in total to form splits")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LatentPair:
    main_class: int
    main_color: int
    main_motion: int
    context_class: int
    context_color: int
    relation: int


@dataclass
class SyntheticCorpus:
    config: WorldConfig
    records: list[PairRecord]
    features: dict[str, FeatureSequence]
    clips: dict[str, ClipFeatureSet]
    latents: dict[str, LatentPair]
    vocab: Vocabulary = field(default=None)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        (out / "features").mkdir(parents=True, exist_ok=True)
        (out / "clips").mkdir(parents=True, exist_ok=True)
        for r in self.records:
            write_feature_sequence(out / r.feature_path, self.features[r.pair_id])
            write_clip_features(out / r.clip_feature_path, self.clips[r.pair_id])
        write_manifest(out / "manifest.jsonl", self.records)
        self.vocab.save(out / "vocab.txt")
        return out


class World:
    """Fixed projections shared by every video of one config."""

    def __init__(self, config: WorldConfig):
        self.config = config.validate()
        rng = np.random.default_rng(derive_seed(config.seed, "synth.world"))
        q, _ = np.linalg.qr(rng.normal(size=(config.dim, config.dim)))
        scale = np.sqrt(config.dim) / 2.0
        nk, nc = len(config.classes), len(config.colors)
        self.class_vecs = scale * q[:, :nk].T
        self.color_vecs = scale * q[:, nk : nk + nc].T
        self.position_basis = scale * q[:, nk + nc : nk + nc + N_POSITION_BUMPS].T
        self.centers = np.linspace(-4.0, 3.0, N_POSITION_BUMPS)
        self.width = self.centers[1] - self.centers[0]
        nq = len(config.motions)
        self.speeds = np.linspace(-1.0, 1.0, nq) if nq > 1 else np.zeros(1)
        nr = len(config.relations)
        angles = 2 * np.pi * np.arange(nr) / nr
        self.gap_start = 1.0 + 0.5 * np.cos(angles)
        self.gap_slope = np.sin(angles)

    def appearance(self, cls: int, color: int) -> np.ndarray:
        return self.class_vecs[cls] + self.color_vecs[color]

    def mask_feature(self, x: float) -> np.ndarray:
        bumps = np.exp(-0.5 * ((x - self.centers) / self.width) ** 2)
        return bumps @ self.position_basis

    def trajectories(self, lat: LatentPair, m: int) -> tuple[np.ndarray, np.ndarray]:
        t = np.arange(1, m + 1) / m
        x_main = self.speeds[lat.main_motion] * t
        gap = self.gap_start[lat.relation] + self.gap_slope[lat.relation] * t
        return x_main, x_main - gap

    def motion_descriptor(self, xs: np.ndarray) -> np.ndarray:
        feats = np.stack([self.mask_feature(x) for x in xs])
        return feats.mean(axis=0) + feats[-1] - feats[0]

    def clean_frames(self, lat: LatentPair, m: int) -> np.ndarray:
        main = self.appearance(lat.main_class, lat.main_color)
        ctx = self.appearance(lat.context_class, lat.context_color)
        x_main, x_ctx = self.trajectories(lat, m)
        frames = np.empty((m, 5, self.config.dim))
        for i in range(m):
            frames[i, 0] = main
            frames[i, 1] = ctx
            frames[i, 2] = 0.5 * (main + ctx)
            frames[i, 3] = self.mask_feature(x_main[i])
            frames[i, 4] = self.mask_feature(x_ctx[i])
        return frames

    def clean_clip(self, lat: LatentPair, m: int) -> np.ndarray:
        main = self.appearance(lat.main_class, lat.main_color)
        ctx = self.appearance(lat.context_class, lat.context_color)
        x_main, x_ctx = self.trajectories(lat, m)
        mot_main = self.motion_descriptor(x_main)
        mot_ctx = self.motion_descriptor(x_ctx)
        return np.stack(
            [
                main,
                ctx,
                mot_main,
                mot_ctx,
                self.motion_descriptor(x_main - x_ctx),
                0.5 * (mot_main + mot_ctx) + 0.5 * (main + ctx),
            ]
        )

    def refexps(self, lat: LatentPair) -> list[str]:
        c = self.config
        words = dict(
            mc=c.colors[lat.main_color],
            mk=c.classes[lat.main_class],
            mm=c.motions[lat.main_motion],
            rel=c.relations[lat.relation],
            cc=c.colors[lat.context_color],
            ck=c.classes[lat.context_class],
        )
        return [t.format(**words) for t in TEMPLATES]

    def lexicon(self) -> list[str]:
        c = self.config
        words = {w for p in (*c.classes, *c.colors, *c.motions, *c.relations) for w in tokenize(p)}
        for t in TEMPLATES:
            words.update(tokenize(re.sub(r"\{\w+\}", " ", t)))
        return sorted(words)


def _draw_video(world: World, video_id: str) -> list[tuple[str, str, int, LatentPair]]:
    """(pair_id, direction, frame count, latents) for every ordered pair of one video.

    Odd-numbered pairs reverse the objects of the preceding pair; motion and
    relation are drawn afresh for each direction.
    """
    c = world.config
    rng = np.random.default_rng(derive_seed(c.seed, f"synth.video.{video_id}"))
    out = []
    prev = None
    for k in range(c.pairs_per_video):
        motion = int(rng.integers(len(c.motions)))
        relation = int(rng.integers(len(c.relations)))
        m = int(rng.integers(c.min_frames, c.max_frames + 1))
        if k % 2 == 1 and prev is not None:
            lat = LatentPair(prev.context_class, prev.context_color, motion, prev.main_class, prev.main_color, relation)
            direction = "reverse"
        else:
            mk, mc, ck, cc = (int(v) for v in rng.integers((len(c.classes), len(c.colors)) * 2))
            lat = LatentPair(mk, mc, motion, ck, cc, relation)
            direction = "straight"
        prev = lat
        out.append((f"{video_id}_p{k:02d}", direction, m, lat))
    return out


def generate_synthetic_dataset(config: WorldConfig, out_dir=None) -> SyntheticCorpus:
    """Build (and optionally write) a corpus: manifest records, features, clip features, vocabulary."""
    world = World(config)
    records, feats, clips, latents = [], {}, {}, {}
    for v in range(config.video_count):
        video_id = f"v{v:04d}"
        noise_rng = np.random.default_rng(derive_seed(config.seed, f"synth.noise.{video_id}"))
        for pair_id, direction, m, lat in _draw_video(world, video_id):
            frames = world.clean_frames(lat, m)
            clip = world.clean_clip(lat, m)
            if config.noise_std > 0:
                frames = frames + noise_rng.normal(0.0, config.noise_std, size=frames.shape)
                clip = clip + noise_rng.normal(0.0, config.noise_std, size=clip.shape)
            feats[pair_id] = FeatureSequence(frames)
            clips[pair_id] = ClipFeatureSet(clip)
            latents[pair_id] = lat
            records.append(
                PairRecord(
                    video_id=video_id,
                    pair_id=pair_id,
                    direction=direction,
                    frame_count=m,
                    feature_path=f"features/{pair_id}.vrft",
                    clip_feature_path=f"clips/{pair_id}.vrft",
                    refexps=world.refexps(lat),
                )
            )
    labels = split_dataset(records, config.split_ratios, derive_seed(config.seed, "synth.split"))
    for r, s in zip(records, labels):
        r.split = s
    train_text = [t for r in records if r.split == "train" for t in r.refexps]
    vocab = build_vocabulary(train_text, world.lexicon())
    corpus = SyntheticCorpus(config, records, feats, clips, latents, vocab)
    if out_dir is not None:
        corpus.write(out_dir)
    return corpus
