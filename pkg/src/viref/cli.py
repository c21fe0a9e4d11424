"""Command-line entry point: synth, train, generate, comprehend, evaluate, gradcheck.

Every command reads one TOML run config (optional; the built-in desk
defaults apply without one), applies the command-line overrides, validates
everything, and only then touches the filesystem. Failures print a single
JSON line on stderr, e.g. ``{"error": "missing_file", "code": 4, "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import Dataset, EmbeddingParseError, FeatureFileError, encode_refexp, load_embeddings
from .diffcore import CheckpointError, ConfigError, DegenerateBatchError, ParameterStore, ShapeError
from .metrics import write_generation_table, write_retrieval_table, write_timing_table
from .models import VARIANTS, FeatureKindError, RefExpModel, UnsupportedVariantError, VirefConfig, build_model
from .synth import WorldConfig, generate_synthetic_dataset
from .tasks import TrainConfig, TrainingDivergedError, comprehend, evaluate, generate, pair_features, train, write_loss_history
from .verify import VERIFY_EPSILON

log = logging.getLogger("viref")

COMMANDS = ("synth", "train", "generate", "comprehend", "evaluate", "gradcheck")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_BAD_DATA = 5
EXIT_DIVERGED = 6
EXIT_GRADCHECK = 7

GRADCHECK_TOL = 1e-5

DISPLAY_NAMES = {"viref": "VIREF", "viref_a": "VIREF-a", "viref_e": "VIREF-e"}

# Desk-scale defaults: small enough to train on a CPU in minutes.
DESK_MODEL = {"enc_layers": 2, "dec_layers": 2, "hidden": 32, "embed_dim": 50, "dropout": 0.2}
DESK_TRAIN = {"lr": 2e-3, "batch_size": 10, "max_epochs": 200, "patience": 8}


class CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", EXIT_USAGE, message)


def _missing(path: Path, what: str) -> CliError:
    return CliError("missing_file", EXIT_MISSING, f"{what} not found: {path}")


@dataclass
class RunConfig:
    """Everything one command needs, with relative paths already resolved against the run directory."""

    variant: str = "viref"
    seed: int = 0
    out: Path = Path(".")
    world: WorldConfig = field(default_factory=WorldConfig)
    model: dict = field(default_factory=lambda: dict(DESK_MODEL))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**DESK_TRAIN))
    beam: int = 3
    max_len: int = 25
    split: str = "test"
    variants: list[str] = field(default_factory=list)
    manifest: Path = Path("data/manifest.jsonl")
    feature_dir: Path | None = None
    vocab: Path | None = None
    embeddings: Path | None = None
    checkpoint: str = "runs/{variant}/checkpoint.vrfc"
    report_dir: Path = Path("reports")

    def checkpoint_path(self, variant: str | None = None) -> Path:
        return self.out / self.checkpoint.format(variant=variant or self.variant)

    def run_dir(self, variant: str | None = None) -> Path:
        return self.checkpoint_path(variant).parent

    @property
    def data_dir(self) -> Path:
        return self.manifest.parent

    def vocab_path(self) -> Path:
        return self.vocab if self.vocab is not None else self.data_dir / "vocab.txt"

    def model_config(self, dim: int, vocab_size: int) -> VirefConfig:
        kw = dict(self.model)
        kw.update(dim=dim, vocab_size=vocab_size)
        return VirefConfig.from_dict(kw)

    def validate(self) -> "RunConfig":
        for tag in [self.variant, *self.variants]:
            if tag not in VARIANTS:
                raise UnsupportedVariantError(f"unknown variant {tag!r}; expected one of {VARIANTS}")
        if self.beam < 1:
            raise ConfigError("beam must be >= 1")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.world.validate()
        self.train.validate()
        # dim and vocab_size come from the data; placeholders are enough to check the rest
        self.model_config(dim=1, vocab_size=8).validate()
        try:
            self.checkpoint.format(variant="x")
        except (KeyError, IndexError, ValueError) as exc:
            raise ConfigError(f"bad checkpoint template {self.checkpoint!r}: {exc}") from exc
        return self


_SECTIONS = {"run", "paths", "world", "model", "train"}
_RUN_KEYS = {"variant", "seed", "beam", "max_len", "split", "variants"}
_PATH_KEYS = {"manifest", "feature_dir", "vocab", "embeddings", "checkpoint", "report_dir"}


def _read_config_file(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise CliError("unreadable_config", EXIT_CONFIG, f"config file not found: {path}") from exc
    except (OSError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise CliError("unreadable_config", EXIT_CONFIG, f"cannot read config {path}: {exc}") from exc


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional TOML file plus overrides (``None`` values are ignored).

    Relative paths are resolved against ``out`` (the run directory). The run
    seed is the only seed: the world, model and trainer all derive theirs from it.
    """
    raw = _read_config_file(Path(path)) if path is not None else {}
    unknown = set(raw) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    run = dict(raw.get("run", {}))
    paths = dict(raw.get("paths", {}))
    for name, section, keys in (("run", run, _RUN_KEYS), ("paths", paths, _PATH_KEYS)):
        bad = set(section) - keys
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
    for name in ("world", "train"):
        if "seed" in raw.get(name, {}):
            raise ConfigError(f"set the seed once under [run], not in [{name}]")

    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    out = Path(overrides.pop("out", "."))
    ckpt_override = overrides.pop("checkpoint", None)
    run.update(overrides)

    seed = int(run.get("seed", 0))
    model = dict(DESK_MODEL)
    model.update(raw.get("model", {}))
    for key in ("dim", "vocab_size"):
        if key in model:
            raise ConfigError(f"[model] {key} is taken from the data and cannot be set")
    train_kw = dict(DESK_TRAIN)
    train_kw.update(raw.get("train", {}))
    train_kw["seed"] = seed
    world_kw = dict(raw.get("world", {}))
    world_kw["seed"] = seed
    if "max_len" in run:
        train_kw["max_len"] = int(run["max_len"])

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else out / p

    cfg = RunConfig(
        variant=run.get("variant", "viref"),
        seed=seed,
        out=out,
        world=WorldConfig.from_dict(world_kw),
        model=model,
        train=TrainConfig.from_dict(train_kw),
        beam=int(run.get("beam", 3)),
        max_len=int(run.get("max_len", train_kw.get("max_len", 25))),
        split=run.get("split", "test"),
        variants=list(run.get("variants", [])),
        manifest=resolve(paths.get("manifest", "data/manifest.jsonl")),
        feature_dir=resolve(paths["feature_dir"]) if "feature_dir" in paths else None,
        vocab=resolve(paths["vocab"]) if "vocab" in paths else None,
        embeddings=resolve(paths["embeddings"]) if paths.get("embeddings") else None,
        checkpoint=str(paths.get("checkpoint", "runs/{variant}/checkpoint.vrfc")),
        report_dir=resolve(paths.get("report_dir", "reports")),
    )
    if ckpt_override is not None:
        # a flag path is relative to the working directory, like --out itself
        cfg.checkpoint = str(Path(ckpt_override).resolve())
    return cfg.validate()


# ---------------------------------------------------------------------------
# helpers shared by the commands


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise _missing(path, what)
    return path


def _load_dataset(cfg: RunConfig) -> Dataset:
    _require(cfg.manifest, "manifest")
    _require(cfg.vocab_path(), "vocabulary")
    if cfg.feature_dir is not None:
        _require(cfg.feature_dir, "feature directory")
    return Dataset.load(cfg.manifest, vocab_path=cfg.vocab_path(), feature_root=cfg.feature_dir)


def _feature_dim(dataset: Dataset) -> int:
    first = dataset.records[0].pair_id
    return dataset.features[first].data.shape[-1]


def _new_model(cfg: RunConfig, dataset: Dataset, variant: str) -> RefExpModel:
    mcfg = cfg.model_config(_feature_dim(dataset), len(dataset.vocab))
    embeddings = None
    if cfg.embeddings is not None:
        _require(cfg.embeddings, "embedding file")
        embeddings = load_embeddings(cfg.embeddings, dataset.vocab, mcfg.embed_dim, cfg.seed)
    return build_model(variant, mcfg, dataset.vocab, cfg.seed, embeddings=embeddings)


def _load_model(cfg: RunConfig, dataset: Dataset, variant: str) -> RefExpModel:
    path = _require(cfg.checkpoint_path(variant), f"{variant} checkpoint")
    mcfg = cfg.model_config(_feature_dim(dataset), len(dataset.vocab))
    return RefExpModel(variant, mcfg, cfg.seed, store=ParameterStore.load(path))


def _pair_index(dataset: Dataset, pair_ids) -> list[int]:
    if not pair_ids:
        return []
    missing = [p for p in pair_ids if p not in dataset.by_id]
    if missing:
        raise CliError("unknown_pair", EXIT_BAD_DATA, f"pairs not in the manifest: {missing}")
    return [dataset.by_id[p] for p in pair_ids]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args) -> int:
    corpus = generate_synthetic_dataset(cfg.world, out_dir=cfg.data_dir)
    print(json.dumps({"records": len(corpus.records), "vocab": len(corpus.vocab), "out": str(cfg.data_dir)}))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    dataset = _load_dataset(cfg)
    model = _new_model(cfg, dataset, cfg.variant)
    result = train(model, dataset, cfg.train)
    ckpt = cfg.checkpoint_path()
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    ckpt.write_bytes(result.checkpoint)
    write_loss_history(result, ckpt.parent)
    summary = {"variant": cfg.variant, "best_epoch": result.best_epoch, "best_val": round(result.best_val, 6), "steps": result.steps}
    print(json.dumps({**summary, "checkpoint": str(ckpt)}))
    return EXIT_OK


def cmd_generate(cfg: RunConfig, args) -> int:
    dataset = _load_dataset(cfg)
    model = _load_model(cfg, dataset, cfg.variant)
    rows = _pair_index(dataset, args.pairs) or dataset.split(cfg.split)
    vocab = dataset.vocab
    lines = ["pair_id\tlog_prob\tfinished\trefexp"]
    for i in rows:
        out = generate(model, pair_features(dataset, i), cfg.beam, cfg.max_len, vocab.start_id, vocab.end_id)
        words = [vocab.token(t) for t in out.ids[1:] if t not in (vocab.end_id, vocab.nil_id)]
        lines.append(f"{dataset.records[i].pair_id}\t{out.log_prob:.6f}\t{int(out.finished)}\t{' '.join(words)}")
    path = cfg.report_dir / cfg.variant / "generated.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(json.dumps({"variant": cfg.variant, "generated": len(rows), "out": str(path)}))
    return EXIT_OK


def _read_queries(path: Path) -> list[tuple[str, str, str | None]]:
    """Lines of ``video_id<TAB>expression[<TAB>ground-truth pair_id]``; blank and # lines are skipped."""
    queries = []
    for n, line in enumerate(_require(path, "query file").read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise CliError("bad_query", EXIT_BAD_DATA, f"{path}:{n}: expected 2 or 3 tab-separated fields")
        queries.append((parts[0], parts[1], parts[2] if len(parts) == 3 else None))
    return queries


def cmd_comprehend(cfg: RunConfig, args) -> int:
    dataset = _load_dataset(cfg)
    model = _load_model(cfg, dataset, cfg.variant)
    videos = dataset.videos()
    if args.queries is not None:
        queries = _read_queries(Path(args.queries))
    else:
        queries = [(dataset.records[i].video_id, text, dataset.records[i].pair_id) for i in dataset.split(cfg.split) for text in dataset.records[i].refexps]
    out_lines = []
    for video, text, truth in queries:
        if video not in videos:
            raise CliError("unknown_video", EXIT_BAD_DATA, f"video not in the manifest: {video}")
        cands = [(dataset.records[j].pair_id, pair_features(dataset, j)) for j in videos[video]]
        res = comprehend(model, encode_refexp(text, dataset.vocab), cands, truth, text)
        out_lines.append(json.dumps({"video_id": video, **asdict(res)}))
    path = cfg.report_dir / cfg.variant / "retrievals.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in out_lines), encoding="utf-8")
    print(json.dumps({"variant": cfg.variant, "queries": len(out_lines), "out": str(path)}))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    variants = [args.variant] if args.variant else (cfg.variants or [cfg.variant])
    for tag in variants:
        _require(cfg.checkpoint_path(tag), f"{tag} checkpoint")
    dataset = _load_dataset(cfg)
    gen, ret, timing = {}, {}, {}
    for tag in variants:
        model = _load_model(cfg, dataset, tag)
        res = evaluate(model, dataset, cfg.split, cfg.beam, cfg.max_len)
        name = DISPLAY_NAMES[tag]
        gen[name], ret[name] = res.generation, res.retrieval
        timing[name] = (res.n_parameters, res.generation_seconds, res.comprehension_seconds)
        vdir = cfg.report_dir / tag
        vdir.mkdir(parents=True, exist_ok=True)
        (vdir / "generated.tsv").write_text(
            "pair_id\trefexp\n" + "".join(f"{pid}\t{text}\n" for pid, text in sorted(res.generated.items())), encoding="utf-8"
        )
        (vdir / "retrievals.jsonl").write_text("".join(json.dumps(asdict(r)) + "\n" for r in res.retrievals), encoding="utf-8")
    cfg.report_dir.mkdir(parents=True, exist_ok=True)
    write_generation_table(cfg.report_dir / "generation.tsv", gen)
    write_retrieval_table(cfg.report_dir / "retrieval.tsv", ret)
    write_timing_table(cfg.report_dir / "timing.tsv", timing)
    summary = {n: {"bleu4": round(gen[n].average_bleu, 4), "map": round(ret[n].mean_ap, 4), "rank1": round(ret[n].accuracy[1], 4)} for n in gen}
    print(json.dumps({"reports": str(cfg.report_dir), **summary}))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .verify import TinySetup, gradcheck_variant

    variants = [args.variant] if args.variant else list(VARIANTS)
    setup = TinySetup(layers=args.layers, hidden=args.hidden, seed=cfg.seed)
    worst = 0.0
    for tag in variants:
        res = gradcheck_variant(tag, setup, epsilon=args.epsilon, max_per_param=args.sample)
        worst = max(worst, res.max_rel_error)
        print(json.dumps({"variant": tag, "max_rel_error": res.max_rel_error, "worst_param": res.worst_param, "checked": res.n_checked}))
    if worst >= GRADCHECK_TOL:
        raise CliError("gradcheck_failed", EXIT_GRADCHECK, f"max relative error {worst:.3e} >= {GRADCHECK_TOL:g}")
    return EXIT_OK


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "generate": cmd_generate,
    "comprehend": cmd_comprehend,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--checkpoint", help="checkpoint path (overrides the config template)")
    common.add_argument("--out", help="run directory; relative config paths resolve against it")
    common.add_argument("--beam", type=int)
    common.add_argument("--max-len", dest="max_len", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="viref", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    sub.add_parser("train", parents=[common], help="train one variant")
    p = sub.add_parser("generate", parents=[common], help="beam-search expressions for pairs")
    p.add_argument("--pairs", nargs="*", default=None, help="pair ids (default: every pair of the split)")
    p = sub.add_parser("comprehend", parents=[common], help="rank the pairs of a video for query expressions")
    p.add_argument("--queries", help="TSV of video_id, expression[, ground-truth pair_id]")
    sub.add_parser("evaluate", parents=[common], help="generation and comprehension reports on the test split")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every variant's loss")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--sample", type=int, default=None, help="check at most this many coordinates per tensor")
    p.add_argument("--epsilon", type=float, default=VERIFY_EPSILON, help="central-difference step")
    return parser


def _emit_error(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": message}), file=sys.stderr)
    return code


def run_command(argv=None) -> int:
    """Run one command and return its exit code; errors become one JSON line on stderr."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv or argv[0] not in COMMANDS:
            got = argv[0] if argv else ""
            raise CliError("unknown_command", EXIT_USAGE, f"unknown command {got!r}; expected one of {COMMANDS}")
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        overrides = {"seed": args.seed, "variant": args.variant, "out": args.out, "beam": args.beam, "max_len": args.max_len, "checkpoint": args.checkpoint}
        try:
            cfg = load_run_config(args.config, overrides)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, CliError):
                raise
            raise ConfigError(str(exc)) from exc
        return _HANDLERS[args.command](cfg, args)
    except CliError as exc:
        return _emit_error(exc.kind, exc.code, str(exc))
    except (ConfigError, UnsupportedVariantError) as exc:
        return _emit_error("invalid_config", EXIT_CONFIG, str(exc))
    except FileNotFoundError as exc:
        return _emit_error("missing_file", EXIT_MISSING, str(exc))
    except (FeatureFileError, CheckpointError, EmbeddingParseError, FeatureKindError, ShapeError, DegenerateBatchError) as exc:
        return _emit_error("bad_data", EXIT_BAD_DATA, f"{type(exc).__name__}: {exc}")
    except TrainingDivergedError as exc:
        return _emit_error("training_diverged", EXIT_DIVERGED, str(exc))
    except ValueError as exc:
        return _emit_error("bad_data", EXIT_BAD_DATA, f"{type(exc).__name__}: {exc}")


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
