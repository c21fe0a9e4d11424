import json
import subprocess
import sys

import pytest

from viref.cli import (
    EXIT_CONFIG,
    EXIT_MISSING,
    EXIT_OK,
    EXIT_USAGE,
    load_run_config,
    run_command,
)
from viref.metrics import read_table

SMALL = """
[run]
variant = "viref"
variants = ["viref", "viref_a", "viref_e"]
beam = 2
max_len = 12

[world]
video_count = 5
min_frames = 2
max_frames = 4

[model]
enc_layers = 1
dec_layers = 1
hidden = 8
embed_dim = 6

[train]
max_epochs = 2
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


def files_under(path):
    return sorted(p.relative_to(path).as_posix() for p in path.rglob("*") if p.is_file())


def run_pipeline(config, out):
    assert run_command(["synth", "--config", str(config), "--out", str(out)]) == EXIT_OK
    for tag in ("viref", "viref_a", "viref_e"):
        assert run_command(["train", "--config", str(config), "--out", str(out), "--variant", tag]) == EXIT_OK
    assert run_command(["evaluate", "--config", str(config), "--out", str(out)]) == EXIT_OK


def test_unknown_command(capsys):
    assert run_command(["fly"]) == EXIT_USAGE
    assert error_line(capsys)["error"] == "unknown_command"
    assert run_command([]) == EXIT_USAGE


def test_bad_flag_is_a_usage_error(capsys):
    assert run_command(["train", "--no-such-flag"]) == EXIT_USAGE
    assert error_line(capsys)["code"] == EXIT_USAGE


def test_missing_config_file(tmp_path, capsys):
    assert run_command(["synth", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert error_line(capsys)["error"] == "unreadable_config"


def test_evaluate_without_checkpoint(tmp_path, small_config, capsys):
    assert run_command(["synth", "--config", str(small_config), "--out", str(tmp_path)]) == EXIT_OK
    before = files_under(tmp_path)
    assert run_command(["evaluate", "--config", str(small_config), "--out", str(tmp_path)]) == EXIT_MISSING
    err = error_line(capsys)
    assert err["error"] == "missing_file" and "checkpoint" in err["message"]
    assert files_under(tmp_path) == before


def test_train_without_data(tmp_path, capsys):
    assert run_command(["train", "--out", str(tmp_path)]) == EXIT_MISSING
    assert "manifest" in error_line(capsys)["message"]


@pytest.mark.parametrize(
    "text",
    [
        "[world]\ndim = 4\n",
        "[train]\nlr = -1.0\n",
        "[train]\nseed = 3\n",
        "[model]\nhidden = 0\n",
        "[model]\nvocab_size = 9\n",
        "[run]\nvariant = \"viref_z\"\n",
        "[run]\nbeam = 0\n",
        "[extras]\nx = 1\n",
        "[run]\ncolour = 1\n",
        "not toml = = =\n",
    ],
)
def test_bad_configs_write_nothing(tmp_path, text, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(text)
    out = tmp_path / "run"
    for cmd in ("synth", "train"):
        assert run_command([cmd, "--config", str(cfg), "--out", str(out)]) == EXIT_CONFIG
        assert error_line(capsys)["code"] == EXIT_CONFIG
    assert not out.exists()


def test_relative_paths_follow_out(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[paths]\nmanifest = "d/m.jsonl"\nreport_dir = "/abs/reports"\n')
    rc = load_run_config(cfg, {"out": str(tmp_path / "o"), "variant": "viref_a"})
    assert rc.manifest == tmp_path / "o" / "d" / "m.jsonl"
    assert str(rc.report_dir) == "/abs/reports"
    assert rc.checkpoint_path() == tmp_path / "o" / "runs" / "viref_a" / "checkpoint.vrfc"
    assert rc.world.seed == rc.train.seed == rc.seed == 0


def test_gradcheck_passes_on_tiny_config(capsys):
    assert run_command(["gradcheck", "--variant", "viref_e"]) == EXIT_OK
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert line["variant"] == "viref_e" and line["max_rel_error"] < 1e-5


def test_gradcheck_failure_exit_code(capsys):
    # a huge step makes central differences inaccurate, which must be reported
    assert run_command(["gradcheck", "--variant", "viref_e", "--epsilon", "0.5"]) == 7
    assert error_line(capsys)["error"] == "gradcheck_failed"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.toml"
    cfg.write_text(SMALL)
    outs = [root / "a", root / "b"]
    for out in outs:
        run_pipeline(cfg, out)
    return cfg, outs


def test_pipeline_emits_all_reports(pipeline):
    _, (out, _) = pipeline
    reports = out / "reports"
    gen = read_table(reports / "generation.tsv")
    ret = read_table(reports / "retrieval.tsv")
    tim = read_table(reports / "timing.tsv")
    for table in (gen, ret, tim):
        assert [row["Method"] for row in table] == ["VIREF", "VIREF-a", "VIREF-e"]
    for row in ret:
        r1, r2, r3 = (float(row[f"rank-{k} accuracy"]) for k in (1, 2, 3))
        assert r1 <= r2 <= r3 and float(row["mAP"]) >= r1
    for tag in ("viref", "viref_a", "viref_e"):
        assert (reports / tag / "generated.tsv").exists()
        assert (reports / tag / "retrievals.jsonl").exists()
        assert (out / "runs" / tag / "checkpoint.vrfc").read_bytes()[:4] == b"VRFC"
        assert (out / "runs" / tag / "val_loss.txt").read_text().count("\n") >= 1


def test_reports_are_byte_identical_across_runs(pipeline):
    _, (a, b) = pipeline
    names = [n for n in files_under(a) if n != "reports/timing.tsv"]
    assert names == [n for n in files_under(b) if n != "reports/timing.tsv"]
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    # the timing table differs only in its measured columns
    ta, tb = read_table(a / "reports" / "timing.tsv"), read_table(b / "reports" / "timing.tsv")
    assert [r["# of parameters"] for r in ta] == [r["# of parameters"] for r in tb]


def test_generate_and_comprehend_commands(pipeline, tmp_path, capsys):
    cfg, (out, _) = pipeline
    manifest = [json.loads(line) for line in (out / "data" / "manifest.jsonl").read_text().splitlines()]
    rec = manifest[0]
    code = run_command(["generate", "--config", str(cfg), "--out", str(out), "--variant", "viref_a", "--pairs", rec["pair_id"]])
    assert code == EXIT_OK
    lines = (out / "reports" / "viref_a" / "generated.tsv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith(rec["pair_id"] + "\t")

    queries = tmp_path / "q.tsv"
    queries.write_text(f"# video\texpression\ttruth\n{rec['video_id']}\t{rec['refexps'][0]}\t{rec['pair_id']}\n")
    assert run_command(["comprehend", "--config", str(cfg), "--out", str(out), "--queries", str(queries)]) == EXIT_OK
    (res,) = [json.loads(x) for x in (out / "reports" / "viref" / "retrievals.jsonl").read_text().splitlines()]
    video_pairs = [r["pair_id"] for r in manifest if r["video_id"] == rec["video_id"]]
    assert sorted(p for p, _ in res["ranking"]) == sorted(video_pairs)
    assert 1 <= res["rank"] <= len(video_pairs)
    capsys.readouterr()

    assert run_command(["generate", "--config", str(cfg), "--out", str(out), "--pairs", "nope"]) == 5
    assert error_line(capsys)["error"] == "unknown_pair"


def test_checkpoint_flag_overrides_template(pipeline, tmp_path, capsys):
    cfg, (out, _) = pipeline
    ckpt = out / "runs" / "viref_e" / "checkpoint.vrfc"
    code = run_command(["generate", "--config", str(cfg), "--out", str(tmp_path), "--variant", "viref_e", "--checkpoint", str(ckpt)])
    # the data lives under the pipeline dir, not tmp_path
    assert code == EXIT_MISSING
    assert "manifest" in error_line(capsys)["message"]


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "viref.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    assert json.loads(proc.stderr.strip())["error"] == "unknown_command"
