import json

import pytest

from specexit.cli import main
from specexit.pipeline import (DEFAULT_CONFIG, Pipeline, context_similarity, corpus_prompts,
                               load_config)
from specexit.scheduler import ScheduleConfig

TINY = {
    "corpus": "data/fixture_corpus.txt",
    "target": {"model": {"num_layers": 4, "seed": 11},
               "train": {"epochs": 1, "seed": 101}},
    "draft": {"model": {"num_layers": 2, "seed": 22},
              "train": {"epochs": 1, "seed": 202}},
    "predictors": {"collect": {"num_prompts": 3, "prompt_len": 8, "max_new": 6, "seed": 303},
                   "train": {"epochs": 10, "lr": 1.0, "seed": 404}},
    "schedule": {"offline_top_k": 2},
    "profile": {"num_prompts": 2, "prompt_len": 8, "max_new": 6, "seed": 505},
    "bench": {"num_prompts": 2, "prompt_len": 8, "max_new": 6, "seed": 606,
              "mode": "two-level"},
}


def _tiny_config(tmp_path, **extra):
    cfg = load_config()
    from specexit.pipeline import _deep_update

    _deep_update(cfg, TINY)
    _deep_update(cfg, extra)
    cfg["out_dir"] = str(tmp_path / "run")
    return cfg


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    cfg = _tiny_config(tmp_path_factory.mktemp("pipe"))
    pipe = Pipeline(cfg)
    report = pipe.run_all()
    return pipe, report


def test_pipeline_artifacts(tiny_run):
    pipe, report = tiny_run
    for name in ("target.spxw", "draft.spxw", "predictors.spxp", "profile.spxs",
                 "report.json", "report.txt", "trace.jsonl", "timing.json",
                 "similarity.json", "manifest.json"):
        assert (pipe.out / name).exists(), name
    assert report.num_tokens == 2 * 6


def test_pipeline_idempotent_skip(tiny_run):
    pipe, _ = tiny_run
    mtime = (pipe.out / "target.spxw").stat().st_mtime_ns
    pipe2 = Pipeline(pipe.cfg)
    pipe2.train_model("target")
    assert (pipe.out / "target.spxw").stat().st_mtime_ns == mtime  # skipped


def test_pipeline_stage_ordering(tmp_path):
    pipe = Pipeline(_tiny_config(tmp_path))
    with pytest.raises(FileNotFoundError):
        pipe.train_predictors()
    with pytest.raises(FileNotFoundError):
        pipe.bench()


def test_load_config_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"target": {"train": {"epochs": 3}}}))
    cfg = load_config(path, seed=99, out_dir=tmp_path / "o")
    assert cfg["target"]["train"]["epochs"] == 3
    assert cfg["bench"]["seed"] != DEFAULT_CONFIG["bench"]["seed"]
    assert cfg["out_dir"] == str(tmp_path / "o")
    # same --seed, same derived stage seeds
    assert load_config(None, seed=99)["profile"]["seed"] == \
        load_config(None, seed=99)["profile"]["seed"]


def test_corpus_prompts_deterministic(corpus):
    a = corpus_prompts(corpus, 4, 8, 7)
    b = corpus_prompts(corpus, 4, 8, 7)
    assert a == b
    assert all(len(p) == 8 for p in a)
    with pytest.raises(ValueError):
        corpus_prompts(b"ab", 1, 8, 0)


def test_context_similarity_repetitive_stream():
    """A stream that always exits at the same layer is maximally
    predictable: hit rate 1, base rate < 1."""
    sim = context_similarity([3] * 50, 8, ScheduleConfig(queue_len=5, radius=1))
    assert sim["hit_rate"] == 1.0
    assert sim["base_rate"] < 1.0
    assert sim["ratio"] > 1.0


def test_cli_inspect_and_errors(tiny_run, capsys):
    pipe, _ = tiny_run
    assert main(["inspect", str(pipe.out / "target.spxw")]) == 0
    assert "layers 4" in capsys.readouterr().out
    assert main(["inspect", str(pipe.out / "predictors.spxp")]) == 0
    assert main(["inspect", str(pipe.out / "profile.spxs")]) == 0
    assert main(["inspect", str(pipe.out / "report.json")]) == 0
    assert main(["inspect", str(pipe.out / "nope.spxw")]) != 0
    err = capsys.readouterr().err
    assert err.strip() != ""


def test_cli_generate_and_oracle(tiny_run, capsys):
    pipe, _ = tiny_run
    out = str(pipe.out)
    assert main(["generate", "--out", out, "--prompt", "The ", "--max-new", "5",
                 "--mode", "two-level"]) == 0
    assert main(["generate", "--out", out, "--prompt", "The ", "--max-new", "5",
                 "--mode", "all", "--policy", "never"]) == 0
    assert main(["oracle", "--out", out, "--prompt", "The ", "--max-new", "5"]) == 0
    assert main(["tree-generate", "--out", out, "--prompt", "The ", "--max-new", "6",
                 "--branching", "2,2"]) == 0
    capsys.readouterr()


def test_cli_bench_kernels(capsys):
    assert main(["bench-kernels", "--size", "16", "--repeat", "1"]) == 0
    out = capsys.readouterr().out
    assert "py" in out


def test_cli_missing_artifacts(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path), "--prompt", "x"]) != 0
    capsys.readouterr()
