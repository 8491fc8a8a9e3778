import json
import math
import random

import pytest

import decodekit as dk


def ngram_spec(order=3, smoothing=0.05):
    rng = random.Random(99)
    corpus = [[rng.randrange(11) for _ in range(40)] + [11] for _ in range(6)]
    return {"type": "ngram", "vocab_size": 12, "eod": 11, "order": order, "smoothing": smoothing, "corpus": corpus}


@pytest.fixture(scope="module")
def model():
    return dk.load_model(ngram_spec())


def test_version_and_exceptions():
    assert dk.__version__ == "0.1.0"
    assert issubclass(dk.InputError, dk.Error)
    assert issubclass(dk.TransportError, dk.Error)
    assert issubclass(dk.Error, RuntimeError)


def test_support_rules():
    dist = [0.5, 0.3, 0.2]
    assert dk.greedy_step(dist) == 0
    assert dk.topk_support(dist, 2) == [0, 1]
    assert dk.nucleus_support(dist, 0.75) == [0, 1]
    assert sorted(dk.typical_support(dist, 0.5)) == [0, 1]
    assert dk.cd_candidate_set([0.5, 0.3, 0.04], 0.1) == [0, 1]


def test_model_step_and_score(model):
    assert (model.vocab_size, model.eod, model.dim) == (12, 11, 12)
    dist, reps = model.step([1, 2, 3])
    assert len(dist) == 12 and math.isclose(sum(dist), 1.0, abs_tol=1e-12)
    assert len(reps) == 3 and all(len(r) == 12 for r in reps)
    lp = model.score([1], [2, 3])
    assert lp[0] == pytest.approx(math.log(model.step([1])[0][2]))


def test_contrastive_search_alpha_zero_is_greedy(model):
    rng = random.Random(3)
    for _ in range(50):
        ctx = [rng.randrange(12) for _ in range(rng.randint(1, 6))]
        assert dk.cs_step(model, ctx, k=5, alpha=0.0) == dk.greedy_step(model.step(ctx)[0])


def test_generate_is_deterministic(model):
    a = dk.generate(model, [1, 2, 3], "nucleus", max_length=30, seed=5, p=0.9)
    b = dk.generate(model, [1, 2, 3], "nucleus", max_length=30, seed=5, p=0.9)
    assert a == b
    assert a["stop_reason"] in ("eod", "max_length")
    assert len(a["continuation"]) <= 30
    amateur = dk.load_model(ngram_spec(order=1, smoothing=0.5))
    cd = dk.generate(model, [1, 2, 3], "contrastive-decoding", max_length=10, amateur=amateur)
    assert cd["spec"]["alpha"] == 0.1


def test_metrics():
    d = dk.diversity([7, 7, 7, 7])
    assert d["rep_2"] == pytest.approx(200 / 3)
    assert d["rep_3"] == pytest.approx(50.0)
    assert d["diversity"] == pytest.approx(1 / 6)
    assert dk.rep_n([1, 2], 3) is None
    s = dk.sign_test(10, 0)
    assert s["p_value"] == 0.001953125 and s["significant"]
    assert dk.sign_test(5, 5)["p_value"] == 1.0
    feats = [[float(i % 3), float(i % 5)] for i in range(30)]
    assert dk.frontier_score(feats, feats, num_bins=4) == pytest.approx(1.0, abs=1e-6)
    assert dk.frontier_from_histograms([1, 0], [0, 1], dk.interior_mixture_grid(25)) < 0.05


def test_errors_map_to_python_classes(model):
    with pytest.raises(dk.InputError):
        model.step([99])
    with pytest.raises(dk.InputError):
        dk.load_model({"type": "nope"})
    with pytest.raises(dk.UndefinedResultError):
        dk.sign_test(0, 0, 3)
    with pytest.raises(dk.TransportError):
        dk.load_model({"type": "remote", "endpoint": "127.0.0.1:1", "timeout_ms": 300})


def test_cli_and_benchmark(tmp_path, model):
    code, out, _ = dk.run_cli(["generate", "--help"])
    assert code == 0 and "--max-length" in out
    assert dk.run_cli(["generate", "--strategy", "beam", "--prompts", "x"])[0] == 1

    rng = random.Random(1)
    (tmp_path / "prompts.jsonl").write_text(
        "".join(json.dumps({"id": f"p{i}", "tokens": [rng.randrange(11) for _ in range(8)]}) + "\n" for i in range(4))
    )
    config = {
        "benchmark": {"prompt_file": "prompts.jsonl", "prompt_length": 8, "max_length": 16},
        "systems": [{"name": "cs", "strategy": "contrastive-search"}, {"name": "greedy", "strategy": "greedy"}],
        "model": ngram_spec(),
        "seed": 2,
    }
    (tmp_path / "run.json").write_text(json.dumps(config))
    report = dk.run_benchmark(tmp_path / "run.json")
    assert len(report["records"]) == 8
    assert [s["name"] for s in report["systems"]] == ["cs", "greedy"]
    assert report == dk.run_benchmark(tmp_path / "run.json")
