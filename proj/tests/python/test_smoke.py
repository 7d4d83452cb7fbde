import math

import pytest

import ccpo


def small_config(**extra):
    settings = {
        "seed": 5,
        "iterations": 5,
        "batch_size": 4,
        "width": 8,
        "depth": 1,
        "synthetic.num_traces": 120,
        "calibration_size": 40,
        "test_size": 40,
    }
    settings.update(extra)
    return ccpo.Config(settings)


def test_config_keys_and_errors():
    assert "alpha" in ccpo.config_keys()
    with pytest.raises(ccpo.ValidationError):
        ccpo.Config({"alpha": 1.5})
    with pytest.raises(ValueError):
        ccpo.Config({"no_such_key": 1})
    cfg = small_config()
    cfg.set("alpha", 0.2)
    assert cfg.alpha == 0.2


def test_corpus_round_trip(tmp_path):
    cfg = small_config()
    corpus = ccpo.Corpus.generate(cfg)
    assert len(corpus) == 120
    assert corpus.horizon == 4
    path = tmp_path / "t.jsonl"
    corpus.save(path)
    back = ccpo.Corpus.load(path)
    assert back.to_jsonl() == corpus.to_jsonl()
    assert ccpo.Corpus.generate(cfg).to_jsonl() == corpus.to_jsonl()
    with pytest.raises(ccpo.ParseError):
        ccpo.Corpus.parse("{broken")


def test_train_evaluate_checkpoint(tmp_path):
    cfg = small_config()
    train, cal, test = ccpo.Corpus.from_config(cfg).split(cfg.calibration_size, cfg.test_size)
    assert (len(train), len(cal), len(test)) == (40, 40, 40)
    result = ccpo.train(cfg, train, cal)
    assert result.method == "ccpo"
    assert result.iteration == 5
    logs = ccpo.iteration_logs(result)
    assert [l["iteration"] for l in logs] == [1, 2, 3, 4, 5]
    assert 0.0 <= result.kappa <= 1.0
    assert result.calibration["n"] == 40

    m = ccpo.evaluate(result, cfg, test)
    assert m["n_episodes"] == 40
    assert 0.0 <= m["coverage"] <= 1.0
    assert m["cost_cents"] >= 0.0 and math.isfinite(m["cost_cents"])
    assert 1.0 <= m["avg_len"] <= 4.0

    path = tmp_path / "ck.json"
    ccpo.save_checkpoint(result, cfg, path)
    again = ccpo.load_checkpoint(path)
    assert again.kappa == result.kappa
    assert ccpo.evaluate(again, cfg, test) == m


def test_baselines_and_determinism():
    for method in ["random", "fixed-threshold", "cpo"]:
        cfg = small_config(method=method)
        train, cal, test = ccpo.Corpus.from_config(cfg).split(40, 40)
        a = ccpo.train(cfg, train, cal)
        b = ccpo.train(cfg, train, cal)
        assert a.log_lines == b.log_lines
        assert ccpo.evaluate(a, cfg, test) == ccpo.evaluate(b, cfg, test)
    cfg = small_config(method="cpo")
    train, cal, test = ccpo.Corpus.from_config(cfg).split(40, 40)
    r = ccpo.train(cfg, train, cal)
    for m in ["cpo", "cpo-batch", "cpo-online"]:
        assert ccpo.evaluate(r, cfg, test, m)["n_episodes"] == 40
    with pytest.raises(ccpo.UsageError):
        ccpo.evaluate(r, cfg, test, "ppo")
    fixed = ccpo.train(small_config(method="fixed-threshold"), train, cal)
    lo, hi = fixed.fixed_rule
    assert lo <= hi
