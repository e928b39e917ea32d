import json

import numpy as np
import pytest

from trasa import data as D
from trasa.metrics import EvalReport, mrr_at, precision_at, target_ranks
from trasa.model import ConfigError
from trasa.train import (
    SuiteError, TrainConfig, TrainingDivergedError, evaluate, format_suite, learning_rate_at,
    run_ablation_suite, train,
)

TINY = dict(d=8, num_heads=2, batch_size=16, max_epochs=2, max_positions=10)


def corpus(seed=0, n=12, sessions=40):
    raw = D.synthesize_markov(n, sessions, 2, 6, concentration=0.2, seed=seed)
    return [i for s in raw for i in D.augment(s)]


def test_default_learning_rate_schedule():
    cfg = TrainConfig()
    got = [learning_rate_at(cfg, e) for e in range(9)]
    assert np.allclose(got, [0.01] * 3 + [0.001] * 3 + [0.0001] * 3, rtol=1e-12)


def test_rank_fixture():
    ranks = np.array([1, 4, 21, 2])
    rep = EvalReport.from_ranks(ranks, ks=(1, 20))
    assert rep.precision[20] == 0.75 and rep.mrr[20] == 0.4375
    assert rep["P@1"] == rep["MRR@1"] == 0.25
    assert EvalReport.parse(rep.to_text())["MRR@20"] == 0.4375


def test_target_ranks_and_ties():
    scores = np.array([[0.1, 0.9, 0.5], [1.0, 1.0, 1.0]])
    assert target_ranks(scores, [2, 2]).tolist() == [2, 3]
    assert precision_at([1, 1], 5) == mrr_at([1, 1], 5) == 1.0
    assert precision_at([], 5) == 0.0


def test_config_from_mapping():
    cfg = TrainConfig.from_mapping({"learning-rate": "0.5", "d": "16", "ablation": "WO_POS"})
    assert cfg.learning_rate == 0.5 and cfg.d == 16 and cfg.ablation == "WO_POS"
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"bogus": "1"})
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_training_is_deterministic(tmp_path):
    inst = corpus()
    cfg = TrainConfig(**TINY, seed=5, dropout=0.3)
    a = train(inst, cfg, 12, inst[:20], log_path=tmp_path / "a.jsonl")
    b = train(inst, cfg, 12, inst[:20])
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    assert a.log == b.log
    lines = [json.loads(x) for x in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert lines == a.log and set(lines[0]) == {"epoch", "lr", "loss", "val_P@20", "val_MRR@20"}
    c = train(inst, TrainConfig(**TINY, seed=6, dropout=0.3), 12)
    assert [r["loss"] for r in c.log] != [r["loss"] for r in a.log]


def test_checkpoint_round_trip_gives_identical_metrics(tmp_path):
    inst = corpus(seed=1)
    res = train(inst, TrainConfig(**TINY), 12)
    before = evaluate(res.model, inst, ks=(1, 5, 20))
    res.model.save(tmp_path / "m.ckpt")
    after = evaluate(tmp_path / "m.ckpt", inst, ks=(1, 5, 20))
    assert before.precision == after.precision and before.mrr == after.mrr


def test_early_stopping_restores_best_epoch():
    inst = corpus(seed=2)
    cfg = TrainConfig(**{**TINY, "max_epochs": 12}, early_stop_patience=1, learning_rate=0.05)
    res = train(inst, cfg, 12, inst[:30])
    vals = [r["val_P@20"] for r in res.log]
    assert res.best_valid == max(vals) and vals[res.best_epoch] == max(vals)
    assert len(res.log) <= 12
    assert evaluate(res.model, inst[:30], ks=(20,)).precision[20] == res.best_valid


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch_and_batch():
    inst = corpus()
    with pytest.raises(TrainingDivergedError, match="epoch 0, batch 0"):
        train(inst, TrainConfig(**TINY, init_std=1e20), 12)


def test_evaluate_rejects_foreign_labels():
    res = train(corpus(), TrainConfig(**{**TINY, "max_epochs": 1}), 12)
    with pytest.raises(ConfigError):
        evaluate(res.model, [((0,), 40)])


def test_ablation_suite_runs_every_variant(tmp_path):
    inst = corpus(seed=3)
    cfg = TrainConfig(**{**TINY, "max_epochs": 1})
    results = run_ablation_suite(inst, inst[:20], cfg, 12, checkpoint_dir=tmp_path)
    assert set(results) == {"FULL", "WO_POS", "WO_REL_POS", "WO_SAN", "READOUT_SAN", "READOUT_SUM", "READOUT_GRAPH"}
    assert results["WO_POS"]["removed"] == ["position_table"]
    assert "layers.0.W_q" in results["WO_SAN"]["removed"]
    assert all(name.startswith("readout_san.") for name in results["READOUT_SAN"]["added"])
    assert (tmp_path / "WO_SAN.ckpt").exists()
    table = format_suite(results)
    assert table.splitlines()[0].split()[:3] == ["variant", "P@1", "P@20"]
    with pytest.raises(SuiteError, match="FULL"):
        run_ablation_suite(inst, [((0,), 99)], cfg, 12)
