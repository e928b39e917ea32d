"""The nine acceptance criteria, each at its pinned tolerance and time budget."""

import math
import time

import numpy as np
from test_data import FIXTURE_TEST, FIXTURE_TRAIN, write_fixture
from test_graph import check_invariants, simple_paths
from test_model import _oracle_scores

from trasa import data as D
from trasa import tensor as T
from trasa.gradcheck import GradcheckReport, MODEL_VARIANTS, run_gradcheck
from trasa.graph import EdgeType, build_graph, shortest_paths
from trasa.metrics import EvalReport
from trasa.model import (
    NO_RELATIONS, TrasaHyperparams, TrasaModel, _sub, loss, parameter_shapes, relation_scores,
    score_and_predict, score_items, session_readout,
)
from trasa.tensor import Tensor
from trasa.train import TrainConfig, evaluate, train

GRAD_TOL = 1e-4
FORMULA_TOL = 1e-6


def test_c1_gradient_integrity(verdict):
    start = time.perf_counter()
    report: GradcheckReport = run_gradcheck(seed=0)
    seconds = time.perf_counter() - start
    covered = {name.split(".")[0] for errs in report.models.values() for name in errs}
    ok = report.max_error < GRAD_TOL and seconds < 300 and set(report.models) == set(MODEL_VARIANTS)
    ok &= covered >= {"item_table", "position_table", "edge_type_table", "relation", "gru_fwd", "gru_bwd",
                      "layers", "readout", "readout_san"}
    assert verdict("C1 gradient integrity", ok,
                   f"max rel error {report.max_error:.2e} over {len(report.models)} variants (< {GRAD_TOL}), {seconds:.0f}s")


def test_c2_graph_path_oracle(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches = pairs = 0
    for _ in range(200):
        session = rng.integers(0, int(rng.integers(1, 9)), size=int(rng.integers(1, 11))).tolist()
        g = build_graph(session)
        check_invariants(g)
        for (i, j), p in shortest_paths(g).items():
            pairs += 1
            if i == j:
                mismatches += list(p.edge_types) != [EdgeType.SELF]
                continue
            every = simple_paths(g, i, j)
            length = min(len(q) - 1 for q in every)
            best = min(q for q in every if len(q) - 1 == length)
            types = [g.edges[e] for e in zip(best, best[1:])]
            mismatches += p.length != length or list(p.edge_types) != types
    seconds = time.perf_counter() - start
    ok = mismatches == 0 and seconds < 60
    assert verdict("C2 graph/path oracle", ok, f"{mismatches} mismatches over {pairs} pairs, {seconds:.1f}s")


def test_c3_formula_fixtures(verdict):
    errs = {}
    with T.precision(np.float64):
        hp = TrasaHyperparams(vocab_size=3, d=4, num_heads=2, max_positions=4, dropout=0.0, init_std=0.4)
        model = TrasaModel(hp, seed=3)
        s = model.structure([0, 1])
        rel = model._relation_contexts([s], False)[0]
        H = Tensor(model.params["item_table"].data[list(s.items)], dtype=np.float64)
        layer = _sub(model.params, "layers.0")
        got = relation_scores(H, rel, layer, 2).data
        want = _oracle_scores(model, [0, 1])
        errs["attention"] = max(np.abs(got[:, h].reshape(2, 2) - want[h]).max() for h in range(2))

        # readout, l = 2
        p = model.params
        Hg = Tensor(np.array([[0.2, -0.1, 0.4, 0.3], [-0.5, 0.1, 0.0, 0.6]]), dtype=np.float64)
        Hs = Hg.data + p["position_table"].data[[1, 0]]
        W4, W5, b3, q = (p[f"readout.{k}"].data for k in ("W_4", "W_5", "b_3", "q"))
        eps = [sum(q[k] * (sum(Hs[i][j] * W4[j][k] for j in range(4)) + sum(Hs[1][j] * W5[j][k] for j in range(4)) + b3[k])
                   for k in range(4)) for i in range(2)]
        g0 = 1.0 / (1.0 + math.exp(eps[1] - eps[0]))
        s_h = session_readout(Hg, s, p, hp).data
        errs["readout"] = np.abs(s_h - (g0 * Hs[0] + (1 - g0) * Hs[1])).max()

        # scoring and prediction, n = 3
        table = Tensor(np.array([[3.0, 4.0], [1.0, 0.0], [0.0, 2.0]]), dtype=np.float64)
        sv = Tensor(np.array([1.0, 1.0]), dtype=np.float64)
        z = [1.4, 1.0, 1.0]
        denom = sum(math.exp(v) for v in z)
        errs["scores"] = np.abs(score_items(sv, table).data - z).max()
        y = score_and_predict(sv, table).data
        errs["probs"] = np.abs(y - [math.exp(v) / denom for v in z]).max()

        # loss
        hand = -math.log(y[0]) - math.log(1 - y[1]) - math.log(1 - y[2])
        errs["loss"] = abs(loss(Tensor(y, dtype=np.float64), 0).item() - hand)
        errs["loss_uniform2"] = abs(loss(Tensor(np.array([0.5, 0.5]), dtype=np.float64), 0).item() - 2 * math.log(2))

        # zero relations reduce to the plain scaled dot product
        zero = model._relation_contexts([s], zero_relations=True)[0]
        exact = np.array_equal(relation_scores(H, zero, layer, 2).data, relation_scores(H, NO_RELATIONS, layer, 2).data)
    worst = max(errs.values())
    ok = worst < FORMULA_TOL and exact
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; zero-relation reduction exact={exact}"
    assert verdict("C3 formula fixtures", ok, detail)


def test_c4_overfit(verdict):
    sessions = D.synthesize_markov(20, 50, min_len=3, max_len=6, concentration=0.005, seed=0)
    inst = [i for s in sessions for i in D.augment(s)]
    cfg = TrainConfig(d=32, num_heads=2, batch_size=32, max_epochs=200, lr_decay_every_epochs=1000,
                      dropout=0.0, weight_decay=0.0)
    history = []

    def stop(epoch, model, record):
        history.append(evaluate(model, inst, (1,)).precision[1])
        return history[-1] >= 0.95

    start = time.perf_counter()
    train(inst, cfg, 20, on_epoch=stop)
    seconds = time.perf_counter() - start
    ok = history[-1] >= 0.95 and len(history) <= 200 and seconds < 120
    assert verdict("C4 overfit", ok, f"train P@1 {history[-1]:.3f} after {len(history)} epochs on {len(inst)} instances, {seconds:.1f}s")


def test_c5_long_range_separation(verdict):
    train_inst = D.final_item_instances(D.synthesize_long_range(30, 2000, gap=5, min_len=6, max_len=10, seed=1))
    test_inst = D.final_item_instances(D.synthesize_long_range(30, 500, gap=5, min_len=6, max_len=10, seed=2))
    base = dict(d=32, num_heads=2, batch_size=64, max_epochs=8, lr_decay_every_epochs=10, dropout=0.1, seed=0)
    start = time.perf_counter()
    p1 = {}
    for ablation in ("FULL", "WO_SAN"):
        res = train(train_inst, TrainConfig(**base, ablation=ablation), 30)
        p1[ablation] = evaluate(res.model, test_inst, (1,)).precision[1]
    seconds = time.perf_counter() - start
    gap = 100 * (p1["FULL"] - p1["WO_SAN"])
    ok = gap >= 10 and seconds < 600
    assert verdict("C5 long-range separation", ok,
                   f"P@1 FULL {p1['FULL']:.3f} vs WO_SAN {p1['WO_SAN']:.3f} (+{gap:.1f} pts), {seconds:.0f}s")


def test_c6_metrics_oracle(verdict):
    rep = EvalReport.from_ranks([1, 4, 21, 2], ks=(20,))
    ok = rep.precision[20] == 0.75 and rep.mrr[20] == 0.4375
    assert verdict("C6 metrics oracle", ok, f"P@20={rep.precision[20]!r} MRR@20={rep.mrr[20]!r}")


def test_c7_preprocessing_protocol(verdict, tmp_path):
    sessions = D.filter_sessions(D.ingest(write_fixture(tmp_path / "events.csv")), 5)
    ds = D.split(sessions, test_fraction=0.2, valid_fraction=0.0, seed=0)
    D.save_dataset(ds, tmp_path / "out")
    stored = D.load_dataset(tmp_path / "out")
    ok = (
        ds.train == FIXTURE_TRAIN and ds.test == FIXTURE_TEST and ds.dropped_oov == 6
        and stored.train == FIXTURE_TRAIN and stored.test == FIXTURE_TEST
        and D.recount_stats(tmp_path / "out") == stored.stats == ds.stats
    )
    assert verdict("C7 preprocessing protocol", ok,
                   f"{len(ds.train)} train / {len(ds.test)} test instances, {ds.dropped_oov} OOV dropped, stats {stored.stats}")


def test_c8_determinism_and_persistence(verdict, tmp_path):
    raw = D.synthesize_markov(15, 60, 2, 6, concentration=0.2, seed=3)
    inst = [i for s in raw for i in D.augment(s)]
    cfg = TrainConfig(d=16, num_heads=2, batch_size=32, max_epochs=3, dropout=0.2, seed=11)
    a = train(inst, cfg, 15, inst[:40])
    b = train(inst, cfg, 15, inst[:40])
    same_logs = [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    before = evaluate(a.model, inst, (1, 5, 20))
    a.model.save(tmp_path / "m.ckpt")
    after = evaluate(tmp_path / "m.ckpt", inst, (1, 5, 20))
    same_metrics = before.precision == after.precision and before.mrr == after.mrr
    ok = same_logs and same_metrics
    assert verdict("C8 determinism & persistence", ok,
                   f"identical loss logs={same_logs}, bitwise-identical metrics after reload={same_metrics}")


def test_c9_ablation_structure(verdict, tmp_path):
    raw = D.synthesize_markov(10, 20, 2, 5, seed=0)
    inst = [i for s in raw for i in D.augment(s)]
    full = set(parameter_shapes(TrainConfig(d=8, num_heads=2).hyperparams(10)))
    relation = {n for n in full if n.split(".")[0] in ("edge_type_table", "relation", "gru_fwd", "gru_bwd")}
    layers = {n for n in full if n.startswith("layers.")}
    expected = {
        "WO_POS": full - {"position_table"},
        "WO_REL_POS": full - {"position_table"} - relation,
        "WO_SAN": full - layers - relation,
    }
    found = {}
    for ablation in expected:
        res = train(inst, TrainConfig(d=8, num_heads=2, max_epochs=1, batch_size=32, ablation=ablation), 10)
        res.model.save(tmp_path / f"{ablation}.ckpt")
        found[ablation] = set(TrasaModel.load(tmp_path / f"{ablation}.ckpt")[0].params)
    ok = all(found[k] == v for k, v in expected.items()) and bool(relation) and bool(layers)
    detail = ", ".join(f"{k}: {len(full - found[k])} removed" for k in expected)
    assert verdict("C9 ablation structure", ok, detail)
