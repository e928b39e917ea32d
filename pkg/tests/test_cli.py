import numpy as np
import pytest

from trasa import data as D
from trasa.cli import main
from trasa.metrics import EvalReport


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    sessions = D.synthesize_markov(15, 120, 2, 6, concentration=0.3, seed=1)
    D.write_event_log(sessions, root / "events.csv")
    assert main(["preprocess", "--input", str(root / "events.csv"), "--out", str(root / "data"), "--min-support", "3"]) == 0
    (root / "train.cfg").write_text("# small model\nd = 8\nnum_heads = 2\nmax_epochs = 2\nbatch_size = 64\n")
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "m.ckpt"), "--config", str(root / "train.cfg"),
                 "--set", "max_epochs=1"]) == 0
    return root


def test_recommend_output_contract(workspace, capsys):
    vocab = D.read_vocab(workspace / "data" / "vocab.txt")
    session = ",".join(vocab[i] for i in (3, 7, 3, 9) if i < len(vocab))
    code, out, _ = run(capsys, "recommend", "--checkpoint", workspace / "m.ckpt", "--session", session, "--k", 5)
    assert code == 0
    lines = [line.split() for line in out.strip().splitlines()]
    assert len(lines) == 5
    assert all(item in vocab for item, _ in lines)
    scores = [float(s) for _, s in lines]
    assert scores == sorted(scores, reverse=True)


def test_eval_on_rank_fixture(tmp_path, capsys):
    # a hand-built checkpoint: with SUM readout, no layers and no positions,
    # item i scores <h_prefix, unit(h_i)>; orthogonal embeddings fix the ranks
    from trasa.model import TrasaHyperparams, TrasaModel

    n = 25
    hp = TrasaHyperparams(vocab_size=n, d=n + 1, num_heads=1, ablation="WO_SAN", readout="SUM", max_positions=4)
    model = TrasaModel(hp, seed=0)
    assert set(model.params) == {"item_table", "position_table"}
    model.params["position_table"].data[...] = 0
    model.params["item_table"].data[...] = np.eye(n, n + 1)
    # query item 0 carries a descending score profile over every item
    model.params["item_table"].data[0] = np.concatenate([[0.0], np.linspace(2.0, 1.0, n - 1), [0.0]])
    model.save(tmp_path / "fixture.ckpt")
    # from prefix (0,), item 0 scores its own norm (rank 1) and item i ranks i + 1
    D.write_instances([((0,), 0), ((0,), 3), ((0,), 20), ((0,), 1)], tmp_path / "inst.txt")
    code, out, _ = run(capsys, "eval", "--checkpoint", tmp_path / "fixture.ckpt", "--instances", tmp_path / "inst.txt", "--k", 20)
    assert code == 0
    parsed = EvalReport.parse(out)
    assert parsed["P@20"] == 0.75 and parsed["MRR@20"] == 0.4375
    assert "P@20=0.75" in out and "MRR@20=0.4375" in out


def test_gradcheck_quick(capsys):
    code, out, _ = run(capsys, "gradcheck", "--quick")
    assert code == 0
    assert "status=pass" in out
    worst = float(next(line for line in out.splitlines() if line.startswith("max_rel_error=")).split("=")[1])
    assert worst < 1e-4


def test_synthesize_instances(tmp_path, capsys):
    code, out, _ = run(capsys, "synthesize", "--kind", "long_range", "--out", tmp_path / "lr.txt",
                       "--format", "instances", "--n-items", 30, "--n-sessions", 7, "--min-len", 6)
    assert code == 0 and out.strip() == "sessions=7"
    inst = D.read_instances(tmp_path / "lr.txt")
    assert len(inst) == 7 and all(y == (p[-5] + 1) % 30 for p, y in inst)


def test_errors_exit_nonzero(workspace, tmp_path, capsys):
    assert run(capsys, "eval", "--checkpoint", tmp_path / "missing.ckpt", "--instances", tmp_path / "x")[0] != 0
    code, _, err = run(capsys, "recommend", "--checkpoint", workspace / "m.ckpt", "--session", "not-an-item")
    assert code != 0 and "not-an-item" in err
    code, _, err = run(capsys, "train", "--data", workspace / "data", "--out", tmp_path / "x.ckpt", "--set", "d")
    assert code != 0 and "key=value" in err
    assert run(capsys, "train", "--data", workspace / "data", "--out", tmp_path / "x.ckpt", "--set", "nope=1")[0] != 0
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code != 0
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--nope"])
    assert exc.value.code != 0
