"""Central finite-difference checks of every backward rule, at 64-bit."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .model import TrasaHyperparams, TrasaModel, gru_cell
from .tensor import Tensor

FD_STEP = 1e-5
# Central-difference roundoff is about machine_eps * |loss| / step, so gradient
# entries smaller than DENOM_FLOOR * max(1, |loss|) are judged on absolute error.
DENOM_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOM_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, eps: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every element of ``arr`` (perturbed in place)."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return grad


def check(f: Callable[[], Tensor], params: dict[str, Tensor], eps: float = FD_STEP) -> dict[str, float]:
    """Max relative error per named tensor between backward and finite differences."""
    for p in params.values():
        p.grad = None
    out = f()
    floor = DENOM_FLOOR * max(1.0, abs(float(out.data)))
    out.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    def value() -> float:
        with T.no_grad():
            return float(f().data)

    return {k: float(relative_error(analytic[k], numeric_gradient(value, p.data, eps), floor).max()) for k, p in params.items()}


# -- suites -----------------------------------------------------------------------

def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=np.float64)


def op_suites(seed: int = 0) -> dict[str, float]:
    """One finite-difference check per differentiable primitive."""
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}
    with T.precision(np.float64):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
        out["matmul"] = max(check(lambda: T.sum_(a @ b), {"a": a, "b": b}).values())
        v = _leaf(rng, 4)
        out["matvec"] = max(check(lambda: T.sum_(T.tanh(a @ v)), {"a": a, "v": v}).values())

        x, y, row = _leaf(rng, 3, 4), _leaf(rng, 3, 4), _leaf(rng, 4)
        w = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        out["elementwise"] = max(
            check(lambda: T.sum_(((x * y) - row + x * 2.5) * w), {"x": x, "y": y, "row": row}).values()
        )
        for kind in ("sigmoid", "tanh", "relu"):
            out[kind] = max(check(lambda: T.sum_(T.activation(x, kind) * w), {"x": x}).values())
        out["softmax"] = max(check(lambda: T.sum_(T.softmax(x, axis=1) * w), {"x": x}).values())
        out["softmax_axis0"] = max(check(lambda: T.sum_(T.softmax(x, axis=0) * w), {"x": x}).values())

        table = _leaf(rng, 5, 3)
        g = Tensor(rng.normal(size=(6, 3)), dtype=np.float64)
        out["gather_rows"] = max(check(lambda: T.sum_(T.gather_rows(table, [4, 0, 0, 2, 4, 4]) * g), {"t": table}).values())

        c1, c2 = _leaf(rng, 3, 2), _leaf(rng, 3, 3)
        wc = Tensor(rng.normal(size=(3, 5)), dtype=np.float64)
        out["concat"] = max(check(lambda: T.sum_(T.concat([c1, c2], axis=1) * wc), {"c1": c1, "c2": c2}).values())
        out["slice"] = max(check(lambda: T.sum_(T.slice_axis(x, 1, 1, 3) * T.slice_axis(w, 1, 0, 2)), {"x": x}).values())
        out["l2_normalize_rows"] = max(check(lambda: T.sum_(T.l2_normalize_rows(x) * w), {"x": x}).values())
        out["reductions"] = max(
            check(lambda: T.sum_(T.mean(x * x, axis=0) * row) + T.sum_(T.sum_(x, axis=1) * T.sum_(y, axis=1)), {"x": x, "y": y, "row": row}).values()
        )
        gain, bias = _leaf(rng, 4), _leaf(rng, 4)
        out["layer_norm"] = max(check(lambda: T.sum_(T.layer_norm(x, gain, bias) * w), {"x": x, "gain": gain, "bias": bias}).values())
        p = Tensor(rng.uniform(0.05, 0.95, size=(3, 4)), requires_grad=True, dtype=np.float64)
        out["log_clip"] = max(check(lambda: T.sum_(T.log(T.clip(p, 1e-8, 1 - 1e-8)) * w), {"p": p}).values())

        d, dh = 4, 3
        cell = {
            **{f"W_{k}": _leaf(rng, d, dh, scale=0.5) for k in "zgh"},
            **{f"U_{k}": _leaf(rng, dh, dh, scale=0.5) for k in "zgh"},
            **{f"b_{k}": _leaf(rng, dh, scale=0.5) for k in "zgh"},
        }
        xs = [Tensor(rng.normal(size=d), dtype=np.float64) for _ in range(3)]

        def unrolled():
            h = Tensor(np.zeros(dh), dtype=np.float64)
            for xt in xs:
                h = gru_cell(xt, h, cell)
            return T.sum_(h * h)

        out["gru_cell_3step"] = max(check(unrolled, cell).values())
    return out


TOY_SESSIONS = ([0, 1, 0, 2], [3, 4, 5], [1, 2, 3, 1, 5], [5, 4, 4, 2, 0])
TOY_TARGETS = (3, 0, 4, 1)


def toy_hyperparams(**overrides) -> TrasaHyperparams:
    base = dict(vocab_size=6, d=8, num_heads=2, num_layers=1, max_positions=6, dropout=0.0, init_std=0.3)
    base.update(overrides)
    return TrasaHyperparams(**base)


def model_check(hp: TrasaHyperparams | None = None, seed: int = 0, sessions=TOY_SESSIONS, targets=TOY_TARGETS) -> dict[str, float]:
    """Per-parameter max relative error of the full training loss."""
    with T.precision(np.float64):
        hp = hp or toy_hyperparams()
        model = TrasaModel(hp, seed=seed)
        structs = [model.structure(s) for s in sessions]
        return check(lambda: model.batch_loss(structs, list(targets), training=False), model.params)


@dataclass
class GradcheckReport:
    ops: dict[str, float] = field(default_factory=dict)
    models: dict[str, dict[str, float]] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        errs = list(self.ops.values()) + [e for m in self.models.values() for e in m.values()]
        return max(errs) if errs else 0.0

    def to_text(self) -> str:
        lines = [f"op.{k}={v:.3e}" for k, v in self.ops.items()]
        for name, errs in self.models.items():
            worst = max(errs, key=errs.get)
            lines.append(f"model.{name}.params={len(errs)}")
            lines.append(f"model.{name}.max_rel_error={errs[worst]:.3e}")
            lines.append(f"model.{name}.worst={worst}")
        lines.append(f"max_rel_error={self.max_error:.3e}")
        lines.append(f"seconds={self.seconds:.2f}")
        return "\n".join(lines)


MODEL_VARIANTS = {
    "full": {},
    "two_layers": {"num_layers": 2},
    "standard_ce": {"loss_mode": "standard_ce"},
    "readout_san": {"readout": "SAN"},
    "readout_sum": {"readout": "SUM"},
    "readout_graph": {"readout": "GRAPH"},
    "wo_pos": {"ablation": "WO_POS"},
    "wo_rel_pos": {"ablation": "WO_REL_POS"},
    "wo_san": {"ablation": "WO_SAN"},
}


def run_gradcheck(seed: int = 0, variants=None) -> GradcheckReport:
    start = time.perf_counter()
    report = GradcheckReport(ops=op_suites(seed))
    for name in variants or MODEL_VARIANTS:
        report.models[name] = model_check(toy_hyperparams(**MODEL_VARIANTS[name]), seed=seed)
    report.seconds = time.perf_counter() - start
    return report
