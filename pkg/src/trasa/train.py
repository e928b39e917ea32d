"""Training loop, evaluation and the ablation suite."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Instance, batches
from .metrics import EvalReport, target_ranks
from .model import ABLATIONS, READOUTS, ConfigError, SessionStructure, TrasaHyperparams, TrasaModel, parameter_shapes
from .optim import Adam

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class SuiteError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_every_epochs: int = 3
    weight_decay: float = 1e-5
    dropout: float = 0.2
    batch_size: int = 512
    max_epochs: int = 30
    early_stop_patience: int = 3
    seed: int = 0
    ablation: str = "FULL"
    readout_variant: str = "TRASA"
    loss_mode: str = "binary_ce"
    # model shape
    d: int = 64
    num_heads: int = 4
    num_layers: int = 1
    ffn_inner: int = 0
    max_positions: int = 50
    path_cap: int = 16
    init_std: float = 0.02
    eval_batch_size: int = 256

    def __post_init__(self):
        for name in ("learning_rate", "lr_decay_factor", "batch_size", "lr_decay_every_epochs", "eval_batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")

    def hyperparams(self, vocab_size: int) -> TrasaHyperparams:
        return TrasaHyperparams(
            vocab_size=vocab_size, d=self.d, num_heads=self.num_heads, num_layers=self.num_layers,
            ffn_inner=self.ffn_inner, dropout=self.dropout, max_positions=self.max_positions,
            path_cap=self.path_cap, init_std=self.init_std, ablation=self.ablation,
            readout=self.readout_variant, loss_mode=self.loss_mode,
        )

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string-valued key/value pairs (config files, CLI overrides)."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, types[key])
        return cls(**kwargs)


def _coerce(raw, type_name):
    if not isinstance(raw, str):
        return raw
    if type_name in ("int", int):
        return int(raw)
    if type_name in ("float", float):
        return float(raw)
    return raw


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    return config.learning_rate * config.lr_decay_factor ** (epoch // config.lr_decay_every_epochs)


class StructureCache:
    """Per-prefix graph/path structure, built once per model."""

    def __init__(self, model: TrasaModel):
        self.model = model
        self._cache: dict[tuple[int, ...], SessionStructure] = {}

    def __call__(self, prefix: Sequence[int]) -> SessionStructure:
        key = tuple(prefix)
        s = self._cache.get(key)
        if s is None:
            s = self._cache[key] = self.model.structure(key)
        return s


def evaluate(model, instances: Sequence[Instance], ks=(20,), batch_size: int = 256, cache: StructureCache | None = None) -> EvalReport:
    if isinstance(model, (str, Path)):
        model, _ = TrasaModel.load(model)
    start = time.perf_counter()
    cache = cache or StructureCache(model)
    ranks = []
    for lo in range(0, len(instances), batch_size):
        chunk = instances[lo : lo + batch_size]
        for _, label in chunk:
            if not 0 <= label < model.hp.vocab_size:
                raise ConfigError(f"label {label} outside the checkpoint vocabulary ({model.hp.vocab_size} items)")
        scores = model.scores([cache(p) for p, _ in chunk])
        ranks.append(target_ranks(scores, [label for _, label in chunk]))
    ranks = np.concatenate(ranks) if ranks else np.zeros(0)
    return EvalReport.from_ranks(ranks, ks, time.perf_counter() - start)


@dataclass
class TrainResult:
    model: TrasaModel
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_valid: float = float("nan")


def train(
    train_instances: Sequence[Instance],
    config: TrainConfig,
    vocab_size: int,
    validation: Sequence[Instance] = (),
    on_epoch: Callable[[int, TrasaModel, dict], bool] | None = None,
    log_path=None,
) -> TrainResult:
    """Mini-batch Adam over the augmented instances.

    ``on_epoch`` may inspect the model after each epoch and return True to
    stop. With a validation set the parameters of the best validation P@20
    epoch are restored at the end.
    """
    if not train_instances:
        raise ValueError("training set is empty")
    hp = config.hyperparams(vocab_size)
    model = TrasaModel(hp, seed=config.seed)
    opt = Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    cache = StructureCache(model)
    rng = np.random.default_rng([config.seed, 1])
    result = TrainResult(model)
    best_state, stale = None, 0
    sink = Path(log_path).open("w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.max_epochs):
            opt.lr = learning_rate_at(config, epoch)
            losses = []
            for b, batch in enumerate(batches(train_instances, config.batch_size, config.seed, epoch)):
                opt.zero_grad()
                structs = [cache(p) for p, _ in batch]
                try:
                    loss = model.batch_loss(structs, [y for _, y in batch], training=True, rng=rng)
                except FloatingPointError as exc:
                    raise TrainingDivergedError(f"{exc} at epoch {epoch}, batch {b}") from exc
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
                loss.backward()
                opt.step()
                losses.append(value)
            record = {"epoch": epoch, "lr": opt.lr, "loss": float(np.mean(losses))}
            if validation:
                rep = evaluate(model, validation, (20,), config.eval_batch_size, cache)
                record["val_P@20"] = rep.precision[20]
                record["val_MRR@20"] = rep.mrr[20]
                if best_state is None or rep.precision[20] > result.best_valid:
                    result.best_valid, result.best_epoch = rep.precision[20], epoch
                    best_state, stale = model.state_dict(), 0
                else:
                    stale += 1
            result.log.append(record)
            log.info("epoch %s", record)
            if sink:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
            if on_epoch is not None and on_epoch(epoch, model, record):
                break
            if validation and stale >= config.early_stop_patience:
                break
    finally:
        if sink:
            sink.close()
    if best_state is not None:
        for name, arr in best_state.items():
            model.params[name].data[...] = arr
    else:
        result.best_epoch = len(result.log) - 1
    return result


# -- ablations -------------------------------------------------------------------

def expected_inventory(config: TrainConfig, vocab_size: int) -> set[str]:
    return set(parameter_shapes(config.hyperparams(vocab_size)))


def run_ablation_suite(
    train_instances: Sequence[Instance],
    test_instances: Sequence[Instance],
    base_config: TrainConfig,
    vocab_size: int,
    validation: Sequence[Instance] = (),
    ks=(1, 20),
    checkpoint_dir=None,
) -> dict:
    """Train every component ablation and readout variant under one seed/budget."""
    variants = [(a, "TRASA") for a in ABLATIONS] + [("FULL", r) for r in READOUTS if r != "TRASA"]
    full_names = expected_inventory(base_config, vocab_size)
    results = {}
    for ablation, readout in variants:
        name = ablation if readout == "TRASA" else f"READOUT_{readout}"
        cfg = replace(base_config, ablation=ablation, readout_variant=readout)
        try:
            res = train(train_instances, cfg, vocab_size, validation)
            report = evaluate(res.model, test_instances, ks, cfg.eval_batch_size)
        except Exception as exc:
            raise SuiteError(f"ablation variant {name} failed: {exc}") from exc
        names = set(res.model.params)
        if names != expected_inventory(cfg, vocab_size):
            raise SuiteError(f"variant {name}: unexpected parameter inventory")
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            res.model.save(Path(checkpoint_dir) / f"{name}.ckpt", {"train_config": asdict(cfg)})
        results[name] = {
            "report": report,
            "removed": sorted(full_names - names),
            "added": sorted(names - full_names),
            "epochs": len(res.log),
        }
    return results


def format_suite(results: dict, ks=(1, 20)) -> str:
    head = ["variant"] + [f"P@{k}" for k in ks] + [f"MRR@{k}" for k in ks] + ["removed"]
    rows = [head]
    for name, r in results.items():
        rep = r["report"]
        rows.append(
            [name]
            + [f"{100 * rep.precision[k]:.2f}" for k in ks]
            + [f"{100 * rep.mrr[k]:.2f}" for k in ks]
            + [",".join(summarize_removed(r["removed"])) or "-"]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(head) - 1)]
    return "\n".join(
        "  ".join(c.ljust(w) for c, w in zip(row[:-1], widths)) + "  " + row[-1] for row in rows
    )


def _short(name: str) -> str:
    parts = name.split(".")
    if parts[0] in ("layers", "gru_fwd", "gru_bwd", "readout", "readout_san", "relation"):
        return parts[0] if parts[0] != "layers" else f"layers.{parts[1]}"
    return name


def summarize_removed(names: Sequence[str]) -> list[str]:
    return sorted({_short(n) for n in names})
