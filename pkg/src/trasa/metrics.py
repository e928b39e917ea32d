"""P@K and MRR@K over full-catalogue rankings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def target_ranks(scores: np.ndarray, targets) -> np.ndarray:
    """1-based rank of each target; ties go to the lower item index."""
    scores = np.atleast_2d(scores)
    targets = np.asarray(targets, dtype=np.int64)
    t_scores = scores[np.arange(len(targets)), targets][:, None]
    higher = (scores > t_scores).sum(axis=1)
    idx = np.arange(scores.shape[1])[None, :]
    tied_before = ((scores == t_scores) & (idx < targets[:, None])).sum(axis=1)
    return 1 + higher + tied_before


def precision_at(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    return float((ranks <= k).mean()) if ranks.size else 0.0


def mrr_at(ranks, k: int) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if not ranks.size:
        return 0.0
    return float(np.where(ranks <= k, 1.0 / ranks, 0.0).mean())


@dataclass
class EvalReport:
    precision: dict[int, float] = field(default_factory=dict)
    mrr: dict[int, float] = field(default_factory=dict)
    count: int = 0
    seconds: float = 0.0

    @classmethod
    def from_ranks(cls, ranks, ks=(20,), seconds: float = 0.0) -> "EvalReport":
        ranks = np.asarray(ranks)
        return cls(
            precision={k: precision_at(ranks, k) for k in ks},
            mrr={k: mrr_at(ranks, k) for k in ks},
            count=int(ranks.size),
            seconds=seconds,
        )

    def __getitem__(self, key: str) -> float:
        name, _, k = key.partition("@")
        table = {"P": self.precision, "MRR": self.mrr}[name]
        return table[int(k)]

    def to_text(self, timing: bool = True) -> str:
        lines = [f"instances={self.count}"]
        for k in sorted(self.precision):
            lines.append(f"P@{k}={self.precision[k]:.10g}")
            lines.append(f"MRR@{k}={self.mrr[k]:.10g}")
        if timing:
            lines.append(f"seconds={self.seconds:.3f}")
        return "\n".join(lines)

    @staticmethod
    def parse(text: str) -> dict[str, float]:
        out = {}
        for line in text.splitlines():
            key, sep, value = line.partition("=")
            if sep:
                out[key.strip()] = float(value)
        return out
