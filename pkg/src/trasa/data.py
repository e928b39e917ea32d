"""Event-log ingestion, filtering, prefix augmentation, splits and synthetic corpora.

On-disk formats (version ``FORMAT_VERSION``):

* instance files (``train.txt``, ``valid.txt``, ``test.txt``): optional ``#``
  comment lines, then one instance per line, ``<prefix ids separated by
  spaces>\\t<label id>``.
* ``vocab.txt``: one raw item id per line; the line number (from 0) is the
  dense id.
* ``stats.txt``: ``key=value`` lines.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

Instance = tuple[tuple[int, ...], int]


class InputError(ValueError):
    pass


class EmptyDatasetError(InputError):
    pass


@dataclass
class RawSession:
    session_id: str
    items: list
    end_time: float = 0.0


@dataclass
class IngestReport:
    rows: int = 0
    malformed: int = 0
    sessions: int = 0


# -- ingestion -------------------------------------------------------------------

def ingest(
    path,
    delimiter: str = ",",
    session_col: str | int = "session_id",
    item_col: str | int = "item_id",
    time_col: str | int = "timestamp",
    header: bool | None = None,
    report: IngestReport | None = None,
) -> list[RawSession]:
    """Group a delimiter-separated event log into time-ordered sessions.

    Columns are addressed by name (requires a header row) or by position.
    With ``header=None`` a header is assumed when the first row contains the
    session column name. Ties in timestamp keep file order.
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    report = report if report is not None else IngestReport()
    events: dict[str, list[tuple[float, int, str]]] = {}
    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        first = next(reader, None)
        if first is None:
            raise InputError(f"{path} is empty")
        names = [c.strip() for c in first]
        if header is None:
            header = isinstance(session_col, str) and session_col in names
        if header:
            cols = [_resolve(c, names) for c in (session_col, item_col, time_col)]
            rows: Iterable[list[str]] = reader
        else:
            cols = [_resolve(c, None) for c in (session_col, item_col, time_col)]
            rows = _chain([first], reader)
        for order, row in enumerate(rows):
            report.rows += 1
            try:
                sid, item, ts = (row[c].strip() for c in cols)
                if not sid or not item:
                    raise ValueError("empty field")
                stamp = float(ts)
            except (IndexError, ValueError):
                report.malformed += 1
                continue
            events.setdefault(sid, []).append((stamp, order, item))
    if not events:
        raise InputError(f"no parseable rows in {path} ({report.malformed} malformed)")
    if report.malformed:
        log.warning("skipped %d malformed rows in %s", report.malformed, path)
    sessions = []
    for sid, evs in events.items():
        evs.sort(key=lambda e: (e[0], e[1]))
        sessions.append(RawSession(sid, [e[2] for e in evs], evs[-1][0]))
    report.sessions = len(sessions)
    return sessions


def _chain(*iterables):
    for it in iterables:
        yield from it


def _resolve(col, names):
    if isinstance(col, int) or (isinstance(col, str) and col.isdigit()):
        return int(col)
    if names is None:
        raise InputError(f"column {col!r} given by name but the file has no header")
    try:
        return names.index(col)
    except ValueError:
        raise InputError(f"column {col!r} not found in header {names}") from None


# -- protocol ----------------------------------------------------------------------

def filter_sessions(sessions: Sequence, min_item_support: int = 5) -> list:
    """Drop rare items, then sessions left with fewer than two clicks (single pass)."""
    counts = Counter(v for s in sessions for v in _items(s))
    out = []
    for s in sessions:
        kept = [v for v in _items(s) if counts[v] >= min_item_support]
        if len(kept) > 1:
            out.append(_with_items(s, kept))
    if not out:
        raise EmptyDatasetError("every session was removed by filtering")
    return out


def _items(s) -> list:
    return s.items if isinstance(s, RawSession) else list(s)


def _with_items(s, items):
    if isinstance(s, RawSession):
        return RawSession(s.session_id, items, s.end_time)
    return items


def augment(session: Sequence) -> list[tuple[tuple, object]]:
    """``[v1..vl]`` -> ``([v1], v2), ([v1, v2], v3), ..., ([v1..v_{l-1}], vl)``."""
    items = list(session)
    if len(items) < 2:
        raise ValueError(f"augmentation needs a session of length >= 2, got {len(items)}")
    return [(tuple(items[:k]), items[k]) for k in range(1, len(items))]


def final_item_instances(sessions: Sequence[Sequence[int]]) -> list[Instance]:
    """One instance per session: the full prefix and its last item."""
    return [(tuple(s[:-1]), s[-1]) for s in sessions]


@dataclass
class DatasetStats:
    clicks: int
    sessions: int
    items: int
    average_length: float

    @classmethod
    def of(cls, sessions: Sequence[Sequence[int]]) -> "DatasetStats":
        clicks = sum(len(s) for s in sessions)
        items = len({v for s in sessions for v in s})
        return cls(clicks, len(sessions), items, clicks / len(sessions) if sessions else 0.0)


@dataclass
class ProcessedDataset:
    vocab: list                            # dense id -> raw item id
    train: list[Instance]
    validation: list[Instance]
    test: list[Instance]
    stats: DatasetStats
    sessions: dict[str, list[tuple[int, ...]]] = field(default_factory=dict)
    dropped_oov: int = 0

    @property
    def num_items(self) -> int:
        return len(self.vocab)

    def recount(self) -> DatasetStats:
        every = [s for part in ("train", "validation", "test") for s in self.sessions.get(part, [])]
        return DatasetStats.of(every)


def split(
    sessions: Sequence[RawSession],
    test_fraction: float = 0.1,
    valid_fraction: float = 0.1,
    seed: int = 0,
) -> ProcessedDataset:
    """Chronological test split, seeded validation subset, then augmentation.

    The vocabulary comes from the training portion (training + validation);
    test instances touching unseen items are dropped and counted.
    """
    if not (0 < test_fraction < 1 and 0 <= valid_fraction < 1 and test_fraction + valid_fraction < 1):
        raise ValueError("fractions must lie in (0, 1) with a sum below 1")
    ordered = sorted(enumerate(sessions), key=lambda p: (p[1].end_time, p[0]))
    ordered = [s for _, s in ordered]
    n_test = int(round(len(ordered) * test_fraction))
    n_train = len(ordered) - n_test
    if n_test < 1 or n_train < 1:
        raise InputError(f"{len(ordered)} sessions are too few for a train/test split")
    train_part, test_part = ordered[:n_train], ordered[n_train:]

    rng = np.random.default_rng(seed)
    n_valid = int(round(n_train * valid_fraction))
    valid_idx = set(rng.permutation(n_train)[:n_valid].tolist())

    vocab: list = []
    index: dict = {}
    for s in train_part:
        for v in s.items:
            if v not in index:
                index[v] = len(vocab)
                vocab.append(v)

    def encode(s):
        return tuple(index[v] for v in s.items)

    train_s = [encode(s) for i, s in enumerate(train_part) if i not in valid_idx]
    valid_s = [encode(s) for i, s in enumerate(train_part) if i in valid_idx]
    test_s, dropped = [], 0
    test_inst: list[Instance] = []
    for s in test_part:
        enc = [index.get(v) for v in s.items]
        kept_any = False
        for prefix, label in augment(enc):
            if label is None or any(v is None for v in prefix):
                dropped += 1
            else:
                test_inst.append((prefix, label))
                kept_any = True
        if kept_any:
            # retained part of the session: the longest in-vocabulary prefix
            cut = next((k for k, v in enumerate(enc) if v is None), len(enc))
            test_s.append(tuple(enc[:cut]))
    if dropped:
        log.info("dropped %d test instances with out-of-vocabulary items", dropped)

    sessions_by_part = {"train": train_s, "validation": valid_s, "test": test_s}
    return ProcessedDataset(
        vocab=vocab,
        train=[i for s in train_s for i in augment(s)],
        validation=[i for s in valid_s for i in augment(s)],
        test=test_inst,
        stats=DatasetStats.of(train_s + valid_s + test_s),
        sessions=sessions_by_part,
        dropped_oov=dropped,
    )


def batches(instances: Sequence, batch_size: int, shuffle_seed: int | None = 0, epoch: int = 0) -> Iterator[list]:
    """Deterministic per-epoch shuffle keyed by ``(shuffle_seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(instances))
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(instances))
    for start in range(0, len(order), batch_size):
        yield [instances[i] for i in order[start : start + batch_size]]


# -- synthetic corpora ------------------------------------------------------------

class SynthesisConfigError(ValueError):
    pass


def synthesize_markov(
    n_items: int,
    n_sessions: int,
    min_len: int = 2,
    max_len: int = 8,
    concentration: float = 1.0,
    seed: int = 0,
    return_matrix: bool = False,
):
    """Sessions from a random first-order chain; rows ~ Dirichlet(concentration).

    Small ``concentration`` gives near-deterministic transitions.
    """
    _check_common(n_items, n_sessions, min_len, max_len)
    if concentration <= 0:
        raise SynthesisConfigError("concentration must be positive")
    rng = np.random.default_rng(seed)
    trans = rng.dirichlet(np.full(n_items, concentration), size=n_items)
    cum = np.cumsum(trans, axis=1)
    sessions = []
    for _ in range(n_sessions):
        length = int(rng.integers(min_len, max_len + 1))
        s = [int(rng.integers(n_items))]
        for _ in range(length - 1):
            nxt = int(np.searchsorted(cum[s[-1]], rng.random(), side="right"))
            s.append(min(nxt, n_items - 1))
        sessions.append(s)
    return (sessions, trans) if return_matrix else sessions


def synthesize_long_range(
    n_items: int,
    n_sessions: int,
    gap: int = 5,
    min_len: int | None = None,
    max_len: int | None = None,
    offset: int = 1,
    seed: int = 0,
) -> list[list[int]]:
    """Sessions whose last item is ``(anchor + offset) mod n``.

    The anchor sits ``gap`` positions before the last item; all other items
    are uniform draws.
    """
    min_len = gap + 1 if min_len is None else min_len
    max_len = min_len if max_len is None else max_len
    _check_common(n_items, n_sessions, min_len, max_len)
    if gap < 1 or min_len < gap + 1:
        raise SynthesisConfigError(f"sessions need at least gap+1={gap + 1} items")
    rng = np.random.default_rng(seed)
    sessions = []
    for _ in range(n_sessions):
        length = int(rng.integers(min_len, max_len + 1))
        s = rng.integers(n_items, size=length).tolist()
        s[-1] = (s[-1 - gap] + offset) % n_items
        sessions.append(s)
    return sessions


def _check_common(n_items, n_sessions, min_len, max_len):
    if n_items < 4:
        raise SynthesisConfigError("vocabulary needs at least 4 items")
    if n_sessions < 1:
        raise SynthesisConfigError("n_sessions must be positive")
    if not 2 <= min_len <= max_len:
        raise SynthesisConfigError(f"invalid session length bounds [{min_len}, {max_len}]")


def synthesize(kind: str, seed: int = 0, **params):
    if kind == "markov":
        return synthesize_markov(seed=seed, **params)
    if kind == "long_range":
        return synthesize_long_range(seed=seed, **params)
    raise SynthesisConfigError(f"unknown corpus kind {kind!r}")


def write_event_log(sessions: Sequence[Sequence], path, delimiter: str = ",") -> None:
    """Write sessions as ``session_id,item_id,timestamp`` rows (header included)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(["session_id", "item_id", "timestamp"])
        clock = 0
        for k, s in enumerate(sessions):
            for v in s:
                w.writerow([f"s{k}", v, clock])
                clock += 1


# -- persistence ------------------------------------------------------------------

def write_instances(instances: Iterable[Instance], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# trasa-instances v{FORMAT_VERSION}\n")
        for prefix, label in instances:
            fh.write(" ".join(str(v) for v in prefix) + "\t" + str(label) + "\n")


def read_instances(path) -> list[Instance]:
    out = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        if not line or line.startswith("#"):
            continue
        try:
            prefix, label = line.split("\t")
            items = tuple(int(v) for v in prefix.split())
            if not items:
                raise ValueError("empty prefix")
            out.append((items, int(label)))
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: bad instance line ({exc})") from None
    return out


def write_vocab(vocab: Sequence, path) -> None:
    Path(path).write_text("".join(f"{v}\n" for v in vocab), encoding="utf-8")


def read_vocab(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def write_stats(stats: DatasetStats, path, **extra) -> None:
    rows = {
        "format_version": FORMAT_VERSION,
        "clicks": stats.clicks,
        "sessions": stats.sessions,
        "items": stats.items,
        "average_length": f"{stats.average_length:.6f}",
        **extra,
    }
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in rows.items()), encoding="utf-8")


def read_key_values(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def save_dataset(ds: ProcessedDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_instances(ds.train, directory / "train.txt")
    write_instances(ds.validation, directory / "valid.txt")
    write_instances(ds.test, directory / "test.txt")
    write_vocab(ds.vocab, directory / "vocab.txt")
    write_stats(
        ds.stats, directory / "stats.txt",
        train_instances=len(ds.train), valid_instances=len(ds.validation),
        test_instances=len(ds.test), dropped_oov=ds.dropped_oov,
    )


def sessions_from_instances(instances: Sequence[Instance]) -> list[tuple[int, ...]]:
    """Undo prefix augmentation for instances written in session order.

    A prefix of length one opens a new session; each session is its longest
    prefix followed by that prefix's label.
    """
    out: list[tuple[int, ...]] = []
    last = None
    for prefix, label in instances:
        if len(prefix) == 1 and last is not None:
            out.append(last)
        last = tuple(prefix) + (label,)
    if last is not None:
        out.append(last)
    return out


def recount_stats(directory) -> DatasetStats:
    """Statistics recomputed from the stored instance files alone."""
    directory = Path(directory)
    every = []
    for name in ("train.txt", "valid.txt", "test.txt"):
        every += sessions_from_instances(read_instances(directory / name))
    return DatasetStats.of(every)


def load_dataset(directory) -> ProcessedDataset:
    directory = Path(directory)
    kv = read_key_values(directory / "stats.txt")
    stats = DatasetStats(int(kv["clicks"]), int(kv["sessions"]), int(kv["items"]), float(kv["average_length"]))
    return ProcessedDataset(
        vocab=read_vocab(directory / "vocab.txt"),
        train=read_instances(directory / "train.txt"),
        validation=read_instances(directory / "valid.txt"),
        test=read_instances(directory / "test.txt"),
        stats=stats,
        dropped_oov=int(kv.get("dropped_oov", 0)),
    )
