"""Transition-relation-aware self-attention recommender.

Pipeline for one session: typed session graph -> shortest-path relation per
node pair (bi-GRU over edge-type embeddings, split by ``W_r``) -> stack of
relation-aware multi-head self-attention layers over the unique items ->
revert to the click sequence, add reversed position embeddings, soft-attention
readout -> dot products with L2-normalized item embeddings -> softmax.

Relations only shift queries and keys; values are computed from the item
representations alone. All linear maps are stored ``(in, out)`` and applied
as ``x @ W``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import serialization
from . import tensor as T
from .graph import NUM_EDGE_TYPES, EdgeType, SessionGraph, build_graph, shortest_paths
from .tensor import Tensor

ABLATIONS = ("FULL", "WO_POS", "WO_REL_POS", "WO_SAN")
READOUTS = ("TRASA", "SAN", "SUM", "GRAPH")
LOSS_MODES = ("binary_ce", "standard_ce")
GRU_GATES = ("W_z", "U_z", "b_z", "W_g", "U_g", "b_g", "W_h", "U_h", "b_h")
LAYER_PARAMS = (
    "W_q", "W_k", "W_v", "W_o", "W_1", "b_1", "W_2", "b_2",
    "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
)
PROB_CLAMP = 1e-8


class ConfigError(ValueError):
    pass


@dataclass
class TrasaHyperparams:
    vocab_size: int
    d: int = 64
    num_heads: int = 4
    num_layers: int = 1
    ffn_inner: int = 0            # 0 -> 4 * d
    dropout: float = 0.2
    max_positions: int = 50
    path_cap: int = 16
    init_std: float = 0.02
    ablation: str = "FULL"
    readout: str = "TRASA"
    loss_mode: str = "binary_ce"

    def __post_init__(self):
        if self.ffn_inner == 0:
            self.ffn_inner = 4 * self.d
        for name in ("vocab_size", "d", "num_heads", "ffn_inner", "max_positions", "path_cap"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be non-negative")
        if self.d % self.num_heads:
            raise ConfigError(f"d={self.d} is not divisible by num_heads={self.num_heads}")
        if self.d % 2:
            raise ConfigError("d must be even (two GRU directions of width d/2)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        if self.readout not in READOUTS:
            raise ConfigError(f"unknown readout {self.readout!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")

    @property
    def uses_attention(self) -> bool:
        return self.ablation != "WO_SAN" and self.num_layers > 0

    @property
    def uses_relations(self) -> bool:
        return self.uses_attention and self.ablation in ("FULL", "WO_POS")

    @property
    def uses_positions(self) -> bool:
        return self.ablation not in ("WO_POS", "WO_REL_POS") and self.readout != "GRAPH"


# -- parameter inventory -------------------------------------------------------

def parameter_shapes(hp: TrasaHyperparams) -> dict[str, tuple[int, ...]]:
    d, dh, n = hp.d, hp.d // 2, hp.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"item_table": (n, d)}
    if hp.uses_positions:
        shapes["position_table"] = (hp.max_positions, d)
    if hp.uses_relations:
        shapes["edge_type_table"] = (NUM_EDGE_TYPES, d)
        shapes["relation.W_r"] = (d, 2 * d)
        for cell in ("gru_fwd", "gru_bwd"):
            for gate in ("z", "g", "h"):
                shapes[f"{cell}.W_{gate}"] = (d, dh)
                shapes[f"{cell}.U_{gate}"] = (dh, dh)
                shapes[f"{cell}.b_{gate}"] = (dh,)
    layers = [f"layers.{k}" for k in range(hp.num_layers)] if hp.uses_attention else []
    if hp.readout == "SAN":
        layers.append("readout_san")
    for prefix in layers:
        shapes.update(_layer_shapes(prefix, d, hp.ffn_inner))
    if hp.readout in ("TRASA", "GRAPH"):
        shapes["readout.W_4"] = (d, d)
        shapes["readout.W_5"] = (d, d)
        shapes["readout.b_3"] = (d,)
        shapes["readout.q"] = (d,)
    return shapes


def _layer_shapes(prefix: str, d: int, inner: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.W_q": (d, d), f"{prefix}.W_k": (d, d), f"{prefix}.W_v": (d, d), f"{prefix}.W_o": (d, d),
        f"{prefix}.W_1": (d, inner), f"{prefix}.b_1": (inner,),
        f"{prefix}.W_2": (inner, d), f"{prefix}.b_2": (d,),
        f"{prefix}.ln1_gain": (d,), f"{prefix}.ln1_bias": (d,),
        f"{prefix}.ln2_gain": (d,), f"{prefix}.ln2_bias": (d,),
    }


def init_parameters(hp: TrasaHyperparams, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    dtype = T.get_default_dtype()
    params = {}
    for name, shape in parameter_shapes(hp).items():
        if name.endswith("_gain"):
            data = np.ones(shape)
        elif name.endswith("ln1_bias") or name.endswith("ln2_bias"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, hp.init_std, size=shape)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return params


def _sub(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# -- relation encoder ----------------------------------------------------------

def gru_cell(x: Tensor, h_prev: Tensor, cell: dict[str, Tensor]) -> Tensor:
    """One GRU step; ``g`` is the reset gate, ``z`` the update gate."""
    z = T.sigmoid(x @ cell["W_z"] + h_prev @ cell["U_z"] + cell["b_z"])
    g = T.sigmoid(x @ cell["W_g"] + h_prev @ cell["U_g"] + cell["b_g"])
    cand = T.tanh(x @ cell["W_h"] + (g * h_prev) @ cell["U_h"] + cell["b_h"])
    return h_prev + z * (cand - h_prev)


def _run_gru(types: np.ndarray, mask: np.ndarray, edge_table: Tensor, cell: dict[str, Tensor]) -> Tensor:
    """Run a GRU over a left-aligned batch of edge-type sequences.

    Input projections of the four edge types are computed once and gathered
    per step; finished rows keep their state through ``mask``.
    """
    count, steps = types.shape
    dh = cell["U_z"].shape[0]
    proj_z = edge_table @ cell["W_z"] + cell["b_z"]
    proj_g = edge_table @ cell["W_g"] + cell["b_g"]
    proj_h = edge_table @ cell["W_h"] + cell["b_h"]
    dtype = edge_table.data.dtype
    h = Tensor(np.zeros((count, dh)), dtype=dtype)
    for t in range(steps):
        col = types[:, t]
        z = T.sigmoid(T.gather_rows(proj_z, col) + h @ cell["U_z"])
        g = T.sigmoid(T.gather_rows(proj_g, col) + h @ cell["U_g"])
        cand = T.tanh(T.gather_rows(proj_h, col) + (g * h) @ cell["U_h"])
        if mask[:, t].all():
            h = h + z * (cand - h)
        else:
            live = Tensor(np.repeat(mask[:, t : t + 1], dh, axis=1), dtype=dtype)
            h = h + (z * live) * (cand - h)
    return h


def encode_paths(paths: Sequence[Sequence[int]], params: dict[str, Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Bi-GRU encode edge-type paths; returns ``(r, r_fwd, r_bwd)``, each ``(P, d)``.

    ``r_fwd`` is the relation from the canonical low node to the high node,
    ``r_bwd`` the reverse.
    """
    count = len(paths)
    steps = max(len(p) for p in paths)
    types = np.zeros((count, steps), dtype=np.int64)
    rtypes = np.zeros((count, steps), dtype=np.int64)
    mask = np.zeros((count, steps), dtype=bool)
    for i, p in enumerate(paths):
        types[i, : len(p)] = p
        rtypes[i, : len(p)] = p[::-1]
        mask[i, : len(p)] = True
    edges = params["edge_type_table"]
    h_fwd = _run_gru(types, mask, edges, _sub(params, "gru_fwd"))
    h_bwd = _run_gru(rtypes, mask, edges, _sub(params, "gru_bwd"))
    r = T.concat([h_fwd, h_bwd], axis=1)
    split = r @ params["relation.W_r"]
    d = r.shape[1]
    return r, T.slice_axis(split, 1, 0, d), T.slice_axis(split, 1, d, 2 * d)


@dataclass
class Relation:
    r: Tensor
    r_fwd: Tensor
    r_bwd: Tensor


def encode_relation(edge_types: Sequence[int], params: dict[str, Tensor]) -> Relation:
    if not edge_types:
        raise ValueError("relation path must contain at least one edge")
    r, fwd, bwd = encode_paths([list(edge_types)], params)
    return Relation(T.reshape(r, (-1,)), T.reshape(fwd, (-1,)), T.reshape(bwd, (-1,)))


# -- per-session structure -----------------------------------------------------

class PathRegistry:
    """Global ids for distinct (truncated) edge-type sequences."""

    def __init__(self):
        self.ids: dict[tuple[int, ...], int] = {}
        self.keys: list[tuple[int, ...]] = []

    def __len__(self):
        return len(self.keys)

    def register(self, key: tuple[int, ...]) -> int:
        pid = self.ids.get(key)
        if pid is None:
            pid = self.ids[key] = len(self.keys)
            self.keys.append(key)
        return pid


@dataclass
class SessionStructure:
    """Parameter-free artifacts of one session, reusable across epochs."""

    items: tuple[int, ...]              # unique item ids, first-occurrence order
    position_to_node: np.ndarray        # length l
    pair_path: np.ndarray               # (m, m) global path id of the canonical pair
    graph: SessionGraph = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return len(self.items)

    @property
    def length(self) -> int:
        return len(self.position_to_node)


def build_structure(session: Sequence[int], registry: PathRegistry, path_cap: int) -> SessionStructure:
    graph = build_graph(list(session))
    m = graph.num_nodes
    pair_path = np.zeros((m, m), dtype=np.int64)
    for (i, j), path in shortest_paths(graph, cap=path_cap).items():
        pid = registry.register(tuple(int(t) for t in path.edge_types))
        pair_path[i, j] = pair_path[j, i] = pid
    return SessionStructure(
        items=tuple(int(v) for v in graph.nodes),
        position_to_node=np.asarray(graph.position_to_node, dtype=np.int64),
        pair_path=pair_path,
        graph=graph,
    )


@dataclass
class RelationContext:
    """Relations of one session, as row indices into a shared table.

    ``table`` stacks ``[r_fwd; r_bwd]`` for a bank of paths. For the ordered
    pair (i, j), row ``q_index[i*m+j]`` holds r_{i->j} (added to the query of
    i) and ``k_index[i*m+j]`` holds r_{j->i} (added to the key of j).
    """

    table: Tensor | None
    q_index: np.ndarray | None
    k_index: np.ndarray | None


def relation_context(struct: SessionStructure, table: Tensor, local_ids: np.ndarray, bank_size: int) -> RelationContext:
    m = struct.num_nodes
    ii, jj = np.divmod(np.arange(m * m), m)
    local = local_ids.reshape(-1)
    upper = ii <= jj
    q_index = local + bank_size * (~upper)
    k_index = local + bank_size * upper
    return RelationContext(table, q_index, k_index)


NO_RELATIONS = RelationContext(None, None, None)


# -- attention -----------------------------------------------------------------

def _head_sum_matrix(d: int, heads: int, dtype) -> Tensor:
    width = d // heads
    mat = np.zeros((d, heads))
    for h in range(heads):
        mat[h * width : (h + 1) * width, h] = 1.0
    return Tensor(mat, dtype=dtype)


def relation_scores(H: Tensor, rel: RelationContext, layer: dict[str, Tensor], heads: int) -> Tensor:
    """Scaled relation-aware scores for every ordered pair: ``(m*m, heads)``."""
    m, d = H.shape
    ii, jj = np.divmod(np.arange(m * m), m)
    xq = T.gather_rows(H, ii)
    xk = T.gather_rows(H, jj)
    if rel.table is not None:
        xq = xq + T.gather_rows(rel.table, rel.q_index)
        xk = xk + T.gather_rows(rel.table, rel.k_index)
    prod = (xq @ layer["W_q"]) * (xk @ layer["W_k"])
    scale = 1.0 / math.sqrt(d // heads)
    return (prod @ _head_sum_matrix(d, heads, H.data.dtype)) * scale


def attention_scores(H: Tensor, rel: RelationContext, layer: dict[str, Tensor], head: int, heads: int) -> Tensor:
    if not 0 <= head < heads:
        raise IndexError(f"head {head} out of range for {heads} heads")
    m = H.shape[0]
    scores = relation_scores(H, rel, layer, heads)
    return T.reshape(T.slice_axis(scores, 1, head, head + 1), (m, m))


def encoder_layer(
    H: Tensor,
    rel: RelationContext,
    layer: dict[str, Tensor],
    heads: int,
    dropout_p: float = 0.0,
    training: bool = False,
    rng=None,
    return_probs: bool = False,
):
    m, d = H.shape
    width = d // heads
    scores = relation_scores(H, rel, layer, heads)
    values = H @ layer["W_v"]
    outs, probs = [], []
    for h in range(heads):
        a = T.softmax(T.reshape(T.slice_axis(scores, 1, h, h + 1), (m, m)), axis=1)
        probs.append(a)
        a = T.dropout(a, dropout_p, training, rng)
        outs.append(a @ T.slice_axis(values, 1, h * width, (h + 1) * width))
    attn = (outs[0] if heads == 1 else T.concat(outs, axis=1)) @ layer["W_o"]
    h1 = T.layer_norm(H + attn, layer["ln1_gain"], layer["ln1_bias"])
    ffn = T.relu(h1 @ layer["W_1"] + layer["b_1"]) @ layer["W_2"] + layer["b_2"]
    ffn = T.dropout(ffn, dropout_p, training, rng)
    out = T.layer_norm(h1 + ffn, layer["ln2_gain"], layer["ln2_bias"])
    return (out, probs) if return_probs else out


# -- session representation and prediction ------------------------------------

def soft_attention_readout(Hs: Tensor, last: Tensor, readout: dict[str, Tensor], return_weights: bool = False):
    eps = (Hs @ readout["W_4"] + last @ readout["W_5"] + readout["b_3"]) @ readout["q"]
    gamma = T.softmax(eps, axis=0)
    s_h = gamma @ Hs
    return (s_h, gamma) if return_weights else s_h


def session_readout(
    Hg: Tensor,
    struct: SessionStructure,
    params: dict[str, Tensor],
    hp: TrasaHyperparams,
    variant: str | None = None,
) -> Tensor:
    variant = variant or hp.readout
    if struct.length == 0:
        raise ValueError("session must contain at least one position")
    if variant == "GRAPH":
        last_node = int(struct.position_to_node[-1])
        return soft_attention_readout(Hg, T.slice_axis(Hg, 0, last_node, last_node + 1).reshape(-1), _sub(params, "readout"))
    seq = struct.position_to_node[-hp.max_positions :]
    l = len(seq)
    Hs = T.gather_rows(Hg, seq)
    if "position_table" in params:
        Hs = Hs + T.gather_rows(params["position_table"], np.arange(l - 1, -1, -1))
    if variant == "SUM":
        return T.sum_(Hs, axis=0)
    if variant == "SAN":
        out = encoder_layer(Hs, NO_RELATIONS, _sub(params, "readout_san"), hp.num_heads)
        return T.slice_axis(out, 0, l - 1, l).reshape(-1)
    if variant == "TRASA":
        return soft_attention_readout(Hs, T.slice_axis(Hs, 0, l - 1, l).reshape(-1), _sub(params, "readout"))
    raise ConfigError(f"unknown readout {variant!r}")


def score_items(s_h: Tensor, item_table: Tensor) -> Tensor:
    """Scores against L2-normalized item embeddings; ``s_h`` may be ``(d,)`` or ``(B, d)``."""
    normed = T.l2_normalize_rows(item_table)
    return s_h @ normed.T


def score_and_predict(s_h: Tensor, item_table: Tensor) -> Tensor:
    return T.softmax(score_items(s_h, item_table), axis=-1)


def loss(probs: Tensor, targets, mode: str = "binary_ce") -> Tensor:
    """Cross-entropy over softmax outputs, averaged over rows.

    ``binary_ce`` sums ``y log p + (1 - y) log(1 - p)`` over every item;
    ``standard_ce`` keeps only ``-log p_target``.
    """
    single = probs.ndim == 1
    if single:
        probs = T.reshape(probs, (1, -1))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    rows, n = probs.shape
    if len(targets) != rows:
        raise ValueError(f"{rows} prediction rows but {len(targets)} targets")
    if targets.min() < 0 or targets.max() >= n:
        raise IndexError(f"target out of range for {n} items")
    onehot = np.zeros((rows, n))
    onehot[np.arange(rows), targets] = 1.0
    y = Tensor(onehot, dtype=probs.data.dtype)
    hi = 1.0 - PROB_CLAMP
    pos = T.log(T.clip(probs, PROB_CLAMP, hi))
    if mode == "standard_ce":
        total = T.sum_(y * pos)
    elif mode == "binary_ce":
        neg = T.log(T.clip(1.0 - probs, PROB_CLAMP, hi))
        total = T.sum_(y * pos) + T.sum_((1.0 - y) * neg)
    else:
        raise ConfigError(f"unknown loss_mode {mode!r}")
    return total * (-1.0 / rows)


# -- model ---------------------------------------------------------------------

class TrasaModel:
    def __init__(self, hp: TrasaHyperparams, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.hp = hp
        self.seed = seed
        self.params = params if params is not None else init_parameters(hp, seed)
        self.paths = PathRegistry()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def structure(self, session: Sequence[int]) -> SessionStructure:
        if len(session) == 0:
            raise ValueError("session must contain at least one item")
        n = self.hp.vocab_size
        for v in session:
            if not 0 <= int(v) < n:
                raise IndexError(f"item id {v} outside vocabulary of size {n}")
        return build_structure(session, self.paths, self.hp.path_cap)

    def _relation_contexts(self, structs: Sequence[SessionStructure], zero_relations: bool) -> list[RelationContext]:
        if not self.hp.uses_relations:
            return [NO_RELATIONS] * len(structs)
        bank, inverse = np.unique(np.concatenate([s.pair_path.reshape(-1) for s in structs]), return_inverse=True)
        keys = [self.paths.keys[int(pid)] for pid in bank]
        _, fwd, bwd = encode_paths(keys, self.params)
        table = T.concat([fwd, bwd], axis=0)
        if zero_relations:
            table = table * 0.0
        out, start = [], 0
        for s in structs:
            size = s.num_nodes**2
            out.append(relation_context(s, table, inverse[start : start + size], len(bank)))
            start += size
        return out

    def node_representations(self, struct: SessionStructure, rel: RelationContext, training=False, rng=None) -> Tensor:
        H = T.gather_rows(self.params["item_table"], struct.items)
        if self.hp.uses_attention:
            for k in range(self.hp.num_layers):
                H = encoder_layer(
                    H, rel, _sub(self.params, f"layers.{k}"), self.hp.num_heads,
                    self.hp.dropout, training, rng,
                )
        return H

    def session_vectors(self, structs: Sequence[SessionStructure], training=False, rng=None, zero_relations=False) -> Tensor:
        rels = self._relation_contexts(structs, zero_relations)
        vecs = []
        for s, rel in zip(structs, rels):
            Hg = self.node_representations(s, rel, training, rng)
            vecs.append(session_readout(Hg, s, self.params, self.hp))
        return T.stack(vecs)

    def logits(self, structs: Sequence[SessionStructure], training=False, rng=None, **kw) -> Tensor:
        """Item scores ``(B, n)`` before the softmax."""
        return score_items(self.session_vectors(structs, training, rng, **kw), self.params["item_table"])

    def predict_proba(self, structs: Sequence[SessionStructure]) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self.logits(structs), axis=1).data

    def batch_loss(self, structs, targets, training=True, rng=None) -> Tensor:
        probs = T.softmax(self.logits(structs, training, rng), axis=1)
        return loss(probs, targets, self.hp.loss_mode)

    def scores(self, structs: Sequence[SessionStructure]) -> np.ndarray:
        with T.no_grad():
            return self.logits(structs).data

    # persistence --------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"kind": "trasa-checkpoint", "hyperparams": asdict(self.hp), "seed": self.seed}
        meta.update(extra_meta or {})
        serialization.save(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> tuple["TrasaModel", dict]:
        tensors, meta = serialization.load(path)
        if meta.get("kind") != "trasa-checkpoint":
            raise serialization.FormatError("file is not a model checkpoint")
        hp = TrasaHyperparams(**meta["hyperparams"])
        expected = parameter_shapes(hp)
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise serialization.FormatError(f"checkpoint parameters mismatch: missing={missing} unexpected={extra}")
        params = {}
        for name, shape in expected.items():
            arr = tensors[name]
            if tuple(arr.shape) != shape:
                raise serialization.FormatError(f"{name}: shape {arr.shape} != expected {shape}")
            params[name] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
        return cls(hp, seed=meta.get("seed", 0), params=params), meta


__all__ = [
    "EdgeType", "TrasaHyperparams", "TrasaModel", "Relation", "SessionStructure", "RelationContext",
    "gru_cell", "encode_paths", "encode_relation", "attention_scores", "relation_scores",
    "encoder_layer", "session_readout", "soft_attention_readout", "score_items", "score_and_predict",
    "loss", "parameter_shapes", "init_parameters",
]
