"""Message-passing networks on the dual graph of a mesh.

An L-layer model computes, for every layer,

    e'_k   = f_agg(edge inputs of k)
    ebar_r = sum_{k: r_k = r} e'_k
    h_r    = f_up(node inputs of r, ebar_r)

and the last ``h`` is the predicted next temperature. Three feature layouts
are supported (see :class:`FeatureScheme`); the temperature channels of the
edge and node inputs always hold the current ``h`` so deeper layers see the
updated state.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import diff
from .diff import Mlp, Tensor
from .fvm import Field
from .mesh import DualGraph, Mesh

__all__ = [
    "FeatureScheme",
    "MpsModel",
    "GraphBatch",
    "build_features",
    "mps_forward",
    "predict",
    "construct_exact_fvm_weights",
    "count_nonzero_params",
    "input_names",
    "save_checkpoint",
    "load_checkpoint",
]

TWO_HOP_WIDTH = 7


class FeatureScheme(str, enum.Enum):
    SIMPLIFIED = "simplified"
    PRIMITIVE = "primitive"
    TWO_HOP = "two-hop"


def input_names(scheme: FeatureScheme | str, layer: int = 0) -> dict[str, list[str]]:
    """Column names of the f_agg / f_up (/ f_agg2) inputs of ``layer`` (0-based)."""
    scheme = FeatureScheme(scheme)
    if scheme is FeatureScheme.SIMPLIFIED:
        return {"agg": ["beta"], "up": ["T", "dtV_ebar", "dtS"]}
    agg = ["T_N", "T_P", "A", "delta"]
    if scheme is FeatureScheme.TWO_HOP:
        return {"agg": agg, "up": ["T", "S", "dt", "V", "ebar", "ebar2"],
                "agg2": ["T_Q", "T_P", "S_Q", "g_PN", "g_NQ", "d_PNQ", "n_paths"]}
    up = ["T", "S", "dt", "V", "ebar"] if layer == 0 else ["h", "T", "S", "dt", "V", "ebar"]
    return {"agg": agg, "up": up}


def _widths(scheme: FeatureScheme, layer: int):
    names = input_names(scheme, layer)
    return len(names["agg"]), len(names["up"])


class MpsModel:
    """L layers of (f_agg, f_up) MLP pairs plus an optional 2-hop aggregator."""

    def __init__(self, L=1, m=2, d=32, variant="plain", scheme=FeatureScheme.SIMPLIFIED,
                 two_hop=False, seed=0, zero=False):
        scheme = FeatureScheme(scheme)
        if two_hop != (scheme is FeatureScheme.TWO_HOP):
            raise ValueError("the 2-hop aggregator requires the two-hop feature scheme and vice versa")
        if two_hop and L != 1:
            raise ValueError("the 2-hop architecture is single-layer")
        if L < 1:
            raise ValueError("L must be >= 1")
        self.L, self.m, self.d, self.variant, self.scheme, self.seed = L, m, d, variant, scheme, seed
        rng = np.random.default_rng(seed)
        self.layers: list[dict[str, Mlp]] = []
        for layer in range(L):
            n_agg, n_up = _widths(scheme, layer)
            self.layers.append({
                "agg": Mlp(n_agg, 1, m, d, variant, rng, zero),
                "up": Mlp(n_up, 1, m, d, variant, rng, zero),
            })
        self.agg2 = Mlp(TWO_HOP_WIDTH, 1, m, d, variant, rng, zero) if two_hop else None

    @property
    def has_two_hop(self) -> bool:
        return self.agg2 is not None

    def mlps(self):
        for i, layer in enumerate(self.layers):
            yield f"layer{i}.agg", layer["agg"]
            yield f"layer{i}.up", layer["up"]
        if self.agg2 is not None:
            yield "agg2", self.agg2

    def parameters(self) -> list[Tensor]:
        return [p for _, mlp in self.mlps() for p in mlp.parameters()]

    def architecture(self) -> dict:
        return {"L": self.L, "m": self.m, "d": self.d, "mlpVariant": self.variant,
                "featureScheme": self.scheme.value, "hasTwoHopAggregator": self.has_two_hop}

    def to_dict(self) -> dict:
        return {"architecture": self.architecture(), "seed": self.seed,
                "parameters": {name: mlp.to_dict() for name, mlp in self.mlps()}}

    @classmethod
    def from_dict(cls, doc) -> "MpsModel":
        a = doc["architecture"]
        model = cls(a["L"], a["m"], a["d"], a["mlpVariant"], a["featureScheme"],
                    a["hasTwoHopAggregator"], doc.get("seed", 0), zero=True)
        params = doc["parameters"]
        for i, layer in enumerate(model.layers):
            layer["agg"] = Mlp.from_dict(params[f"layer{i}.agg"])
            layer["up"] = Mlp.from_dict(params[f"layer{i}.up"])
        if model.agg2 is not None:
            model.agg2 = Mlp.from_dict(params["agg2"])
        return model


@dataclass(eq=False)
class GraphBatch:
    """Disjoint union of graphs, flattened into node / edge / 2-hop arrays."""

    n_nodes: int
    n_graphs: int
    graph_ids: np.ndarray
    T: np.ndarray
    S: np.ndarray
    dt: np.ndarray
    V: np.ndarray
    alpha: np.ndarray
    senders: np.ndarray  # -1 on boundary pseudo-edges
    receivers: np.ndarray
    area: np.ndarray
    delta: np.ndarray
    ghost: np.ndarray
    th_senders: np.ndarray
    th_receivers: np.ndarray
    th_geom: np.ndarray
    target: np.ndarray | None = None
    node_weight: np.ndarray = dc_field(default=None)  # 1 / (n_graphs * |V(G)|)

    @classmethod
    def from_graph(cls, mesh: Mesh, field: Field, target=None, graph: DualGraph | None = None):
        g = mesh.dual if graph is None else graph
        n = mesh.n_cells
        return cls(
            n_nodes=n, n_graphs=1, graph_ids=np.zeros(n, dtype=np.int64),
            T=field.T.copy(), S=field.S.copy(), dt=np.full(n, field.dt), V=mesh.volumes.copy(),
            alpha=np.full(n, field.alpha),
            senders=g.senders, receivers=g.receivers, area=g.edge_area, delta=g.edge_delta,
            ghost=g.ghost, th_senders=g.two_hop_senders, th_receivers=g.two_hop_receivers,
            th_geom=g.two_hop_geom,
            target=None if target is None else np.asarray(target, dtype=np.float64),
            node_weight=np.full(n, 1.0 / n),
        )

    @classmethod
    def concat(cls, parts: list["GraphBatch"]) -> "GraphBatch":
        if len(parts) == 1:
            return parts[0]
        offs = np.cumsum([0] + [p.n_nodes for p in parts])[:-1]
        gofs = np.cumsum([0] + [p.n_graphs for p in parts])[:-1]

        def cat(name):
            return np.concatenate([getattr(p, name) for p in parts])

        def shift(name, off_list):
            out = []
            for p, o in zip(parts, off_list):
                a = getattr(p, name)
                out.append(np.where(a >= 0, a + o, a))
            return np.concatenate(out)

        n_graphs = sum(p.n_graphs for p in parts)
        has_target = all(p.target is not None for p in parts)
        return cls(
            n_nodes=int(sum(p.n_nodes for p in parts)), n_graphs=n_graphs,
            graph_ids=np.concatenate([p.graph_ids + o for p, o in zip(parts, gofs)]),
            T=cat("T"), S=cat("S"), dt=cat("dt"), V=cat("V"), alpha=cat("alpha"),
            senders=shift("senders", offs), receivers=shift("receivers", offs),
            area=cat("area"), delta=cat("delta"), ghost=cat("ghost"),
            th_senders=shift("th_senders", offs), th_receivers=shift("th_receivers", offs),
            th_geom=np.concatenate([p.th_geom for p in parts]).reshape(-1, 4),
            target=cat("target") if has_target else None,
            node_weight=np.concatenate([p.node_weight * p.n_graphs for p in parts]) / n_graphs,
        )

    @property
    def edge_alpha(self) -> np.ndarray:
        return self.alpha[self.receivers]

    @property
    def inner(self) -> np.ndarray:
        return self.senders >= 0


def _col(a):
    return Tensor(np.asarray(a, dtype=np.float64).reshape(-1, 1))


def _sender_values(h: Tensor, batch: GraphBatch) -> Tensor:
    inner = batch.inner
    hs = diff.gather(h, np.where(inner, batch.senders, 0))
    return hs * _col(inner.astype(np.float64)) + _col(np.where(inner, 0.0, batch.ghost))


def _layer_inputs(batch: GraphBatch, scheme: FeatureScheme, h: Tensor, layer: int):
    """Edge inputs for f_agg and a builder for the node inputs of f_up."""
    hs = _sender_values(h, batch)
    hr = diff.gather(h, batch.receivers)
    T0, S, dt, V = _col(batch.T), _col(batch.S), _col(batch.dt), _col(batch.V)
    if scheme is FeatureScheme.SIMPLIFIED:
        coef = _col(batch.edge_alpha * batch.area / batch.delta)
        edge_in = coef * (hs - hr)

        def node_in(ebar, ebar2=None):
            return diff.concat([h, _col(batch.dt / batch.V) * ebar, _col(batch.dt * batch.S)])

        return edge_in, node_in
    edge_in = diff.concat([hs, hr, _col(batch.area), _col(batch.delta)])

    def node_in(ebar, ebar2=None):
        cols = [h] if layer == 0 else [h, T0]
        cols += [S, dt, V, ebar]
        if ebar2 is not None:
            cols.append(ebar2)
        return diff.concat(cols)

    return edge_in, node_in


def _two_hop_inputs(batch: GraphBatch, h: Tensor) -> Tensor:
    tq = diff.gather(h, batch.th_senders)
    tp = diff.gather(h, batch.th_receivers)
    sq = _col(batch.S[batch.th_senders])
    return diff.concat([tq, tp, sq, Tensor(batch.th_geom)])


def mps_forward(model: MpsModel, batch: GraphBatch, trace: list | None = None) -> Tensor:
    """Predicted next-step temperature per node, shape ``(n, 1)``.

    When ``trace`` is a list, one dict per layer with the numpy inputs and
    outputs of every MLP is appended to it.
    """
    h = _col(batch.T)
    for layer, mlps in enumerate(model.layers):
        edge_in, node_in = _layer_inputs(batch, model.scheme, h, layer)
        msg = mlps["agg"](edge_in)
        ebar = diff.segment_sum(msg, batch.receivers, batch.n_nodes)
        rec = {"agg_in": edge_in.data, "agg_out": msg.data}
        ebar2 = None
        if layer == 0 and model.agg2 is not None:
            in2 = _two_hop_inputs(batch, h)
            msg2 = model.agg2(in2)
            ebar2 = diff.segment_sum(msg2, batch.th_receivers, batch.n_nodes)
            rec.update(agg2_in=in2.data, agg2_out=msg2.data)
        up_in = node_in(ebar, ebar2)
        h = mlps["up"](up_in)
        rec.update(up_in=up_in.data, up_out=h.data)
        if trace is not None:
            trace.append(rec)
    return h


def predict(model: MpsModel, batch: GraphBatch) -> np.ndarray:
    return mps_forward(model, batch).data[:, 0]


def build_features(scheme: FeatureScheme | str, mesh: Mesh, field: Field,
                   graph: DualGraph | None = None) -> dict[str, np.ndarray]:
    """Input node / edge (/ 2-hop) features of the first layer.

    Simplified: node ``[T, dt S, dt/V]``, edge ``alpha (A/delta)(T_N - T_P)``.
    Primitive: node ``[T, S, dt, V]``, edge ``[T_N, T_P, A, delta]``.
    Two-hop: Primitive plus ``[T_Q, T_P, S_Q, mean A_PN/d_PN, mean A_NQ/d_NQ,
    mean (d_PN + d_NQ), path count]`` per 2-hop pair.
    """
    scheme = FeatureScheme(scheme)
    batch = GraphBatch.from_graph(mesh, field, graph=graph)
    h = _col(batch.T)
    edge_in, _ = _layer_inputs(batch, scheme, h, 0)
    if scheme is FeatureScheme.SIMPLIFIED:
        node = np.stack([batch.T, batch.dt * batch.S, batch.dt / batch.V], axis=1)
    else:
        node = np.stack([batch.T, batch.S, batch.dt, batch.V], axis=1)
    out = {"node": node, "edge": edge_in.data}
    if scheme is FeatureScheme.TWO_HOP:
        out["two_hop"] = _two_hop_inputs(batch, h).data
    return out


# ------------------------------------------------------------ exact weights

def _identity_pair_mlp(n_in, m, d, first_rows):
    """Plain MLP carrying a signed scalar through ReLUs with +/-1 weight pairs.

    ``first_rows`` is the input row feeding the positive unit; the negative
    unit gets its negation.
    """
    mlp = Mlp(n_in, 1, m, d, "plain", zero=True)
    W = mlp.layers[0]["W"].data
    W[0, :] = first_rows
    W[1, :] = -np.asarray(first_rows)
    for layer in mlp.layers[1:-1]:
        layer["W"].data[0, 0] = 1.0
        layer["W"].data[1, 1] = 1.0
    mlp.layers[-1]["W"].data[0, :2] = [1.0, -1.0]
    return mlp


def construct_exact_fvm_weights(L: int, m: int, d: int) -> MpsModel:
    """Sparse Simplified-feature model that reproduces the first-order scheme exactly.

    Layer 1 aggregates the edge term through +/-1 identity pairs and sums the
    three node inputs; layers 2..L pass the temperature through unchanged.
    Uses exactly ``2 m (L + 1) + 4`` non-zero parameters.
    """
    if L < 1 or m < 2:
        raise ValueError("construction needs L >= 1 and m >= 2")
    if d < 2:
        raise ValueError("identity pairs need width d >= 2")
    model = MpsModel(L, m, d, "plain", FeatureScheme.SIMPLIFIED, zero=True)
    model.layers[0]["agg"] = _identity_pair_mlp(1, m, d, [1.0])
    model.layers[0]["up"] = _identity_pair_mlp(3, m, d, [1.0, 1.0, 1.0])
    for layer in model.layers[1:]:
        layer["agg"] = Mlp(1, 1, m, d, "plain", zero=True)
        layer["up"] = _identity_pair_mlp(3, m, d, [1.0, 0.0, 0.0])
    return model


def count_nonzero_params(model: MpsModel, threshold: float = 0.0) -> int:
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    return int(sum(np.count_nonzero(np.abs(p.data) > threshold) for p in model.parameters()))


# -------------------------------------------------------------- checkpoints

def save_checkpoint(model: MpsModel, path, normalization: dict | None = None, extra: dict | None = None):
    doc = model.to_dict()
    doc["normalization"] = normalization or {}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Return ``(model, document)``."""
    doc = json.loads(Path(path).read_text())
    return MpsModel.from_dict(doc), doc
