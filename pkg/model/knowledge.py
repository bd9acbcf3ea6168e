"""
Multi-relational graph attention over sampled subgraphs.

Messages compose a neighbor embedding with its relation embedding by addition;
attention compares the projected query entity with each projected message.
"""
from typing import Optional

import numpy as np

from config import RELATION_MODES
from exceptions import ShapeError
from graph_store import Subgraph
from model.layers import LayerNorm, Module, init_normal
from numerics import Parameter, Tensor, elu, leaky_relu, no_grad, segment_softmax, segment_sum


def compose(x: Tensor, y: Optional[Tensor]) -> Tensor:
    """f(x, y) = x + y; ``y`` None leaves ``x`` as is."""
    if y is None:
        return x
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError(f"compose widths differ: {x.shape} vs {y.shape}")
    return x + y


class GatLayer(Module):
    """
    K attention heads sharing one F x F projection, split into K blocks of F/K.
    """

    def __init__(self, width: int, heads: int, rng: np.random.Generator, std: float, eps: float):
        if width % heads:
            raise ShapeError(f"{heads} heads do not divide width {width}")
        self.heads = heads
        self.head_width = width // heads
        self.weight = Parameter(init_normal(rng, (width, width), std), name='weight')
        self.attend_query = Parameter(init_normal(rng, (heads, self.head_width), std), name='attend_query')
        self.attend_neighbor = Parameter(init_normal(rng, (heads, self.head_width), std), name='attend_neighbor')
        self.norm = LayerNorm(width, eps)

    def _project(self, x: Tensor) -> Tensor:
        return (x @ self.weight).reshape(x.shape[0], self.heads, self.head_width)

    def scores(self, e_prev: Tensor, dst: np.ndarray, src: np.ndarray, relation: Optional[Tensor],
               num_dst: int):
        """Per-edge, per-head attention weights and projected messages."""
        messages = self._project(compose(e_prev[src], relation))
        queries = self._project(e_prev[np.arange(num_dst)])
        raw = (queries[dst] * self.attend_query).sum(axis=-1) + (messages * self.attend_neighbor).sum(axis=-1)
        alpha = segment_softmax(leaky_relu(raw), dst, num_dst)
        return alpha, messages

    def __call__(self, e_prev: Tensor, dst: np.ndarray, src: np.ndarray, relation: Optional[Tensor],
                 num_dst: int) -> Tensor:
        if e_prev.shape[0] < num_dst or (len(src) and src.max() >= e_prev.shape[0]):
            raise ShapeError(f"{e_prev.shape[0]} source embeddings do not cover the layer's nodes")
        alpha, messages = self.scores(e_prev, dst, src, relation, num_dst)
        weighted = messages * alpha.reshape(alpha.shape[0], self.heads, 1)
        aggregated = segment_sum(weighted, dst, num_dst).reshape(num_dst, self.heads * self.head_width)
        return self.norm(elu(aggregated) + e_prev[np.arange(num_dst)])


class KnowledgeModule(Module):
    """
    Stack of GAT layers plus the learned forward/inverse direction offsets.

    Relation embeddings come from outside (the relation context memory) and are
    constants here; ``relation_mode`` decides how they enter the messages.
    """

    def __init__(self, width: int, num_layers: int, heads: int, rng: np.random.Generator, std: float,
                 eps: float = 1e-5):
        self.width = width
        self.layers = [GatLayer(width, heads, rng, std, eps) for _ in range(num_layers)]
        self.direction = Parameter(init_normal(rng, (2, width), std), name='direction')

    def relation_vectors(self, rel: np.ndarray, inv: np.ndarray, mode: str,
                         relation_table: Optional[np.ndarray]) -> Optional[Tensor]:
        if mode not in RELATION_MODES:
            raise ValueError(f"relation mode must be one of {RELATION_MODES}, got {mode!r}")
        if mode == 'none':
            return None
        offsets = self.direction[inv]
        if mode == 'zero':
            return offsets
        if relation_table is None:
            raise ValueError("relation mode 'context' needs a relation table")
        return Tensor(np.asarray(relation_table)[rel]) + offsets

    def forward(self, subgraph: Subgraph, e0: Tensor, mode: str = 'none',
                relation_table: Optional[np.ndarray] = None) -> Tensor:
        """
        Embeddings of the subgraph's targets after every layer.

        ``e0`` holds one row per subgraph node (at least the outermost layer).

        Raises:
            ShapeError: fewer hop layers than GAT layers, or too few input rows
        """
        depth = len(self.layers)
        if subgraph.hops < depth:
            raise ShapeError(f"subgraph has {subgraph.hops} hop layer(s), module needs {depth}")
        needed = subgraph.layer_sizes[depth]
        if e0.shape[0] < needed:
            raise ShapeError(f"E0 has {e0.shape[0]} rows, subgraph layer needs {needed}")

        order = np.lexsort((subgraph.inv, subgraph.rel, subgraph.nodes[subgraph.src], subgraph.dst))
        dst, src = subgraph.dst[order], subgraph.src[order]
        rel, inv = subgraph.rel[order], subgraph.inv[order]

        e = e0[np.arange(needed)]
        for i, layer in enumerate(self.layers):
            num_dst = subgraph.layer_sizes[depth - 1 - i]
            keep = dst < num_dst
            relation = self.relation_vectors(rel[keep], inv[keep], mode, relation_table)
            e = layer(e, dst[keep], src[keep], relation, num_dst)
        return e

    def attention_weights(self, subgraph: Subgraph, e0: Tensor, layer_index: int = 0, mode: str = 'none',
                          relation_table: Optional[np.ndarray] = None) -> np.ndarray:
        """Attention of the outermost layer (or ``layer_index``) in subgraph edge order, (edges, K)."""
        depth = len(self.layers)
        with no_grad():
            e = e0[np.arange(subgraph.layer_sizes[depth])]
            for i, layer in enumerate(self.layers[:layer_index + 1]):
                num_dst = subgraph.layer_sizes[depth - 1 - i]
                keep = subgraph.dst < num_dst
                relation = self.relation_vectors(subgraph.rel[keep], subgraph.inv[keep], mode, relation_table)
                if i == layer_index:
                    alpha, _ = layer.scores(e, subgraph.dst[keep], subgraph.src[keep], relation, num_dst)
                    return alpha.data
                e = layer(e, subgraph.dst[keep], subgraph.src[keep], relation, num_dst)
        raise IndexError(f"layer index {layer_index} outside {depth} layers")
