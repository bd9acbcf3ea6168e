"""
Knowledge-graph storage, validation, neighbor access, neighborhood sampling and random walks.
"""
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from exceptions import DataFormatError, GraphValidationError
from logger import setup_logger
from models import CLS_ID, EOS_ID

logger = setup_logger(__name__)

NO_LABEL = -1
NO_SPAN = '-'


@dataclass
class KnowledgeGraph:
    """
    Entities, relations, triplets and the text attached to them.

    ``categories[e]`` is -1 for unlabeled entities. ``entity_spans[e]`` is the
    self-mention inside the entity description, or None. ``global_ids`` maps
    local entity ids back to the world the graph was cut from.
    """
    num_entities: int
    num_relations: int
    num_categories: int
    triplets: np.ndarray
    categories: np.ndarray
    entity_descriptions: List[List[int]]
    relation_descriptions: List[List[int]]
    entity_spans: List[Optional[Tuple[int, int]]] = field(default_factory=list)
    global_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.triplets = np.asarray(self.triplets, dtype=np.int64).reshape(-1, 3)
        self.categories = np.asarray(self.categories, dtype=np.int64)
        if not self.entity_spans:
            self.entity_spans = [None] * self.num_entities
        if self.global_ids is None:
            self.global_ids = np.arange(self.num_entities, dtype=np.int64)
        else:
            self.global_ids = np.asarray(self.global_ids, dtype=np.int64)
        self.validate()
        self._build_adjacency()

    def validate(self) -> None:
        """
        Raises:
            GraphValidationError: id out of range, duplicate triplet, bad label or description
        """
        n, p = self.num_entities, self.num_relations
        if n <= 0 or p <= 0:
            raise GraphValidationError(f"graph needs entities and relations, got N={n}, P={p}")
        if len(self.categories) != n or len(self.entity_descriptions) != n:
            raise GraphValidationError("per-entity arrays must have one row per entity")
        if len(self.entity_spans) != n or len(self.global_ids) != n:
            raise GraphValidationError("per-entity arrays must have one row per entity")
        if len(self.relation_descriptions) != p:
            raise GraphValidationError("relation descriptions must have one row per relation")

        if len(self.triplets):
            heads, rels, tails = self.triplets.T
            if heads.min() < 0 or heads.max() >= n or tails.min() < 0 or tails.max() >= n:
                raise GraphValidationError(f"triplet entity id outside [0, {n})")
            if rels.min() < 0 or rels.max() >= p:
                raise GraphValidationError(f"triplet relation id outside [0, {p})")
            unique = np.unique(self.triplets, axis=0)
            if len(unique) != len(self.triplets):
                raise GraphValidationError(
                    f"{len(self.triplets) - len(unique)} duplicate triplet(s)"
                )

        labeled = self.categories[self.categories != NO_LABEL]
        if len(labeled) and (labeled.min() < 0 or labeled.max() >= self.num_categories):
            raise GraphValidationError(f"category label outside [0, {self.num_categories})")

        for kind, descriptions in (('entity', self.entity_descriptions),
                                   ('relation', self.relation_descriptions)):
            for i, tokens in enumerate(descriptions):
                if len(tokens) < 2 or tokens[0] != CLS_ID or tokens[-1] != EOS_ID:
                    raise GraphValidationError(
                        f"{kind} {i} description must begin with [CLS] and end with [EOS]"
                    )

    def _build_adjacency(self) -> None:
        """Per-entity incident edges as (relation, other end, inverse flag), sorted."""
        n = self.num_entities
        if len(self.triplets):
            heads, rels, tails = self.triplets.T
            forward = np.stack([heads, rels, tails, np.zeros_like(heads)], axis=1)
            inverse = np.stack([tails, rels, heads, np.ones_like(heads)], axis=1)
            edges = np.concatenate([forward, inverse])
            edges = edges[np.lexsort((edges[:, 3], edges[:, 2], edges[:, 1], edges[:, 0]))]
        else:
            edges = np.zeros((0, 4), dtype=np.int64)
        bounds = np.searchsorted(edges[:, 0], np.arange(n + 1))
        self._incident = [edges[bounds[v]:bounds[v + 1], 1:] for v in range(n)]

    @property
    def num_triplets(self) -> int:
        return len(self.triplets)

    def degree(self, v: int) -> int:
        return len(self._incident[v])

    def incident(self, v: int) -> np.ndarray:
        """(relation, neighbor, inverse) rows for both edge directions at ``v``."""
        self._check_entity(v)
        return self._incident[v]

    def labeled_entities(self) -> np.ndarray:
        return np.flatnonzero(self.categories != NO_LABEL)

    def _check_entity(self, v: int) -> None:
        if not 0 <= v < self.num_entities:
            raise GraphValidationError(f"entity id {v} outside [0, {self.num_entities})")

    def equals(self, other: 'KnowledgeGraph') -> bool:
        """Field-by-field equality."""
        return (
            self.num_entities == other.num_entities
            and self.num_relations == other.num_relations
            and self.num_categories == other.num_categories
            and np.array_equal(self.triplets, other.triplets)
            and np.array_equal(self.categories, other.categories)
            and [list(d) for d in self.entity_descriptions] == [list(d) for d in other.entity_descriptions]
            and [list(d) for d in self.relation_descriptions] == [list(d) for d in other.relation_descriptions]
            and list(self.entity_spans) == list(other.entity_spans)
        )


@dataclass
class Subgraph:
    """
    Nested neighborhood of a target batch.

    ``nodes[:layer_sizes[h]]`` are the entities within h sampled hops of the
    targets; the first ``layer_sizes[0]`` are the targets themselves. Edges use
    local node indices: message from ``src`` to ``dst`` along ``rel``, with
    ``inv`` set when the triplet is traversed tail to head. Every node inside
    the inner layers carries its full sampled edge set.
    """
    nodes: np.ndarray
    layer_sizes: List[int]
    dst: np.ndarray
    src: np.ndarray
    rel: np.ndarray
    inv: np.ndarray

    @property
    def hops(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def targets(self) -> np.ndarray:
        return self.nodes[:self.layer_sizes[0]]

    def layer_edges(self, hop: int) -> np.ndarray:
        """Boolean mask of edges whose destination lies within ``hop`` hops."""
        return self.dst < self.layer_sizes[hop]

    def global_edges(self) -> np.ndarray:
        """(dst entity, relation, src entity, inverse) rows, for checking against the graph."""
        return np.stack([self.nodes[self.dst], self.rel, self.nodes[self.src], self.inv], axis=1)


@dataclass
class WalkBatch:
    walks: List[List[int]]
    entities: np.ndarray


def neighbors(kg: KnowledgeGraph, v: int) -> List[Tuple[int, int]]:
    """
    Sorted (relation, tail) pairs with (v, relation, tail) in the graph.

    Raises:
        GraphValidationError: ``v`` out of range
    """
    kg._check_entity(v)
    rows = kg.incident(v)
    forward = rows[rows[:, 2] == 0]
    return [(int(r), int(u)) for r, u in forward[:, :2]]


def sample_neighborhood(
    kg: KnowledgeGraph,
    targets: Sequence[int],
    hops: int = 2,
    fanout: Optional[int] = 10,
    seed: int = 0,
) -> Subgraph:
    """
    Sample min(fanout, degree) incident edges per node, hop by hop.

    Duplicate targets are collapsed, keeping first occurrence order. ``fanout``
    None keeps every edge (dense neighborhood).

    Raises:
        GraphValidationError: empty targets, bad hop count or fanout
    """
    targets = [int(t) for t in targets]
    if not targets:
        raise GraphValidationError("sample_neighborhood needs at least one target")
    if hops < 0:
        raise GraphValidationError(f"hops must be non-negative, got {hops}")
    if fanout is not None and fanout <= 0:
        raise GraphValidationError(f"fanout must be positive, got {fanout}")
    for t in targets:
        kg._check_entity(t)

    rng = np.random.default_rng(seed)
    position: Dict[int, int] = {}
    nodes: List[int] = []
    for t in targets:
        if t not in position:
            position[t] = len(nodes)
            nodes.append(t)

    layer_sizes = [len(nodes)]
    dst, src, rel, inv = [], [], [], []
    expanded = 0
    for _ in range(hops):
        frontier_end = len(nodes)
        for local in range(expanded, frontier_end):
            rows = kg.incident(nodes[local])
            if fanout is not None and len(rows) > fanout:
                picked = np.sort(rng.choice(len(rows), size=fanout, replace=False))
                rows = rows[picked]
            for r, u, flag in rows:
                u = int(u)
                if u not in position:
                    position[u] = len(nodes)
                    nodes.append(u)
                dst.append(local)
                src.append(position[u])
                rel.append(int(r))
                inv.append(int(flag))
        expanded = frontier_end
        layer_sizes.append(len(nodes))

    as_array = lambda values: np.asarray(values, dtype=np.int64)
    return Subgraph(
        nodes=as_array(nodes),
        layer_sizes=layer_sizes,
        dst=as_array(dst),
        src=as_array(src),
        rel=as_array(rel),
        inv=as_array(inv),
    )


def random_walk(kg: KnowledgeGraph, roots: Sequence[int], length: int, seed: int = 0) -> WalkBatch:
    """
    One walk of up to ``length`` moves per root along triplets in either direction.

    Walks stop early at isolated entities. The batch is the sorted union of
    visited entities.
    """
    if length < 0:
        raise GraphValidationError(f"walk length must be non-negative, got {length}")
    rng = np.random.default_rng(seed)
    walks = []
    for root in roots:
        kg._check_entity(int(root))
        walk = [int(root)]
        for _ in range(length):
            rows = kg.incident(walk[-1])
            if not len(rows):
                break
            walk.append(int(rows[rng.integers(len(rows)), 1]))
        walks.append(walk)
    visited = np.unique(np.asarray([v for w in walks for v in w], dtype=np.int64))
    return WalkBatch(walks=walks, entities=visited)


def reachable_within(kg: KnowledgeGraph, v: int, k: int) -> List[int]:
    """Entities at undirected distance 1..k from ``v``, sorted."""
    kg._check_entity(v)
    depth = {v: 0}
    queue = deque([v])
    while queue:
        current = queue.popleft()
        if depth[current] == k:
            continue
        for u in kg.incident(current)[:, 1]:
            u = int(u)
            if u not in depth:
                depth[u] = depth[current] + 1
                queue.append(u)
    return sorted(u for u in depth if u != v)


def induced_subgraph(kg: KnowledgeGraph, entities: Sequence[int]) -> KnowledgeGraph:
    """
    Graph on ``entities`` (re-indexed in ascending id order) with every triplet
    whose endpoints are both kept. Relation and category vocabularies are shared.
    """
    keep = np.unique(np.asarray(entities, dtype=np.int64))
    remap = np.full(kg.num_entities, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    heads, rels, tails = kg.triplets.T if len(kg.triplets) else (np.zeros(0, np.int64),) * 3
    inside = (remap[heads] >= 0) & (remap[tails] >= 0)
    triplets = np.stack([remap[heads[inside]], rels[inside], remap[tails[inside]]], axis=1)
    return KnowledgeGraph(
        num_entities=len(keep),
        num_relations=kg.num_relations,
        num_categories=kg.num_categories,
        triplets=triplets,
        categories=kg.categories[keep],
        entity_descriptions=[kg.entity_descriptions[e] for e in keep],
        relation_descriptions=list(kg.relation_descriptions),
        entity_spans=[kg.entity_spans[e] for e in keep],
        global_ids=kg.global_ids[keep],
    )


def split_unseen(kg: KnowledgeGraph, fraction: float = 0.2, seed: int = 0) -> Tuple[KnowledgeGraph, KnowledgeGraph]:
    """
    Partition entities into a pre-training graph and an unseen graph.

    The held-out side is grown by breadth-first expansion from a seeded root,
    restarting at a random remaining entity whenever a component runs out, so
    the unseen graph keeps internal structure. Triplets crossing the cut are
    dropped from both sides.

    Raises:
        GraphValidationError: fraction outside (0, 1) or one side would be empty
    """
    if not 0 < fraction < 1:
        raise GraphValidationError(f"unseen fraction must be in (0, 1), got {fraction}")
    target = int(round(fraction * kg.num_entities))
    if target == 0 or target == kg.num_entities:
        raise GraphValidationError(
            f"fraction {fraction} of {kg.num_entities} entities leaves one side empty"
        )

    rng = np.random.default_rng(seed)
    chosen = np.zeros(kg.num_entities, dtype=bool)
    count = 0
    queue = deque()
    while count < target:
        if not queue:
            remaining = np.flatnonzero(~chosen)
            root = int(remaining[rng.integers(len(remaining))])
            chosen[root] = True
            count += 1
            queue.append(root)
            continue
        current = queue.popleft()
        candidates = np.unique(kg.incident(current)[:, 1])
        for u in rng.permutation(candidates):
            if count >= target:
                break
            u = int(u)
            if not chosen[u]:
                chosen[u] = True
                count += 1
                queue.append(u)

    unseen_ids = np.flatnonzero(chosen)
    seen_ids = np.flatnonzero(~chosen)
    kg_pretrain = induced_subgraph(kg, seen_ids)
    kg_unseen = induced_subgraph(kg, unseen_ids)
    logger.info(
        "Split %s entities into %s pre-training (%s triplets) and %s unseen (%s triplets)",
        kg.num_entities, kg_pretrain.num_entities, kg_pretrain.num_triplets,
        kg_unseen.num_entities, kg_unseen.num_triplets,
    )
    return kg_pretrain, kg_unseen


def drop_triplets(kg: KnowledgeGraph, probability: float, seed: int = 0) -> KnowledgeGraph:
    """Copy of ``kg`` with each triplet independently removed with ``probability``."""
    if not 0 <= probability <= 1:
        raise GraphValidationError(f"drop probability must be in [0, 1], got {probability}")
    rng = np.random.default_rng(seed)
    keep = rng.random(kg.num_triplets) >= probability
    return KnowledgeGraph(
        num_entities=kg.num_entities,
        num_relations=kg.num_relations,
        num_categories=kg.num_categories,
        triplets=kg.triplets[keep],
        categories=kg.categories.copy(),
        entity_descriptions=kg.entity_descriptions,
        relation_descriptions=kg.relation_descriptions,
        entity_spans=kg.entity_spans,
        global_ids=kg.global_ids.copy(),
    )


# -- flat files ----------------------------------------------------------

def _parse_int(text: str, path: str, line_number: int, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataFormatError(f"{what} is not an integer: {text!r}", path=path, line_number=line_number)


def _parse_span(text: str, path: str, line_number: int) -> Optional[Tuple[int, int]]:
    if text == NO_SPAN:
        return None
    parts = text.split(':')
    if len(parts) != 2:
        raise DataFormatError(f"self-mention must be start:end, got {text!r}", path=path,
                              line_number=line_number)
    return _parse_int(parts[0], path, line_number, 'span start'), _parse_int(parts[1], path, line_number, 'span end')


def _read_lines(path: str) -> List[Tuple[int, List[str]]]:
    rows = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            text = line.rstrip('\n')
            if text.strip():
                rows.append((line_number, text.split('\t')))
    return rows


def load_graph(
    entity_path: str,
    relation_path: str,
    triplet_path: str,
    vocab,
    num_categories: Optional[int] = None,
) -> KnowledgeGraph:
    """
    Read the three tab-separated graph files.

    Entity lines: ``id  category|-  description tokens  [start:end|-]``.
    Relation lines: ``id  description tokens``. Triplet lines: ``head  relation  tail``.
    Ids must be dense and listed in order.

    Raises:
        DataFormatError: malformed line (with its line number)
        GraphValidationError: ids out of range or duplicate triplets
    """
    categories, descriptions, spans = [], [], []
    for line_number, parts in _read_lines(entity_path):
        if len(parts) not in (3, 4):
            raise DataFormatError(f"expected 3 or 4 fields, got {len(parts)}", path=entity_path,
                                  line_number=line_number)
        entity = _parse_int(parts[0], entity_path, line_number, 'entity id')
        if entity != len(descriptions):
            raise DataFormatError(f"entity id {entity} out of order, expected {len(descriptions)}",
                                  path=entity_path, line_number=line_number)
        label = NO_LABEL if parts[1] == '-' else _parse_int(parts[1], entity_path, line_number, 'category')
        categories.append(label)
        descriptions.append(vocab.encode(parts[2].split()))
        spans.append(_parse_span(parts[3], entity_path, line_number) if len(parts) == 4 else None)

    relation_descriptions = []
    for line_number, parts in _read_lines(relation_path):
        if len(parts) != 2:
            raise DataFormatError(f"expected 2 fields, got {len(parts)}", path=relation_path,
                                  line_number=line_number)
        relation = _parse_int(parts[0], relation_path, line_number, 'relation id')
        if relation != len(relation_descriptions):
            raise DataFormatError(f"relation id {relation} out of order", path=relation_path,
                                  line_number=line_number)
        relation_descriptions.append(vocab.encode(parts[1].split()))

    triplets = []
    for line_number, parts in _read_lines(triplet_path):
        if len(parts) != 3:
            raise DataFormatError(f"expected 3 fields, got {len(parts)}", path=triplet_path,
                                  line_number=line_number)
        triplet = tuple(_parse_int(p, triplet_path, line_number, 'triplet id') for p in parts)
        triplets.append(triplet)

    labels = [c for c in categories if c != NO_LABEL]
    if num_categories is None:
        num_categories = max(labels) + 1 if labels else 1
    kg = KnowledgeGraph(
        num_entities=len(descriptions),
        num_relations=len(relation_descriptions),
        num_categories=num_categories,
        triplets=np.asarray(triplets, dtype=np.int64).reshape(-1, 3),
        categories=np.asarray(categories, dtype=np.int64),
        entity_descriptions=descriptions,
        relation_descriptions=relation_descriptions,
        entity_spans=spans,
    )
    logger.info("Loaded graph: N=%s, P=%s, |T|=%s", kg.num_entities, kg.num_relations, kg.num_triplets)
    return kg


def write_graph(kg: KnowledgeGraph, vocab, entity_path: str, relation_path: str, triplet_path: str) -> None:
    with open(entity_path, 'w', encoding='utf-8') as f:
        for e in range(kg.num_entities):
            label = '-' if kg.categories[e] == NO_LABEL else str(int(kg.categories[e]))
            span = kg.entity_spans[e]
            span_text = NO_SPAN if span is None else f"{span[0]}:{span[1]}"
            tokens = " ".join(vocab.decode(kg.entity_descriptions[e]))
            f.write(f"{e}\t{label}\t{tokens}\t{span_text}\n")
    with open(relation_path, 'w', encoding='utf-8') as f:
        for r in range(kg.num_relations):
            f.write(f"{r}\t{' '.join(vocab.decode(kg.relation_descriptions[r]))}\n")
    with open(triplet_path, 'w', encoding='utf-8') as f:
        for h, r, t in kg.triplets:
            f.write(f"{h}\t{r}\t{t}\n")
