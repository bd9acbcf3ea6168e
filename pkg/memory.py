"""
Entity and relation context embedding memories.

The entity memory caches LM1 description embeddings for every entity and is
refreshed on a growing interval with a momentum blend.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import SHOW_PROGRESS, TrainConfig
from corpus import description_window
from exceptions import CheckpointError, GraphValidationError
from graph_store import KnowledgeGraph
from logger import setup_logger
from model.language import LanguageModule
from numerics import Tensor, no_grad

logger = setup_logger(__name__)

DescriptionOverrides = Dict[int, Tuple[List[int], Tuple[int, int]]]


def schedule_T(i: int, init_interval: int = 10, ratio: int = 2, repeat: int = 3, max_interval: int = 500) -> int:
    """
    Optimizer steps between refresh ``i`` and refresh ``i + 1``.

    Examples:
        >>> [schedule_T(i) for i in range(7)]
        [10, 10, 10, 20, 20, 20, 40]
        >>> schedule_T(30)
        500
    """
    if i < 0:
        raise ValueError(f"update count must be non-negative, got {i}")
    # Integer arithmetic; cap the exponent so huge i cannot build a huge int
    exponent = i // repeat
    if ratio > 1 and exponent > max_interval.bit_length():
        return max_interval
    return min(init_interval * ratio ** exponent, max_interval)


@dataclass
class EntityMemory:
    """
    Cached (N, F) description embeddings.

    ``updates`` counts refreshes so far; ``steps_since`` counts optimizer steps
    since the last refresh (or the build). A frozen memory never refreshes.
    """
    matrix: np.ndarray
    descriptions: List[List[int]] = field(repr=False)
    spans: List[Tuple[int, int]] = field(repr=False)
    updates: int = 0
    steps_since: int = 0
    init_interval: int = 10
    ratio: int = 2
    repeat: int = 3
    max_interval: int = 500
    momentum: float = 0.8
    batch_size: int = 128
    frozen: bool = False

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.descriptions):
            raise ValueError("memory needs one description per row")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        for name in ('init_interval', 'ratio', 'repeat', 'max_interval', 'batch_size'):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def next_interval(self) -> int:
        return schedule_T(self.updates, self.init_interval, self.ratio, self.repeat, self.max_interval)

    def to_state(self) -> Dict[str, np.ndarray]:
        return {
            'matrix': self.matrix.copy(),
            'counters': np.asarray([self.updates, self.steps_since], dtype=np.int64),
        }

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        matrix = np.asarray(state['matrix'], dtype=np.float64)
        if matrix.shape != self.matrix.shape:
            raise CheckpointError(f"memory shape {matrix.shape} does not match {self.matrix.shape}")
        self.matrix = matrix.copy()
        self.updates, self.steps_since = (int(c) for c in state['counters'])


@dataclass
class RelationMemory:
    matrix: np.ndarray

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def description_inputs(kg: KnowledgeGraph, max_len: int,
                       overrides: Optional[DescriptionOverrides] = None) -> Tuple[List[List[int]], List[Tuple[int, int]]]:
    """Clipped entity descriptions and self-mention indices (fallback (1, 1))."""
    descriptions, spans = [], []
    for e in range(kg.num_entities):
        if overrides and e in overrides:
            tokens, span = overrides[e]
            mentions = [span]
        else:
            tokens = kg.entity_descriptions[e]
            mentions = [kg.entity_spans[e]] if kg.entity_spans[e] is not None else None
        if len(tokens) < 2:
            raise GraphValidationError(f"entity {e} has no description")
        clipped, span = description_window(tokens, mentions, max_len)
        descriptions.append(clipped)
        spans.append(span)
    return descriptions, spans


def encode_all(language: LanguageModule, descriptions: Sequence[Sequence[int]],
               spans: Sequence[Tuple[int, int]], batch_size: int, desc: str = 'Encoding descriptions') -> np.ndarray:
    """LM1 description embeddings for every row, batch by batch, without recording gradients."""
    rows = []
    starts = range(0, len(descriptions), batch_size)
    with no_grad():
        for start in tqdm(starts, desc=desc, disable=not SHOW_PROGRESS or len(starts) < 2, leave=False):
            stop = start + batch_size
            rows.append(language.encode_descriptions(descriptions[start:stop], spans[start:stop]).data)
    if not rows:
        return np.zeros((0, language.width))
    return np.concatenate(rows, axis=0)


def build_memory(language: LanguageModule, kg: KnowledgeGraph, config: TrainConfig,
                 overrides: Optional[DescriptionOverrides] = None, frozen: bool = False) -> EntityMemory:
    """Encode every entity description with the current LM1; update count starts at 0."""
    descriptions, spans = description_inputs(kg, config.description_max_len, overrides)
    matrix = encode_all(language, descriptions, spans, config.memory_batch)
    logger.info("Built entity memory for %s entities (width %s)", matrix.shape[0], matrix.shape[1])
    return EntityMemory(
        matrix=matrix,
        descriptions=descriptions,
        spans=spans,
        init_interval=config.memory_init_interval,
        ratio=config.memory_ratio,
        repeat=config.memory_repeat,
        max_interval=config.memory_max_interval,
        momentum=config.memory_momentum,
        batch_size=config.memory_batch,
        frozen=frozen,
    )


def build_random_memory(kg: KnowledgeGraph, config: TrainConfig, seed: int = 0, frozen: bool = True) -> EntityMemory:
    """Memory of standard-normal rows, the no-text baseline."""
    descriptions, spans = description_inputs(kg, config.description_max_len)
    rng = np.random.default_rng(seed)
    return EntityMemory(
        matrix=rng.normal(0.0, 1.0, size=(kg.num_entities, config.hidden_size)),
        descriptions=descriptions,
        spans=spans,
        momentum=config.memory_momentum,
        batch_size=config.memory_batch,
        frozen=frozen,
    )


def build_relation_memory(language: LanguageModule, kg: KnowledgeGraph, config: TrainConfig) -> RelationMemory:
    """Relation description embeddings; relation texts carry no self-mention, so indices are (1, 1)."""
    descriptions, spans = [], []
    for tokens in kg.relation_descriptions:
        clipped, span = description_window(tokens, None, config.description_max_len)
        descriptions.append(clipped)
        spans.append(span)
    return RelationMemory(encode_all(language, descriptions, spans, config.memory_batch,
                                     desc='Encoding relations'))


def retrieve(memory: EntityMemory, entity_ids) -> Tensor:
    """
    Rows of the memory as a constant tensor (no gradient reaches LM1 through it).

    Raises:
        IndexError: an id outside the memory
    """
    ids = np.asarray(entity_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= memory.size):
        raise IndexError(f"entity id outside memory of {memory.size} rows")
    return Tensor(memory.matrix[ids])


def refresh(memory: EntityMemory, language: LanguageModule) -> None:
    """Blend freshly encoded rows into the memory and swap the matrix in whole."""
    fresh = encode_all(language, memory.descriptions, memory.spans, memory.batch_size,
                       desc='Refreshing memory')
    memory.matrix = memory.momentum * memory.matrix + (1.0 - memory.momentum) * fresh
    memory.updates += 1
    memory.steps_since = 0


def maybe_refresh(memory: EntityMemory, language: LanguageModule, step: int) -> bool:
    """
    Count one optimizer step; refresh once T(i) steps have passed since the last refresh.

    Returns:
        True when a refresh happened at this step
    """
    if memory.frozen:
        return False
    memory.steps_since += 1
    if memory.steps_since < memory.next_interval():
        return False
    refresh(memory, language)
    logger.debug("Memory refresh %s at step %s; next in %s steps", memory.updates, step, memory.next_interval())
    return True


def rebuild_for_unseen(language: LanguageModule, kg_unseen: KnowledgeGraph, config: TrainConfig,
                       overrides: Optional[DescriptionOverrides] = None) -> EntityMemory:
    """Fresh, frozen memory for a graph never seen in pre-training."""
    return build_memory(language, kg_unseen, config, overrides=overrides, frozen=True)
