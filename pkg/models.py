"""
Data models shared across the JAKET desk trainer
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from config import SPECIAL_TOKENS
from exceptions import DataFormatError

CLS_ID = SPECIAL_TOKENS.index('[CLS]')
EOS_ID = SPECIAL_TOKENS.index('[EOS]')


@dataclass(frozen=True)
class Mention:
    """
    A token span linked to a KG entity. ``start`` and ``end`` are zero-based and inclusive.
    """
    entity: int
    start: int
    end: int

    @classmethod
    def parse(cls, text: str) -> 'Mention':
        """Parse ``entityId:start:end``."""
        parts = text.split(':')
        if len(parts) != 3:
            raise ValueError(f"mention must be entity:start:end, got {text!r}")
        entity, start, end = (int(p) for p in parts)
        return cls(entity, start, end)

    def to_text(self) -> str:
        return f"{self.entity}:{self.start}:{self.end}"

    @property
    def span(self) -> Tuple[int, int]:
        return self.start, self.end


@dataclass
class AnnotatedSequence:
    """
    Token ids wrapped in [CLS] ... [EOS] plus the entity mentions they contain.
    """
    tokens: List[int]
    mentions: List[Mention] = field(default_factory=list)

    def validate(self, max_len: Optional[int] = None) -> None:
        """
        Raises:
            ValueError: wrapper tokens missing, span outside the content, overlapping spans
        """
        if len(self.tokens) < 2 or self.tokens[0] != CLS_ID or self.tokens[-1] != EOS_ID:
            raise ValueError("sequence must begin with [CLS] and end with [EOS]")
        if max_len is not None and len(self.tokens) > max_len:
            raise ValueError(f"sequence length {len(self.tokens)} exceeds {max_len}")
        last = len(self.tokens) - 1
        occupied = set()
        for m in self.mentions:
            if not 1 <= m.start <= m.end < last:
                raise ValueError(f"mention {m.to_text()} outside content positions 1..{last - 1}")
            span = set(range(m.start, m.end + 1))
            if occupied & span:
                raise ValueError(f"mention {m.to_text()} overlaps another mention")
            occupied |= span

    @classmethod
    def from_line(cls, line: str, vocab, path: str = None, line_number: int = None) -> 'AnnotatedSequence':
        """
        Parse one corpus line: space-separated tokens, TAB, semicolon-separated mentions.

        Raises:
            DataFormatError: with the line number when the line does not parse or validate
        """
        text = line.rstrip('\n')
        token_part, _, mention_part = text.partition('\t')
        try:
            tokens = vocab.encode(token_part.split())
            mentions = [Mention.parse(m) for m in mention_part.split(';') if m.strip()]
            seq = cls(tokens, mentions)
            seq.validate()
        except ValueError as exc:
            raise DataFormatError(str(exc), path=path, line_number=line_number) from exc
        return seq

    def to_line(self, vocab) -> str:
        return " ".join(vocab.decode(self.tokens)) + "\t" + ";".join(m.to_text() for m in self.mentions)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class MaskedSequence:
    """
    One corrupted training sequence.

    ``targets`` are (position, original id) pairs of corrupted positions; the
    visible/masked mention lists partition the original mentions.
    """
    tokens: List[int]
    targets: List[Tuple[int, int]]
    visible: List[Mention]
    masked: List[Mention]


@dataclass(frozen=True)
class Question:
    """A templated KGQA question with exactly one mention."""
    tokens: Tuple[int, ...]
    mention: Mention
    answer: int
    candidates: Tuple[int, ...]
    hops: int

    @classmethod
    def from_line(cls, line: str, vocab, path: str = None, line_number: int = None) -> 'Question':
        """Parse ``tokens TAB mention TAB answer TAB candidates TAB hops``."""
        parts = line.rstrip('\n').split('\t')
        if len(parts) != 5:
            raise DataFormatError(f"expected 5 fields, got {len(parts)}", path=path, line_number=line_number)
        try:
            return cls(
                tokens=tuple(vocab.encode(parts[0].split())),
                mention=Mention.parse(parts[1]),
                answer=int(parts[2]),
                candidates=tuple(int(c) for c in parts[3].split()),
                hops=int(parts[4]),
            )
        except ValueError as exc:
            raise DataFormatError(str(exc), path=path, line_number=line_number) from exc

    def to_line(self, vocab) -> str:
        return "\t".join([
            " ".join(vocab.decode(self.tokens)),
            self.mention.to_text(),
            str(self.answer),
            " ".join(str(c) for c in self.candidates),
            str(self.hops),
        ])


@dataclass(frozen=True)
class RelationInstance:
    """A sentence realizing one triplet, used by the few-shot episodes."""
    sequence: AnnotatedSequence
    relation: int
    source_index: int


@dataclass
class Episode:
    """
    N-way K-shot episode. ``support[c]`` holds the K instances of class ``c``;
    ``relations[c]`` is that class's relation id.
    """
    relations: List[int]
    support: List[List[RelationInstance]]
    queries: List[RelationInstance]
    labels: List[int]

    @property
    def n_way(self) -> int:
        return len(self.relations)

    @property
    def k_shot(self) -> int:
        return len(self.support[0]) if self.support else 0


@dataclass
class EpisodeSet:
    train: List[Episode]
    test: List[Episode]
    train_relations: List[int]
    test_relations: List[int]


@dataclass
class StepReport:
    """Losses and schedule state of one pre-training step."""
    step: int
    loss_c: float
    loss_r: float
    loss_t: float
    loss_e: float
    lr_lm: float
    lr_km: float
    refreshed: bool = False

    @property
    def total(self) -> float:
        return self.loss_c + self.loss_r + self.loss_t + self.loss_e

    def to_row(self) -> List[str]:
        return [
            str(self.step),
            repr(self.total),
            repr(self.loss_c),
            repr(self.loss_r),
            repr(self.loss_t),
            repr(self.loss_e),
            repr(self.lr_lm),
            repr(self.lr_km),
            '1' if self.refreshed else '0',
        ]


@dataclass(frozen=True)
class EvalReport:
    """One evaluation row: ``task,config,split,metric,value,seed``."""
    task: str
    config: str
    split: str
    metric: str
    value: float
    seed: int

    def to_row(self) -> List[str]:
        return [self.task, self.config, self.split, self.metric, repr(self.value), str(self.seed)]


MEMORY_INITS = ('random', 'lm-encoded')
WEIGHT_SOURCES = ('fresh', 'pretrained')


@dataclass(frozen=True)
class AblationConfig:
    """
    One rung of the baseline ladder.

    fresh+random is the plain GNN baseline, *+lm-encoded the memory-equipped
    baselines, pretrained+lm-encoded the full jointly pre-trained model.
    """
    memory_init: str
    weights: str

    def __post_init__(self):
        if self.memory_init not in MEMORY_INITS:
            raise ValueError(f"memory_init must be one of {MEMORY_INITS}")
        if self.weights not in WEIGHT_SOURCES:
            raise ValueError(f"weights must be one of {WEIGHT_SOURCES}")

    @property
    def label(self) -> str:
        return f"{self.weights}+{self.memory_init}"

    @classmethod
    def grid(cls) -> List['AblationConfig']:
        return [cls(memory, weights) for weights in WEIGHT_SOURCES for memory in MEMORY_INITS]
