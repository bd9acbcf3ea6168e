"""
Vocabulary, annotated corpus files, and the token/mention masking procedures.
"""
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import SEPARATOR_TOKEN, SPECIAL_TOKENS
from exceptions import DataFormatError
from logger import setup_logger
from models import AnnotatedSequence, MaskedSequence, Mention
from utils import ceil_count

logger = setup_logger(__name__)

MASK_ID, CLS_ID, EOS_ID, PAD_ID, UNK_ID = range(len(SPECIAL_TOKENS))
NUM_SPECIAL = len(SPECIAL_TOKENS)
SEPARATOR_ID = NUM_SPECIAL
FIRST_CONTENT_ID = SEPARATOR_ID + 1

# Share of selected positions turned into [MASK] / a random token; the rest stay unchanged
MASK_SHARE = 0.8
RANDOM_SHARE = 0.1


class Vocabulary:
    """
    Ordered token list; special tokens occupy ids 0-4 and the separator id 5.
    """

    def __init__(self, tokens: Iterable[str]):
        content = [t for t in tokens if t not in SPECIAL_TOKENS and t != SEPARATOR_TOKEN]
        self.tokens: List[str] = list(SPECIAL_TOKENS) + [SEPARATOR_TOKEN] + content
        self.index = {}
        for i, token in enumerate(self.tokens):
            if token in self.index:
                raise ValueError(f"duplicate vocabulary token: {token!r}")
            self.index[token] = i

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def separator_id(self) -> int:
        return self.index[SEPARATOR_TOKEN]

    @property
    def first_content_id(self) -> int:
        """Lowest id a random replacement token may take."""
        return FIRST_CONTENT_ID

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def lookup(self, token_id: int) -> str:
        return self.tokens[token_id]

    def encode(self, words: Sequence[str]) -> List[int]:
        return [self.id(w) for w in words]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    @classmethod
    def from_file(cls, path: str) -> 'Vocabulary':
        """One token per line; the line number is the id."""
        with open(path, 'r', encoding='utf-8') as f:
            tokens = [line.rstrip('\n') for line in f]
        if tokens[:NUM_SPECIAL + 1] != SPECIAL_TOKENS + [SEPARATOR_TOKEN]:
            raise DataFormatError("vocabulary must start with the special tokens", path=path, line_number=1)
        return cls(tokens)

    def to_file(self, path: str) -> str:
        with open(path, 'w', encoding='utf-8') as f:
            f.write("\n".join(self.tokens) + "\n")
        return path


def tokenize(text: str, vocab: Vocabulary) -> List[int]:
    """Whitespace-split ``text``, map unknown words to [UNK], wrap with [CLS] ... [EOS]."""
    return [CLS_ID] + vocab.encode(text.split()) + [EOS_ID]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Inverse of ``tokenize`` for in-vocabulary text."""
    body = list(ids)
    if body and body[0] == CLS_ID:
        body = body[1:]
    if body and body[-1] == EOS_ID:
        body = body[:-1]
    return " ".join(vocab.decode(body))


def load_corpus(path: str, vocab: Vocabulary) -> List[AnnotatedSequence]:
    sequences = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            sequences.append(AnnotatedSequence.from_line(line, vocab, path=path, line_number=line_number))
    logger.info("Loaded %s sequences from %s", len(sequences), path)
    return sequences


def write_corpus(sequences: Sequence[AnnotatedSequence], vocab: Vocabulary, path: str) -> str:
    with open(path, 'w', encoding='utf-8') as f:
        for seq in sequences:
            f.write(seq.to_line(vocab) + "\n")
    return path


def usable_positions(tokens: Sequence[int]) -> List[int]:
    """Positions eligible for token masking: content tokens only, never specials or the separator."""
    return [i for i, t in enumerate(tokens) if t >= FIRST_CONTENT_ID]


def mask_tokens(
    tokens: Sequence[int],
    vocab_size: int,
    rate: float = 0.15,
    seed: int = 0,
) -> Tuple[List[int], List[Tuple[int, int]]]:
    """
    BERT-style corruption of ceil(rate * usable) positions.

    Of the selected positions 80% become [MASK], 10% a random content token and
    10% stay unchanged (exact when the count is a multiple of 10).

    Returns:
        (corrupted tokens, [(position, original id), ...] sorted by position)
    """
    if not 0 < rate < 1:
        raise ValueError(f"mask rate must be in (0, 1), got {rate}")
    rng = np.random.default_rng(seed)
    corrupted = list(tokens)
    usable = usable_positions(tokens)
    count = ceil_count(rate, len(usable)) if usable else 0
    if count == 0:
        return corrupted, []

    chosen = [usable[i] for i in rng.choice(len(usable), size=count, replace=False)]
    n_mask = int(round(MASK_SHARE * count))
    n_random = int(round(RANDOM_SHARE * count))
    if n_mask + n_random > count:
        n_random = count - n_mask
    for rank, position in enumerate(chosen):
        if rank < n_mask:
            corrupted[position] = MASK_ID
        elif rank < n_mask + n_random:
            corrupted[position] = int(rng.integers(FIRST_CONTENT_ID, vocab_size))
    targets = sorted((position, int(tokens[position])) for position in chosen)
    return corrupted, targets


def mask_mentions(
    mentions: Sequence[Mention],
    rate: float = 0.15,
    seed: int = 0,
) -> Tuple[List[Mention], List[Mention]]:
    """
    Hide the entity link of ceil(rate * M) mentions; their tokens stay in the text.

    Returns:
        (visible, masked), both in original order
    """
    if not 0 <= rate < 1:
        raise ValueError(f"mention mask rate must be in [0, 1), got {rate}")
    count = ceil_count(rate, len(mentions))
    if count == 0:
        return list(mentions), []
    rng = np.random.default_rng(seed)
    hidden = set(rng.choice(len(mentions), size=count, replace=False).tolist())
    visible = [m for i, m in enumerate(mentions) if i not in hidden]
    masked = [m for i, m in enumerate(mentions) if i in hidden]
    return visible, masked


def mask_sequence(seq: AnnotatedSequence, vocab_size: int, token_rate: float, mention_rate: float,
                  seed: int) -> MaskedSequence:
    """Token and mention masking sampled independently from one seed."""
    rng = np.random.default_rng(seed)
    token_seed, mention_seed = (int(s) for s in rng.integers(0, 2 ** 31 - 1, size=2))
    tokens, targets = mask_tokens(seq.tokens, vocab_size, token_rate, token_seed)
    visible, masked = mask_mentions(seq.mentions, mention_rate, mention_seed)
    return MaskedSequence(tokens=tokens, targets=targets, visible=visible, masked=masked)


def description_window(
    tokens: Sequence[int],
    mentions: Optional[Sequence[Tuple[int, int]]] = None,
    max_len: int = 64,
) -> Tuple[List[int], Tuple[int, int]]:
    """
    Clip a description to ``max_len`` tokens and pick the self-mention indices.

    The first mention is used; if there is none, or it does not survive the
    clipping, the indices fall back to (1, 1).
    """
    clipped = list(tokens)
    if len(clipped) > max_len:
        clipped = clipped[:max_len - 1] + [EOS_ID]
    fallback = (1, 1)
    if not mentions:
        return clipped, fallback
    start, end = mentions[0]
    if 1 <= start <= end <= len(clipped) - 2:
        return clipped, (start, end)
    return clipped, fallback
