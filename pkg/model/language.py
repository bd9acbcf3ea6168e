"""
Decomposed transformer language module.

LM1 (layers below the split) encodes text and entity descriptions; knowledge
embeddings are fused at mention positions; LM2 (layers above the split)
produces the final token representations.
"""
from typing import List, Optional, Sequence, Tuple

import numpy as np

from corpus import PAD_ID
from exceptions import ShapeError
from model.layers import Embedding, LayerNorm, Linear, Module
from numerics import Tensor, gelu, index_add, no_grad, softmax
from utils import pad_sequences

# Additive score for padded keys; exp underflows to exactly 0 in float64
PAD_SCORE = -1e30

FusionSpan = Tuple[int, int, int, int]  # (batch row, start, end, entity row)


class TransformerLayer(Module):
    """Post-LayerNorm block: self-attention then GELU feed-forward, each with a residual."""

    def __init__(self, width: int, heads: int, ffn_width: int, rng: np.random.Generator, std: float,
                 eps: float):
        if width % heads:
            raise ShapeError(f"{heads} heads do not divide width {width}")
        self.heads = heads
        self.query = Linear(width, width, rng, std)
        self.key = Linear(width, width, rng, std)
        self.value = Linear(width, width, rng, std)
        self.output = Linear(width, width, rng, std)
        self.attention_norm = LayerNorm(width, eps)
        self.ffn_in = Linear(width, ffn_width, rng, std)
        self.ffn_out = Linear(ffn_width, width, rng, std)
        self.ffn_norm = LayerNorm(width, eps)

    def _split_heads(self, x: Tensor) -> Tensor:
        batch, length, width = x.shape
        return x.reshape(batch, length, self.heads, width // self.heads).transpose(0, 2, 1, 3)

    def attention(self, x: Tensor, pad_mask: np.ndarray) -> Tuple[Tensor, Tensor]:
        batch, length, width = x.shape
        q = self._split_heads(self.query(x))
        k = self._split_heads(self.key(x))
        v = self._split_heads(self.value(x))
        scale = 1.0 / np.sqrt(width // self.heads)
        bias = np.where(pad_mask, 0.0, PAD_SCORE)[:, None, None, :]
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + bias
        weights = softmax(scores, axis=-1)
        context = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, length, width)
        return self.output(context), weights

    def __call__(self, x: Tensor, pad_mask: np.ndarray) -> Tuple[Tensor, Tensor]:
        attended, weights = self.attention(x, pad_mask)
        h = self.attention_norm(x + attended)
        out = self.ffn_norm(h + self.ffn_out(gelu(self.ffn_in(h))))
        return out, weights


class LanguageModule(Module):
    """
    Token and learned position embeddings plus a transformer stack split at ``split``.

    Args:
        vocab_size: token table rows
        width: model width F, equal to the knowledge embedding width
        num_layers: total transformer layers
        split: layers [0, split) form LM1, the rest LM2
    """

    def __init__(self, vocab_size: int, width: int, num_layers: int, split: int, heads: int,
                 max_len: int, ffn_multiplier: int, rng: np.random.Generator, std: float,
                 eps: float = 1e-5):
        if not 0 < split < num_layers:
            raise ShapeError(f"split {split} must fall strictly inside {num_layers} layers")
        self.width = width
        self.split = split
        self.max_len = max_len
        self.token_embedding = Embedding(vocab_size, width, rng, std)
        self.position_embedding = Embedding(max_len, width, rng, std)
        self.embedding_norm = LayerNorm(width, eps)
        self.layers = [
            TransformerLayer(width, heads, ffn_multiplier * width, rng, std, eps)
            for _ in range(num_layers)
        ]
        self.fusion_norm = LayerNorm(width, eps)

    def embed(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError(f"token ids must be (batch, length), got {ids.shape}")
        if ids.shape[1] > self.max_len:
            raise ShapeError(f"sequence length {ids.shape[1]} exceeds max_len {self.max_len}")
        positions = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
        return self.embedding_norm(self.token_embedding(ids) + self.position_embedding(positions))

    def run_layers(self, x: Tensor, pad_mask: np.ndarray, start: int, stop: int) -> Tuple[Tensor, List[Tensor]]:
        weights = []
        for layer in self.layers[start:stop]:
            x, w = layer(x, pad_mask)
            weights.append(w)
        return x, weights

    def lm1_forward(self, ids: np.ndarray, pad_mask: Optional[np.ndarray] = None) -> Tensor:
        pad_mask = default_mask(ids, pad_mask)
        z, _ = self.run_layers(self.embed(ids), pad_mask, 0, self.split)
        return z

    def lm2_forward(self, z: Tensor, pad_mask: np.ndarray) -> Tensor:
        if z.shape[1] > self.max_len:
            raise ShapeError(f"sequence length {z.shape[1]} exceeds max_len {self.max_len}")
        out, _ = self.run_layers(z, pad_mask, self.split, len(self.layers))
        return out

    def forward_full(self, ids: np.ndarray, pad_mask: Optional[np.ndarray] = None) -> Tensor:
        """Undecomposed stack: every layer in one pass, no fusion."""
        pad_mask = default_mask(ids, pad_mask)
        out, _ = self.run_layers(self.embed(ids), pad_mask, 0, len(self.layers))
        return out

    def attention_weights(self, ids: np.ndarray, pad_mask: Optional[np.ndarray] = None) -> List[np.ndarray]:
        """Per-layer attention weights (batch, heads, length, length) of the full stack."""
        pad_mask = default_mask(ids, pad_mask)
        with no_grad():
            _, weights = self.run_layers(self.embed(ids), pad_mask, 0, len(self.layers))
        return [w.data for w in weights]

    def fuse(self, z: Tensor, spans: Sequence[FusionSpan], entity_embeddings: Optional[Tensor]) -> Tensor:
        """LayerNorm of ``merge_mentions``."""
        return self.fusion_norm(merge_mentions(z, spans, entity_embeddings))

    def encode_descriptions(self, descriptions: Sequence[Sequence[int]],
                            spans: Sequence[Tuple[int, int]]) -> Tensor:
        """
        (Z_s + Z_o) / 2 from LM1 for each description, as an (n, F) tensor.
        """
        ids = pad_sequences(descriptions, PAD_ID)
        mask = lengths_mask([len(d) for d in descriptions], ids.shape[1])
        z = self.lm1_forward(ids, mask)
        rows = np.arange(len(descriptions))
        starts = np.asarray([s for s, _ in spans], dtype=np.int64)
        ends = np.asarray([o for _, o in spans], dtype=np.int64)
        lengths = np.asarray([len(d) for d in descriptions])
        if np.any(starts < 0) or np.any(ends >= lengths) or np.any(starts > ends):
            raise ShapeError("description span outside its sequence")
        return (z[rows, starts] + z[rows, ends]) * 0.5

    def encode_description(self, tokens: Sequence[int], span: Tuple[int, int]) -> Tensor:
        return self.encode_descriptions([tokens], [span])[0]


def merge_mentions(z: Tensor, spans: Sequence[FusionSpan], entity_embeddings: Optional[Tensor]) -> Tensor:
    """
    Add ``entity_embeddings[row]`` to every token inside each mention span.

    Positions outside all spans are returned unchanged.

    Raises:
        ShapeError: span outside the sequence
    """
    if not spans:
        return z
    batch, length, width = z.shape
    positions, sources = [], []
    for b, start, end, entity_row in spans:
        if not (0 <= b < batch and 0 <= start <= end < length):
            raise ShapeError(f"mention span ({start}, {end}) outside sequence of length {length}")
        for k in range(start, end + 1):
            positions.append(b * length + k)
            sources.append(entity_row)
    flat = z.reshape(batch * length, width)
    merged = index_add(flat, np.asarray(positions), entity_embeddings[np.asarray(sources)])
    return merged.reshape(batch, length, width)


def lengths_mask(lengths: Sequence[int], width: int) -> np.ndarray:
    return np.arange(width)[None, :] < np.asarray(lengths)[:, None]


def default_mask(ids: np.ndarray, pad_mask: Optional[np.ndarray]) -> np.ndarray:
    if pad_mask is not None:
        return np.asarray(pad_mask, dtype=bool)
    return np.asarray(ids) != PAD_ID
