"""
Joint pre-training: the four self-supervised losses, batch assembly and the training loop.
"""
import csv
import math
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import METRICS_HEADER, SHOW_PROGRESS, TrainConfig
from corpus import PAD_ID, mask_mentions, mask_sequence
from exceptions import NonFiniteLossError
from graph_store import NO_LABEL, KnowledgeGraph, random_walk, sample_neighborhood
from logger import setup_logger
from memory import EntityMemory, maybe_refresh, retrieve
from model import JaketModel
from model.heads import TaskHeads
from model.language import lengths_mask
from models import AnnotatedSequence, MaskedSequence, StepReport
from numerics import AdamW, LrSchedule, Tensor, cross_entropy, no_grad
from utils import derive_seed, make_rng, pad_sequences

logger = setup_logger(__name__)

LOSS_NAMES = ('c', 'r', 't', 'e')

MentionSpan = Tuple[int, int, int]  # (batch row, start, end)


@dataclass
class PretrainBatch:
    """Everything one step samples, fixed before any forward pass."""
    km_entities: np.ndarray
    triplets: np.ndarray
    sequences: List[MaskedSequence]
    ids: np.ndarray
    pad_mask: np.ndarray
    subgraph_seed: int
    candidate_seed: int

    @property
    def fusion_entities(self) -> List[int]:
        return sorted({m.entity for seq in self.sequences for m in seq.visible})


def build_optimizer(model: JaketModel, config: TrainConfig) -> AdamW:
    """AdamW with the LM and KM parameter groups on their own schedules."""
    schedules = {
        'lm': LrSchedule(config.lr_lm, config.warmup_lm, config.total_steps),
        'km': LrSchedule(config.lr_km, config.warmup_km, config.total_steps),
    }
    return AdamW(
        model.parameter_groups(),
        schedules,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )


def split_heldout(corpus: Sequence[AnnotatedSequence], fraction: float, seed: int = 0
                  ) -> Tuple[List[AnnotatedSequence], List[AnnotatedSequence]]:
    """(train, held-out) sequences; the held-out share is used only for masked-entity hits."""
    count = int(round(fraction * len(corpus)))
    if count == 0 or count >= len(corpus):
        return list(corpus), []
    held = set(np.random.default_rng(seed).choice(len(corpus), size=count, replace=False).tolist())
    train = [s for i, s in enumerate(corpus) if i not in held]
    heldout = [s for i, s in enumerate(corpus) if i in held]
    return train, heldout


def assemble_batch(kg: KnowledgeGraph, corpus: Sequence[AnnotatedSequence], config: TrainConfig,
                   vocab_size: int, step: int) -> PretrainBatch:
    """
    Sample the KM entity batch (roots plus random walks), its triplets, and the
    masked text batch. Draws depend only on (train_seed, step).
    """
    rng = make_rng(config.train_seed, step)
    n = kg.num_entities
    roots = rng.choice(n, size=min(config.km_batch_roots, n), replace=False)
    walk = random_walk(kg, roots, config.walk_length, seed=derive_seed(rng))
    entities = walk.entities

    heads, tails = kg.triplets[:, 0], kg.triplets[:, 2]
    inside = np.flatnonzero(np.isin(heads, entities) & np.isin(tails, entities))
    if len(inside) > config.relation_batch:
        inside = np.sort(rng.choice(inside, size=config.relation_batch, replace=False))
    triplets = kg.triplets[inside]

    picks = rng.choice(len(corpus), size=config.lm_batch, replace=len(corpus) < config.lm_batch)
    sequences = [
        mask_sequence(corpus[i], vocab_size, config.token_mask_rate, config.mention_mask_rate,
                      seed=derive_seed(rng))
        for i in picks
    ]
    ids = pad_sequences([s.tokens for s in sequences], PAD_ID)
    pad_mask = lengths_mask([len(s.tokens) for s in sequences], ids.shape[1])
    return PretrainBatch(
        km_entities=entities,
        triplets=triplets,
        sequences=sequences,
        ids=ids,
        pad_mask=pad_mask,
        subgraph_seed=derive_seed(rng),
        candidate_seed=derive_seed(rng),
    )


def knowledge_embeddings(model: JaketModel, memory: EntityMemory, kg: KnowledgeGraph, targets: Sequence[int],
                         config: TrainConfig, seed: int, mode: str,
                         relation_table: Optional[np.ndarray] = None) -> Tuple[Tensor, Dict[int, int]]:
    """E_KM for ``targets`` over their sampled neighborhoods, and entity -> row."""
    subgraph = sample_neighborhood(kg, targets, hops=config.hops, fanout=config.fanout, seed=seed)
    e0 = retrieve(memory, subgraph.nodes)
    e_km = model.knowledge.forward(subgraph, e0, mode, relation_table)
    return e_km, {int(e): i for i, e in enumerate(subgraph.targets)}


# -- losses ---------------------------------------------------------------

def loss_entity_category(heads: TaskHeads, e_km: Tensor, labels: np.ndarray) -> Optional[Tensor]:
    """Mean cross-entropy over labeled rows; None (with a warning) when nothing is labeled."""
    labels = np.asarray(labels, dtype=np.int64)
    labeled = np.flatnonzero(labels != NO_LABEL)
    if not len(labeled):
        logger.warning("No labeled entity in the batch; category loss contributes 0")
        return None
    return cross_entropy(heads.category_logits(e_km[labeled]), labels[labeled])


def loss_relation_type(heads: TaskHeads, head_rows: Tensor, tail_rows: Tensor,
                       relations: np.ndarray) -> Optional[Tensor]:
    if not len(relations):
        logger.warning("No triplet inside the entity batch; relation loss contributes 0")
        return None
    return cross_entropy(heads.relation_logits(head_rows, tail_rows), relations)


def loss_masked_token(heads: TaskHeads, z_lm: Tensor, targets: Sequence[Tuple[int, int, int]]) -> Optional[Tensor]:
    """Cross-entropy at corrupted positions only; ``targets`` are (batch row, position, original id)."""
    if not targets:
        return None
    rows = np.asarray([b for b, _, _ in targets])
    positions = np.asarray([p for _, p, _ in targets])
    originals = np.asarray([t for _, _, t in targets])
    return cross_entropy(heads.token_logits(z_lm[rows, positions]), originals)


def candidate_set(kg: KnowledgeGraph, gold: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """
    Gold first, then its neighbors, then uniform random entities; min(count, N) distinct ids.
    """
    count = min(count, kg.num_entities)
    near = np.unique(kg.incident(gold)[:, 1])
    near = rng.permutation(near[near != gold])[:count - 1]
    chosen = np.concatenate([[gold], near]).astype(np.int64)
    if len(chosen) < count:
        pool = np.setdiff1d(np.arange(kg.num_entities), chosen)
        extra = rng.choice(pool, size=count - len(chosen), replace=False)
        chosen = np.concatenate([chosen, extra])
    return chosen


def entity_scores(heads: TaskHeads, z_lm: Tensor, spans: Sequence[MentionSpan], memory: EntityMemory,
                  candidates: np.ndarray) -> Tensor:
    """Inner products of g((Z_s + Z_o) / 2) with the candidates' memory rows, (M, C)."""
    rows = np.asarray([b for b, _, _ in spans])
    starts = np.asarray([s for _, s, _ in spans])
    ends = np.asarray([o for _, _, o in spans])
    queries = heads.project((z_lm[rows, starts] + z_lm[rows, ends]) * 0.5)
    keys = retrieve(memory, candidates)
    return (keys * queries.reshape(len(spans), 1, queries.shape[-1])).sum(axis=-1)


def loss_masked_entity(heads: TaskHeads, z_lm: Tensor, masked: Sequence[Tuple[int, int, int, int]],
                       memory: EntityMemory, kg: KnowledgeGraph, num_candidates: int,
                       rng: np.random.Generator) -> Optional[Tensor]:
    """``masked`` rows are (batch row, start, end, gold entity); the gold sits at candidate 0."""
    if not masked:
        return None
    candidates = np.stack([candidate_set(kg, gold, num_candidates, rng) for _, _, _, gold in masked])
    scores = entity_scores(heads, z_lm, [(b, s, o) for b, s, o, _ in masked], memory, candidates)
    return cross_entropy(scores, np.zeros(len(masked), dtype=np.int64))


# -- step -----------------------------------------------------------------

def language_forward(model: JaketModel, ids: np.ndarray, pad_mask: np.ndarray,
                     sequences: Sequence[MaskedSequence], e_km: Optional[Tensor], row_of: Dict[int, int]) -> Tensor:
    """LM1, fusion of visible mentions, LM2."""
    spans = [(b, m.start, m.end, row_of[m.entity]) for b, seq in enumerate(sequences) for m in seq.visible]
    z = model.language.lm1_forward(ids, pad_mask)
    z = model.language.fuse(z, spans, e_km)
    return model.language.lm2_forward(z, pad_mask)


def compute_losses(model: JaketModel, memory: EntityMemory, kg: KnowledgeGraph, batch: PretrainBatch,
                   config: TrainConfig, phases: Sequence[str] = ('km', 'lm'), mode: Optional[str] = None,
                   relation_table: Optional[np.ndarray] = None) -> Dict[str, Optional[Tensor]]:
    """
    Forward every enabled loss of the requested phases; absent losses map to None.

    The fusion entities share one subgraph forward with the KM batch.
    """
    mode = mode or config.relation_mode_pretrain
    losses: Dict[str, Optional[Tensor]] = dict.fromkeys(LOSS_NAMES)
    targets: List[int] = []
    if 'km' in phases:
        targets.extend(int(e) for e in batch.km_entities)
    if 'lm' in phases:
        targets.extend(batch.fusion_entities)
    e_km, row_of = (None, {})
    if targets:
        e_km, row_of = knowledge_embeddings(model, memory, kg, targets, config, batch.subgraph_seed,
                                            mode, relation_table)

    if 'km' in phases:
        km_rows = np.asarray([row_of[int(e)] for e in batch.km_entities])
        if config.use_loss_c:
            losses['c'] = loss_entity_category(model.heads, e_km[km_rows], kg.categories[batch.km_entities])
        if config.use_loss_r:
            heads = np.asarray([row_of[int(h)] for h in batch.triplets[:, 0]], dtype=np.int64)
            tails = np.asarray([row_of[int(t)] for t in batch.triplets[:, 2]], dtype=np.int64)
            losses['r'] = loss_relation_type(model.heads, e_km[heads], e_km[tails], batch.triplets[:, 1])

    if 'lm' in phases and (config.use_loss_t or config.use_loss_e):
        z_lm = language_forward(model, batch.ids, batch.pad_mask, batch.sequences, e_km, row_of)
        if config.use_loss_t:
            targets_t = [(b, p, t) for b, seq in enumerate(batch.sequences) for p, t in seq.targets]
            losses['t'] = loss_masked_token(model.heads, z_lm, targets_t)
        if config.use_loss_e:
            masked = [(b, m.start, m.end, m.entity) for b, seq in enumerate(batch.sequences) for m in seq.masked]
            losses['e'] = loss_masked_entity(model.heads, z_lm, masked, memory, kg, config.num_candidates,
                                             np.random.default_rng(batch.candidate_seed))
    return losses


def total_loss(losses: Dict[str, Optional[Tensor]]) -> Optional[Tensor]:
    """Equal-weight sum of the present components."""
    present = [losses[name] for name in LOSS_NAMES if losses[name] is not None]
    if not present:
        return None
    total = present[0]
    for term in present[1:]:
        total = total + term
    return total


def step_phases(config: TrainConfig, step: int) -> Tuple[str, ...]:
    if config.alternate_steps:
        return ('km',) if step % 2 == 0 else ('lm',)
    return ('km', 'lm')


def pretrain_step(model: JaketModel, optimizer: AdamW, memory: EntityMemory, kg: KnowledgeGraph,
                  corpus: Sequence[AnnotatedSequence], config: TrainConfig, step: int,
                  relation_table: Optional[np.ndarray] = None) -> StepReport:
    """
    One optimizer step on the summed losses, then the scheduled memory refresh.

    Raises:
        NonFiniteLossError: any loss component is NaN or infinite
    """
    vocab_size = model.language.token_embedding.table.shape[0]
    batch = assemble_batch(kg, corpus, config, vocab_size, step)
    losses = compute_losses(model, memory, kg, batch, config, step_phases(config, step),
                            relation_table=relation_table)
    values = {name: (losses[name].item() if losses[name] is not None else 0.0) for name in LOSS_NAMES}
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(step, values)

    total = total_loss(losses)
    model.zero_grad()
    if total is None:
        logger.warning("Step %s produced no loss term; skipping the update", step)
        rates = optimizer.rates(step)
    else:
        total.backward()
        rates = optimizer.step(step)
    refreshed = maybe_refresh(memory, model.language, step)
    return StepReport(
        step=step,
        loss_c=values['c'],
        loss_r=values['r'],
        loss_t=values['t'],
        loss_e=values['e'],
        lr_lm=rates['lm'],
        lr_km=rates['km'],
        refreshed=refreshed,
    )


def prepare_metrics(path: str, start_step: int) -> None:
    """Create the metrics CSV, or cut an existing one back to rows before ``start_step``."""
    kept = []
    if start_step > 0 and os.path.exists(path):
        with open(path, 'r', encoding='utf-8', newline='') as f:
            rows = list(csv.reader(f))
        kept = [row for row in rows[1:] if row and int(row[0]) < start_step]
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        writer.writerows(kept)


def train(model: JaketModel, optimizer: AdamW, memory: EntityMemory, kg: KnowledgeGraph,
          corpus: Sequence[AnnotatedSequence], config: TrainConfig, start_step: int, end_step: int,
          metrics_path: Optional[str] = None, on_checkpoint: Optional[Callable[[int], None]] = None,
          relation_table: Optional[np.ndarray] = None) -> List[StepReport]:
    """
    Run steps ``start_step .. end_step - 1``, appending one metrics row per step.

    ``on_checkpoint(next_step)`` is called every ``checkpoint_every`` steps and
    after the last step; nothing is saved for a step that failed.
    """
    if metrics_path:
        prepare_metrics(metrics_path, start_step)
    reports = []
    progress = tqdm(range(start_step, end_step), desc='Pre-training', disable=not SHOW_PROGRESS)
    for step in progress:
        try:
            report = pretrain_step(model, optimizer, memory, kg, corpus, config, step, relation_table)
        except NonFiniteLossError as exc:
            logger.error("Aborting: %s", exc)
            raise
        reports.append(report)
        if metrics_path:
            with open(metrics_path, 'a', encoding='utf-8', newline='') as f:
                csv.writer(f).writerow(report.to_row())
        progress.set_postfix(loss=f"{report.total:.3f}")
        if config.log_every and (step + 1) % config.log_every == 0:
            logger.info(
                "step %s: total %.4f (c %.4f, r %.4f, t %.4f, e %.4f), memory updates %s",
                step, report.total, report.loss_c, report.loss_r, report.loss_t, report.loss_e, memory.updates,
            )
        if on_checkpoint and ((step + 1) % config.checkpoint_every == 0 or step + 1 == end_step):
            on_checkpoint(step + 1)
    return reports


def masked_entity_hits(model: JaketModel, memory: EntityMemory, kg: KnowledgeGraph,
                       sequences: Sequence[AnnotatedSequence], config: TrainConfig, seed: int = 0,
                       mode: Optional[str] = None, relation_table: Optional[np.ndarray] = None) -> Tuple[float, int]:
    """
    hits@1 of masked entity prediction on untouched text.

    Mentions are hidden at the training rate (at least one per sequence with
    mentions); visible ones are fused as in training.

    Returns:
        (hits@1, number of scored mentions)
    """
    mode = mode or config.relation_mode_pretrain
    rng = np.random.default_rng(seed)
    hits, total = 0, 0
    with no_grad():
        for start in range(0, len(sequences), config.lm_batch):
            chunk = [s for s in sequences[start:start + config.lm_batch] if s.mentions]
            if not chunk:
                continue
            masked_seqs = []
            for seq in chunk:
                visible, masked = mask_mentions(seq.mentions, config.mention_mask_rate, seed=derive_seed(rng))
                masked_seqs.append(MaskedSequence(list(seq.tokens), [], visible, masked))
            ids = pad_sequences([s.tokens for s in masked_seqs], PAD_ID)
            pad_mask = lengths_mask([len(s.tokens) for s in masked_seqs], ids.shape[1])
            fusion = sorted({m.entity for s in masked_seqs for m in s.visible})
            e_km, row_of = (None, {})
            if fusion:
                e_km, row_of = knowledge_embeddings(model, memory, kg, fusion, config, derive_seed(rng),
                                                    mode, relation_table)
            z_lm = language_forward(model, ids, pad_mask, masked_seqs, e_km, row_of)
            spans = [(b, m.start, m.end) for b, s in enumerate(masked_seqs) for m in s.masked]
            golds = [m.entity for s in masked_seqs for m in s.masked]
            if not spans:
                continue
            candidates = np.stack([candidate_set(kg, g, config.num_candidates, rng) for g in golds])
            scores = entity_scores(model.heads, z_lm, spans, memory, candidates).data
            # ties with any distractor count as misses
            hits += int(np.sum(scores[:, 0] > scores[:, 1:].max(axis=1, initial=-np.inf)))
            total += len(spans)
    return (hits / total if total else 0.0), total
