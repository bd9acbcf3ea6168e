"""
Fine-tuning and evaluation on the unseen graph: entity classification, KGQA,
few-shot relation classification, and the baseline ablation grid.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from tqdm import tqdm

from config import SHOW_PROGRESS, TrainConfig
from corpus import CLS_ID, EOS_ID, PAD_ID
from exceptions import InsufficientDataError, LabelAccessError
from graph_store import KnowledgeGraph, drop_triplets, reachable_within
from logger import setup_logger
from memory import (
    EntityMemory,
    build_random_memory,
    build_relation_memory,
    rebuild_for_unseen,
    retrieve,
)
from model import JaketModel
from model.language import lengths_mask
from models import AblationConfig, Episode, EvalReport, MaskedSequence, Question, RelationInstance
from numerics import AdamW, LrSchedule, Parameter, Tensor, cross_entropy, no_grad
from pretrain import knowledge_embeddings, language_forward
from utils import ceil_count, make_rng, pad_sequences

logger = setup_logger(__name__)

SPLITS = (0.2, 0.2, 0.6)
TRAINING_FRACTIONS = (1.0, 0.2, 0.05)
DEGRADE_PROBABILITY = 0.5


# -- entity classification ------------------------------------------------

@dataclass
class EntitySplit:
    train: np.ndarray
    dev: np.ndarray
    test: np.ndarray


def split_entities(kg: KnowledgeGraph, splits: Tuple[float, float, float] = SPLITS, seed: int = 0) -> EntitySplit:
    """Partition the labeled entities into train/dev/test by the given shares."""
    if abs(sum(splits) - 1.0) > 1e-9:
        raise ValueError(f"splits must sum to 1, got {splits}")
    labeled = np.random.default_rng(seed).permutation(kg.labeled_entities())
    n_train = int(round(splits[0] * len(labeled)))
    n_dev = int(round(splits[1] * len(labeled)))
    return EntitySplit(
        train=labeled[:n_train],
        dev=labeled[n_train:n_train + n_dev],
        test=labeled[n_train + n_dev:],
    )


class LabelGuard:
    """
    Hands out category labels by split and records every access.

    Test labels stay locked until ``unlock_test`` is called after training.
    """

    def __init__(self, labels: np.ndarray, split: EntitySplit):
        self._labels = np.asarray(labels)
        self._allowed = {'train': set(split.train.tolist()), 'dev': set(split.dev.tolist()),
                         'test': set(split.test.tolist())}
        self.test_unlocked = False
        self.accessed: Dict[str, Set[int]] = {'train': set(), 'dev': set(), 'test': set()}

    def unlock_test(self) -> None:
        self.test_unlocked = True

    def labels(self, entities: Sequence[int], purpose: str) -> np.ndarray:
        """
        Raises:
            LabelAccessError: entities outside the purpose's split, or test labels before unlock
        """
        ids = [int(e) for e in entities]
        if purpose == 'test' and not self.test_unlocked:
            raise LabelAccessError("test labels requested before training finished")
        outside = set(ids) - self._allowed[purpose]
        if outside:
            raise LabelAccessError(f"{len(outside)} entity label(s) outside the {purpose} split")
        self.accessed[purpose].update(ids)
        return self._labels[ids]


def _entity_embeddings(model: JaketModel, memory: EntityMemory, kg: KnowledgeGraph, entities: Sequence[int],
                       config: TrainConfig, seed: int, mode: str, relation_table: Optional[np.ndarray],
                       use_knowledge: bool) -> Tensor:
    if not use_knowledge:
        return retrieve(memory, entities)
    e_km, row_of = knowledge_embeddings(model, memory, kg, entities, config, seed, mode, relation_table)
    return e_km[np.asarray([row_of[int(e)] for e in entities])]


def _accuracy(model, memory, kg, entities, labels, config, seed, mode, relation_table, use_knowledge) -> float:
    if not len(entities):
        return 0.0
    with no_grad():
        logits = model.heads.category_logits(
            _entity_embeddings(model, memory, kg, entities, config, seed, mode, relation_table, use_knowledge))
    return float(np.mean(np.argmax(logits.data, axis=1) == labels))


def _finetune_optimizer(params: List[Parameter], config: TrainConfig, steps: int) -> AdamW:
    """AdamW over ``params`` with a flat-then-decaying rate; moment slots start from zero."""
    for p in params:
        p.m = np.zeros_like(p.data)
        p.v = np.zeros_like(p.data)
        p.t = 0
    return AdamW(
        {'ft': params},
        {'ft': LrSchedule(config.finetune_lr, 0, max(steps, 1))},
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )


def finetune_entity_classification(model: JaketModel, kg: KnowledgeGraph, memory: EntityMemory,
                                   config: TrainConfig, fraction: float = 1.0, seed: int = 0,
                                   config_label: str = 'jaket', use_knowledge: bool = True,
                                   relation_table: Optional[np.ndarray] = None,
                                   guard_out: Optional[List[LabelGuard]] = None) -> List[EvalReport]:
    """
    Transductive category prediction on ``kg``: the whole graph is visible, the
    category head and knowledge module train on ceil(fraction * |train|) labels,
    the dev split picks the best evaluation point, the test split is scored once.

    ``use_knowledge`` False gives the text-only baseline (category head on memory rows).

    Raises:
        InsufficientDataError: the effective training set is empty
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"training fraction must be in (0, 1], got {fraction}")
    mode = config.relation_mode_finetune
    if use_knowledge and mode == 'context' and relation_table is None:
        relation_table = build_relation_memory(model.language, kg, config).matrix

    split = split_entities(kg, seed=seed)
    guard = LabelGuard(kg.categories, split)
    if guard_out is not None:
        guard_out.append(guard)
    train = split.train[:ceil_count(fraction, len(split.train))]
    if not len(train) or not len(split.dev):
        raise InsufficientDataError(
            f"entity classification needs train and dev entities, got {len(train)} and {len(split.dev)}"
        )
    train_labels = guard.labels(train, 'train')
    dev_labels = guard.labels(split.dev, 'dev')

    params = [p for name, p in model.named_parameters().items()
              if name.startswith('heads.category.') or (use_knowledge and name.startswith('knowledge.'))]
    steps = config.finetune_steps
    optimizer = _finetune_optimizer(params, config, steps)
    eval_seed = seed + 1
    best_dev, best_state = -1.0, None
    for step in tqdm(range(steps), desc='Fine-tuning categories', disable=not SHOW_PROGRESS, leave=False):
        embeddings = _entity_embeddings(model, memory, kg, train, config, int(make_rng(seed, step).integers(2 ** 31)),
                                        mode, relation_table, use_knowledge)
        loss = cross_entropy(model.heads.category_logits(embeddings), train_labels)
        model.zero_grad()
        loss.backward()
        optimizer.step(step)
        if (step + 1) % config.finetune_eval_every == 0 or step + 1 == steps:
            dev = _accuracy(model, memory, kg, split.dev, dev_labels, config, eval_seed, mode,
                            relation_table, use_knowledge)
            if dev > best_dev:
                best_dev, best_state = dev, {p.name: p.data.copy() for p in params}
    if best_state is not None:
        for p in params:
            p.data = best_state[p.name]
    else:
        best_dev = _accuracy(model, memory, kg, split.dev, dev_labels, config, eval_seed, mode,
                             relation_table, use_knowledge)

    guard.unlock_test()
    test = _accuracy(model, memory, kg, split.test, guard.labels(split.test, 'test'), config, eval_seed,
                     mode, relation_table, use_knowledge)
    task = f"entity-classification@{fraction:g}"
    logger.info("%s [%s] seed %s: dev %.3f, test %.3f", task, config_label, seed, best_dev, test)
    return [
        EvalReport(task, config_label, 'dev', 'accuracy', best_dev, seed),
        EvalReport(task, config_label, 'test', 'accuracy', test, seed),
    ]


# -- KGQA -------------------------------------------------------------------

def _question_batch(questions: Sequence[Question]):
    sequences = [MaskedSequence(list(q.tokens), [], [q.mention], []) for q in questions]
    ids = pad_sequences([s.tokens for s in sequences], PAD_ID)
    return sequences, ids, lengths_mask([len(s.tokens) for s in sequences], ids.shape[1])


def question_embeddings(model: JaketModel, memory: EntityMemory, kg: KnowledgeGraph,
                        questions: Sequence[Question], config: TrainConfig, seed: int, mode: str,
                        relation_table: Optional[np.ndarray]) -> Tensor:
    """[CLS] rows of the final LM output, with each question entity fused at its mention."""
    sequences, ids, mask = _question_batch(questions)
    entities = sorted({q.mention.entity for q in questions})
    e_km, row_of = knowledge_embeddings(model, memory, kg, entities, config, seed, mode, relation_table)
    z_lm = language_forward(model, ids, mask, sequences, e_km, row_of)
    return z_lm[np.arange(len(questions)), np.zeros(len(questions), dtype=np.int64)]


def candidate_scores(cls: Tensor, memory: EntityMemory, candidates: Sequence[int]) -> Tensor:
    """Inner product of one question embedding with each candidate's memory row."""
    return (retrieve(memory, candidates) * cls.reshape(1, cls.shape[-1])).sum(axis=-1)


def finetune_kgqa(model: JaketModel, kg: KnowledgeGraph, memory: EntityMemory, questions: Sequence[Question],
                  config: TrainConfig, seed: int = 0, relation_table: Optional[np.ndarray] = None) -> List[float]:
    """
    Train every parameter on cross-entropy over each question's candidate set.

    Returns:
        per-step mean loss
    """
    usable = [q for q in questions if q.answer in q.candidates]
    if not usable:
        raise InsufficientDataError("no training question has its answer among the candidates")
    mode = config.relation_mode_finetune
    if mode == 'context' and relation_table is None:
        relation_table = build_relation_memory(model.language, kg, config).matrix
    params = list(model.named_parameters().values())
    optimizer = _finetune_optimizer(params, config, config.qa_finetune_steps)
    losses = []
    for step in tqdm(range(config.qa_finetune_steps), desc='Fine-tuning KGQA', disable=not SHOW_PROGRESS,
                     leave=False):
        rng = make_rng(seed, step)
        picks = rng.choice(len(usable), size=min(config.qa_batch, len(usable)), replace=False)
        batch = [usable[i] for i in picks]
        cls = question_embeddings(model, memory, kg, batch, config, int(rng.integers(2 ** 31)), mode,
                                  relation_table)
        loss = None
        for i, q in enumerate(batch):
            term = cross_entropy(candidate_scores(cls[i], memory, q.candidates), q.candidates.index(q.answer))
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / len(batch))
        model.zero_grad()
        loss.backward()
        optimizer.step(step)
        losses.append(loss.item())
    return losses


def eval_kgqa(model: JaketModel, questions: Sequence[Question], memory: EntityMemory, kg: KnowledgeGraph,
              config: TrainConfig, degrade: bool = False, seed: int = 0, config_label: str = 'jaket',
              relation_table: Optional[np.ndarray] = None) -> EvalReport:
    """
    hits@1 of argmax over candidates of <[CLS], memory row>.

    ``degrade`` drops each triplet with probability 0.5 first and recomputes
    candidate sets on the thinner graph; questions left without candidates are
    skipped and counted, questions whose answer fell out count as misses.
    """
    graph = drop_triplets(kg, DEGRADE_PROBABILITY, seed) if degrade else kg
    mode = config.relation_mode_finetune
    if mode == 'context' and relation_table is None:
        relation_table = build_relation_memory(model.language, graph, config).matrix
    hits, scored, skipped = 0, 0, 0
    with no_grad():
        for start in range(0, len(questions), config.qa_batch):
            batch = list(questions[start:start + config.qa_batch])
            cls = question_embeddings(model, memory, graph, batch, config, seed + start, mode, relation_table)
            for i, q in enumerate(batch):
                candidates = (reachable_within(graph, q.mention.entity, q.hops) if degrade
                              else list(q.candidates))
                if not candidates:
                    skipped += 1
                    continue
                scores = candidate_scores(cls[i], memory, candidates).data
                hits += int(candidates[int(np.argmax(scores))] == q.answer)
                scored += 1
    if skipped:
        logger.info("KGQA: %s question(s) without candidates skipped", skipped)
    task = 'kgqa-50%' if degrade else 'kgqa'
    hop_label = '/'.join(sorted({f"{q.hops}hop" for q in questions}))
    return EvalReport(task, config_label, hop_label, 'hits@1', hits / scored if scored else 0.0, seed)


# -- few-shot relation classification -----------------------------------------

def pair_tokens(query: RelationInstance, support: RelationInstance, separator_id: int, max_len: int) -> List[int]:
    """``[CLS] query [SEP] support [EOS]``, truncated from the right to ``max_len``."""
    tokens = [CLS_ID] + query.sequence.tokens[1:-1] + [separator_id] + support.sequence.tokens[1:-1] + [EOS_ID]
    if len(tokens) > max_len:
        logger.warning("Pair of %s tokens truncated to %s", len(tokens), max_len)
        tokens = tokens[:max_len - 1] + [EOS_ID]
    return tokens


def pair_scores(model: JaketModel, pairs: Sequence[List[int]]) -> Tensor:
    """Pair-head score of each concatenated sequence; no knowledge fusion, no relation embeddings."""
    ids = pad_sequences(pairs, PAD_ID)
    mask = lengths_mask([len(p) for p in pairs], ids.shape[1])
    z = model.language.lm2_forward(model.language.lm1_forward(ids, mask), mask)
    return model.heads.pair_score(z[np.arange(len(pairs)), np.zeros(len(pairs), dtype=np.int64)])


def class_scores(model: JaketModel, episode: Episode, query: RelationInstance, separator_id: int) -> Tensor:
    """Mean pair score over each class's K supports, shape (N,)."""
    pairs = [pair_tokens(query, s, separator_id, model.config.max_len) for row in episode.support for s in row]
    scores = pair_scores(model, pairs)
    return scores.reshape(episode.n_way, episode.k_shot).mean(axis=1)


def train_pair_head(model: JaketModel, episodes: Sequence[Episode], config: TrainConfig, separator_id: int,
                    seed: int = 0) -> List[float]:
    """Train the language module and pair head with cross-entropy over class scores on meta-train episodes."""
    if not episodes:
        raise InsufficientDataError("no meta-train episode")
    params = [p for name, p in model.named_parameters().items()
              if name.startswith(('language.', 'heads.pair_'))]
    optimizer = _finetune_optimizer(params, config, config.fewshot_train_steps)
    losses = []
    for step in tqdm(range(config.fewshot_train_steps), desc='Training pair head', disable=not SHOW_PROGRESS,
                     leave=False):
        rng = make_rng(seed, step)
        episode = episodes[int(rng.integers(len(episodes)))]
        loss = None
        for query, label in zip(episode.queries, episode.labels):
            term = cross_entropy(class_scores(model, episode, query, separator_id), label)
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / len(episode.queries))
        model.zero_grad()
        loss.backward()
        optimizer.step(step)
        losses.append(loss.item())
    return losses


def eval_fewshot_pair(model: JaketModel, episodes: Sequence[Episode], separator_id: int, seed: int = 0,
                      config_label: str = 'jaket') -> EvalReport:
    """Accuracy of assigning each query to the class with the highest mean pair score."""
    correct, total = 0, 0
    with no_grad():
        for episode in episodes:
            for query, label in zip(episode.queries, episode.labels):
                scores = class_scores(model, episode, query, separator_id).data
                correct += int(np.argmax(scores) == label)
                total += 1
    way = episodes[0].n_way if episodes else 0
    shot = episodes[0].k_shot if episodes else 0
    return EvalReport(f"fewshot-{way}way-{shot}shot", config_label, 'test', 'accuracy',
                      correct / total if total else 0.0, seed)


# -- ablation grid ----------------------------------------------------------

def ablation_model(setting: AblationConfig, pretrained: Optional[JaketModel], config: TrainConfig,
                   vocab_size: int, num_categories: int, num_relations: int, seed: int) -> JaketModel:
    if setting.weights == 'pretrained':
        if pretrained is None:
            raise ValueError("pretrained rows need a pre-trained model")
        return pretrained.copy()
    return JaketModel(config, vocab_size, num_categories, num_relations, seed=seed)


def ablation_memory(setting: AblationConfig, model: JaketModel, kg: KnowledgeGraph, config: TrainConfig,
                    seed: int) -> EntityMemory:
    if setting.memory_init == 'random':
        return build_random_memory(kg, config, seed=seed)
    return rebuild_for_unseen(model.language, kg, config)


def run_ablation_grid(kg: KnowledgeGraph, config: TrainConfig, seeds: Sequence[int],
                      pretrained: Optional[JaketModel] = None, vocab_size: Optional[int] = None,
                      fraction: float = 1.0, grid: Optional[Sequence[AblationConfig]] = None,
                      text_only: bool = False) -> List[EvalReport]:
    """
    Entity classification for every (memory init, weights) rung and seed.

    ``text_only`` adds the row that classifies from LM output alone. Pretrained
    rungs are skipped when no model is given.
    """
    if vocab_size is None:
        if pretrained is None:
            raise ValueError("vocab_size is required without a pre-trained model")
        vocab_size = pretrained.vocab_size
    grid = list(grid or AblationConfig.grid())
    reports = []
    for seed in seeds:
        for setting in grid:
            if setting.weights == 'pretrained' and pretrained is None:
                logger.warning("No pre-trained model; skipping %s", setting.label)
                continue
            model = ablation_model(setting, pretrained, config, vocab_size, kg.num_categories,
                                   kg.num_relations, seed)
            memory = ablation_memory(setting, model, kg, config, seed)
            reports.extend(finetune_entity_classification(model, kg, memory, config, fraction, seed,
                                                          config_label=setting.label))
        if text_only:
            source = pretrained if pretrained is not None else JaketModel(
                config, vocab_size, kg.num_categories, kg.num_relations, seed=seed)
            model = source.copy()
            memory = rebuild_for_unseen(model.language, kg, config)
            reports.extend(finetune_entity_classification(model, kg, memory, config, fraction, seed,
                                                          config_label='text-only', use_knowledge=False))
    return reports


def split_questions(questions: Sequence[Question], train_fraction: float, seed: int = 0
                    ) -> Tuple[List[Question], List[Question]]:
    """(train, test) questions by a seeded permutation; both sides are non-empty when possible."""
    order = np.random.default_rng(seed).permutation(len(questions))
    cut = int(round(train_fraction * len(questions)))
    if len(questions) > 1:
        cut = min(max(cut, 1), len(questions) - 1)
    return [questions[i] for i in order[:cut]], [questions[i] for i in order[cut:]]
