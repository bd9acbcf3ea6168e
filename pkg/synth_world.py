"""
Synthetic world generator: a knowledge graph, an aligned annotated corpus with
planted category and relation signal, and the task data built on top of it.
"""
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import TrainConfig
from corpus import CLS_ID, EOS_ID, Vocabulary, load_corpus, write_corpus
from exceptions import InsufficientDataError, SignalCheckError
from graph_store import (
    NO_LABEL,
    KnowledgeGraph,
    load_graph,
    reachable_within,
    split_unseen,
    write_graph,
)
from logger import setup_logger
from models import AnnotatedSequence, Episode, EpisodeSet, Mention, Question, RelationInstance

logger = setup_logger(__name__)

QUESTION_WORDS = ['which', 'entity', 'is', 'of', 'the', 'what']
DESCRIPTION_PHRASE = 6
RELATION_PHRASE = 2
CATEGORY_HINT_RATE = 0.5
MAX_TRIPLET_ATTEMPTS = 50

ENTITY_FILE = 'entities.tsv'
RELATION_FILE = 'relations.tsv'
TRIPLET_FILE = 'triplets.tsv'
CORPUS_FILE = 'corpus.tsv'
ID_MAP_FILE = 'id_map.tsv'
VOCAB_FILE = 'vocab.txt'
QA_FILES = {1: 'qa_1hop.tsv', 2: 'qa_2hop.tsv'}
EPISODE_FILE = 'episodes.json'
MANIFEST_FILE = 'manifest.json'


@dataclass(frozen=True)
class WorldConfig:
    num_entities: int = 500
    num_relations: int = 8
    num_categories: int = 10
    vocab_size: int = 400
    num_sequences: int = 5000
    max_seq_len: int = 32
    mean_degree: int = 6
    name_pool: int = 48
    category_tokens: int = 8
    relation_tokens: int = 4
    concentration: float = 0.8
    homophily: float = 0.7
    label_rate: float = 0.9
    description_mention_rate: float = 0.9
    chain_rate: float = 0.3
    seed: int = 0

    @classmethod
    def from_train_config(cls, config: TrainConfig) -> 'WorldConfig':
        values = config.to_dict()
        return cls(**{name: values[name] for name in cls.__dataclass_fields__})

    @property
    def filler_count(self) -> int:
        return self.vocab_size - self.reserved_tokens

    @property
    def reserved_tokens(self) -> int:
        """Specials, separator, question words, category, relation and name tokens."""
        return (
            6 + len(QUESTION_WORDS)
            + self.num_categories * self.category_tokens
            + self.num_relations * self.relation_tokens
            + self.name_pool
        )

    def validate(self) -> None:
        """
        Raises:
            ValueError: counts not positive, vocabulary budget or name pool too small
        """
        for name in ('num_entities', 'num_relations', 'num_categories', 'num_sequences',
                     'max_seq_len', 'mean_degree', 'name_pool', 'category_tokens', 'relation_tokens'):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.filler_count < 1:
            raise ValueError(
                f"vocabulary of {self.vocab_size} cannot hold {self.reserved_tokens} reserved tokens "
                f"plus fillers"
            )
        if self.name_pool * (self.name_pool - 1) < self.num_entities:
            raise ValueError(f"name pool of {self.name_pool} tokens cannot name {self.num_entities} entities")
        shortest = 2 + 2 * 3 + RELATION_PHRASE
        if self.max_seq_len < shortest:
            raise ValueError(f"max_seq_len must be at least {shortest}")


@dataclass
class World:
    """A generated graph and corpus plus the generator-side truth needed for task data."""
    config: WorldConfig
    vocab: Vocabulary
    kg: KnowledgeGraph
    corpus: List[AnnotatedSequence]
    names: List[List[int]]
    true_categories: np.ndarray
    signal_accuracy: Optional[float] = None


@dataclass
class WorldPart:
    """One side of the pre-training/unseen split, re-indexed densely."""
    kg: KnowledgeGraph
    corpus: List[AnnotatedSequence]
    names: List[List[int]]


@dataclass
class _TokenLayout:
    categories: np.ndarray
    relations: np.ndarray
    names: np.ndarray
    fillers: np.ndarray


def _build_vocab(config: WorldConfig) -> Tuple[Vocabulary, _TokenLayout]:
    tokens = list(QUESTION_WORDS)
    tokens += [f"c{c}_{j}" for c in range(config.num_categories) for j in range(config.category_tokens)]
    tokens += [f"r{p}_{j}" for p in range(config.num_relations) for j in range(config.relation_tokens)]
    tokens += [f"n{i}" for i in range(config.name_pool)]
    tokens += [f"w{i}" for i in range(config.filler_count)]
    vocab = Vocabulary(tokens)
    ids = lambda prefix_tokens: np.asarray(vocab.encode(prefix_tokens), dtype=np.int64)
    layout = _TokenLayout(
        categories=ids([f"c{c}_{j}" for c in range(config.num_categories)
                        for j in range(config.category_tokens)]).reshape(config.num_categories, -1),
        relations=ids([f"r{p}_{j}" for p in range(config.num_relations)
                       for j in range(config.relation_tokens)]).reshape(config.num_relations, -1),
        names=ids([f"n{i}" for i in range(config.name_pool)]),
        fillers=ids([f"w{i}" for i in range(config.filler_count)]),
    )
    return vocab, layout


def _phrase(rng: np.random.Generator, own: np.ndarray, fillers: np.ndarray, length: int,
            concentration: float) -> List[int]:
    """Tokens drawn from ``own`` with probability ``concentration``, else from fillers."""
    out = []
    for _ in range(length):
        pool = own if rng.random() < concentration else fillers
        out.append(int(pool[rng.integers(len(pool))]))
    return out


def _sample_triplets(config: WorldConfig, categories: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Triplets whose tail category follows a per-relation permutation of the head category."""
    n, p, c = config.num_entities, config.num_relations, config.num_categories
    permutations = np.stack([rng.permutation(c) for _ in range(p)])
    members = [np.flatnonzero(categories == k) for k in range(c)]
    target = max(1, (n * config.mean_degree) // 2)
    capacity = n * (n - 1) * p
    target = min(target, capacity)

    seen = set()
    triplets = []
    attempts = 0
    while len(triplets) < target and attempts < target * MAX_TRIPLET_ATTEMPTS:
        attempts += 1
        head = int(rng.integers(n))
        relation = int(rng.integers(p))
        wanted = members[permutations[relation, categories[head]]]
        if rng.random() < config.homophily and len(wanted):
            tail = int(wanted[rng.integers(len(wanted))])
        else:
            tail = int(rng.integers(n))
        if tail == head or (head, relation, tail) in seen:
            continue
        seen.add((head, relation, tail))
        triplets.append((head, relation, tail))
    return np.asarray(sorted(triplets), dtype=np.int64).reshape(-1, 3)


def _realize(rng, config: WorldConfig, layout: _TokenLayout, names, categories,
             chain: Sequence[Tuple[int, int, int]]) -> AnnotatedSequence:
    """Sentence ``name relation-phrase name [relation-phrase name]`` with mention spans."""
    tokens = [CLS_ID]
    mentions = []

    def add_entity(e):
        start = len(tokens)
        tokens.extend(names[e])
        mentions.append(Mention(int(e), start, len(tokens) - 1))
        if rng.random() < CATEGORY_HINT_RATE:
            tokens.extend(_phrase(rng, layout.categories[categories[e]], layout.fillers, 1,
                                  config.concentration))

    add_entity(chain[0][0])
    for _, relation, tail in chain:
        tokens.extend(_phrase(rng, layout.relations[relation], layout.fillers, RELATION_PHRASE,
                              config.concentration))
        add_entity(tail)
    tokens.append(EOS_ID)
    return AnnotatedSequence(tokens, mentions)


def generate_world(config: WorldConfig) -> World:
    """
    Generate a graph and an aligned corpus, deterministically from ``config.seed``.

    Raises:
        ValueError: inconsistent vocabulary budget
        SignalCheckError: the category oracle does not beat chance by the required margin
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    vocab, layout = _build_vocab(config)
    n = config.num_entities

    pair_codes = rng.choice(config.name_pool * (config.name_pool - 1), size=n, replace=False)
    names = []
    for code in pair_codes:
        first, second = divmod(int(code), config.name_pool - 1)
        if second >= first:
            second += 1
        names.append([int(layout.names[first]), int(layout.names[second])])

    true_categories = rng.integers(config.num_categories, size=n)
    labeled = rng.random(n) < config.label_rate
    categories = np.where(labeled, true_categories, NO_LABEL)

    descriptions, spans = [], []
    for e in range(n):
        phrase = _phrase(rng, layout.categories[true_categories[e]], layout.fillers,
                         DESCRIPTION_PHRASE, config.concentration)
        if rng.random() < config.description_mention_rate:
            lead = int(rng.integers(2))
            body = phrase[:lead] + names[e] + phrase[lead:]
            spans.append((1 + lead, 2 + lead))
        else:
            body = phrase
            spans.append(None)
        descriptions.append([CLS_ID] + body + [EOS_ID])

    relation_descriptions = [
        [CLS_ID] + [int(t) for t in layout.relations[p]] + [EOS_ID] for p in range(config.num_relations)
    ]
    triplets = _sample_triplets(config, true_categories, rng)
    kg = KnowledgeGraph(
        num_entities=n,
        num_relations=config.num_relations,
        num_categories=config.num_categories,
        triplets=triplets,
        categories=categories,
        entity_descriptions=descriptions,
        relation_descriptions=relation_descriptions,
        entity_spans=spans,
    )

    by_head: Dict[int, List[int]] = {}
    for i, (h, _, _) in enumerate(triplets):
        by_head.setdefault(int(h), []).append(i)
    chain_budget = 2 + 3 * 2 + 3 + 2 * RELATION_PHRASE
    corpus = []
    if len(triplets):
        for _ in range(config.num_sequences):
            first = triplets[rng.integers(len(triplets))]
            chain = [tuple(int(x) for x in first)]
            follow = by_head.get(chain[0][2], [])
            if follow and config.max_seq_len >= chain_budget and rng.random() < config.chain_rate:
                second = triplets[follow[rng.integers(len(follow))]]
                chain.append(tuple(int(x) for x in second))
            seq = _realize(rng, config, layout, names, true_categories, chain)
            seq.validate(config.max_seq_len)
            corpus.append(seq)

    accuracy = category_signal_accuracy(kg, vocab_size=len(vocab), seed=config.seed)
    if accuracy is not None:
        threshold = signal_threshold(config.num_categories)
        if accuracy <= threshold:
            raise SignalCheckError(
                f"category oracle accuracy {accuracy:.3f} does not exceed {threshold:.3f}"
            )
    logger.info(
        "Generated world: N=%s, P=%s, |T|=%s, %s sequences, vocab %s, oracle accuracy %s",
        n, config.num_relations, kg.num_triplets, len(corpus), len(vocab),
        'skipped' if accuracy is None else f"{accuracy:.3f}",
    )
    return World(config=config, vocab=vocab, kg=kg, corpus=corpus, names=names,
                 true_categories=true_categories, signal_accuracy=accuracy)


def signal_threshold(num_categories: int) -> float:
    """Five times chance, capped halfway between chance and perfect for small label spaces."""
    chance = 1.0 / num_categories
    return min(5.0 * chance, (1.0 + chance) / 2.0)


def category_signal_accuracy(kg: KnowledgeGraph, vocab_size: int, seed: int = 0) -> Optional[float]:
    """
    Held-out accuracy of a token-count naive Bayes classifier on entity descriptions.

    Each category with labels is split in half (train gets the extra one).
    Returns None when some labeled category has fewer than two entities.
    """
    rng = np.random.default_rng(seed)
    c = kg.num_categories
    train, test = [], []
    for k in range(c):
        members = np.flatnonzero(kg.categories == k)
        if len(members) == 0:
            continue
        if len(members) < 2:
            logger.warning("Category %s has %s labeled entity; skipping signal check", k, len(members))
            return None
        members = rng.permutation(members)
        cut = (len(members) + 1) // 2
        train.extend(members[:cut].tolist())
        test.extend(members[cut:].tolist())

    counts = np.ones((c, vocab_size))
    priors = np.ones(c)
    for e in train:
        k = kg.categories[e]
        priors[k] += 1
        np.add.at(counts[k], kg.entity_descriptions[e], 1.0)
    log_likelihood = np.log(counts / counts.sum(axis=1, keepdims=True))
    log_prior = np.log(priors / priors.sum())

    correct = 0
    for e in test:
        scores = log_prior + log_likelihood[:, kg.entity_descriptions[e]].sum(axis=1)
        correct += int(np.argmax(scores) == kg.categories[e])
    return correct / len(test)


# -- task data -------------------------------------------------------------

def question_tokens(vocab: Vocabulary, relation_words: Sequence[Sequence[int]], name: Sequence[int]
                    ) -> Tuple[List[int], Mention]:
    """``which entity is r_k of the ... r_1 of NAME``; returns tokens and the name span (entity unset)."""
    word = lambda w: vocab.id(w)
    tokens = [CLS_ID, word('which'), word('entity'), word('is')]
    for i, phrase in enumerate(reversed(relation_words)):
        if i:
            tokens += [word('of'), word('the')]
        tokens += list(phrase)
    tokens.append(word('of'))
    start = len(tokens)
    tokens += list(name)
    tokens.append(EOS_ID)
    return tokens, Mention(-1, start, start + len(name) - 1)


def generate_qa(kg: KnowledgeGraph, names: Sequence[Sequence[int]], vocab: Vocabulary,
                hops: int, n: int, seed: int = 0) -> List[Question]:
    """
    Templated k-hop questions following directed triplet paths.

    The answer is the path end; the candidates are every entity within ``hops``
    undirected hops of the question entity. Entities without a usable path are
    skipped.

    Raises:
        InsufficientDataError: no entity has a k-hop path
    """
    if hops not in (1, 2):
        raise ValueError(f"hops must be 1 or 2, got {hops}")
    rng = np.random.default_rng(seed)
    outgoing: Dict[int, List[Tuple[int, int]]] = {}
    for h, r, t in kg.triplets:
        outgoing.setdefault(int(h), []).append((int(r), int(t)))

    def paths_from(h):
        if hops == 1:
            return [[(r, t)] for r, t in outgoing.get(h, [])]
        found = []
        for r1, x in outgoing.get(h, []):
            for r2, t in outgoing.get(x, []):
                if t != h:
                    found.append([(r1, x), (r2, t)])
        return found

    starts = [h for h in sorted(outgoing) if paths_from(h)]
    if not starts:
        raise InsufficientDataError(f"no entity has a {hops}-hop path")

    questions = []
    for _ in range(n):
        h = starts[rng.integers(len(starts))]
        options = paths_from(h)
        path = options[rng.integers(len(options))]
        relation_words = [kg.relation_descriptions[r][1:-1] for r, _ in path]
        tokens, span = question_tokens(vocab, relation_words, names[h])
        answer = path[-1][1]
        candidates = reachable_within(kg, h, hops)
        questions.append(Question(
            tokens=tuple(tokens),
            mention=Mention(h, span.start, span.end),
            answer=answer,
            candidates=tuple(candidates),
            hops=hops,
        ))
    return questions


def question_descriptions(questions: Sequence[Question]) -> Dict[int, Tuple[List[int], Tuple[int, int]]]:
    """First question mentioning each entity, usable as that entity's description."""
    overrides = {}
    for q in questions:
        overrides.setdefault(q.mention.entity, (list(q.tokens), q.mention.span))
    return overrides


def relation_instances(kg: KnowledgeGraph, corpus: Sequence[AnnotatedSequence]) -> Dict[int, List[RelationInstance]]:
    """Two-mention sentences whose entity pair is linked by exactly one triplet, by relation."""
    linking: Dict[Tuple[int, int], List[int]] = {}
    for h, r, t in kg.triplets:
        linking.setdefault((int(h), int(t)), []).append(int(r))
    grouped: Dict[int, List[RelationInstance]] = {}
    for index, seq in enumerate(corpus):
        if len(seq.mentions) != 2:
            continue
        relations = linking.get((seq.mentions[0].entity, seq.mentions[1].entity), [])
        if len(relations) == 1:
            grouped.setdefault(relations[0], []).append(RelationInstance(seq, relations[0], index))
    return grouped


def _episodes(rng, grouped, relations: List[int], n_way: int, k_shot: int, queries: int,
              count: int) -> List[Episode]:
    episodes = []
    for _ in range(count):
        classes = [int(r) for r in rng.choice(relations, size=n_way, replace=False)]
        per_class = [(queries + n_way - 1 - c) // n_way for c in range(n_way)]
        support, query_items, labels = [], [], []
        for label, relation in enumerate(classes):
            pool = grouped[relation]
            picked = rng.choice(len(pool), size=k_shot + per_class[label], replace=False)
            support.append([pool[i] for i in picked[:k_shot]])
            for i in picked[k_shot:]:
                query_items.append(pool[i])
                labels.append(label)
        order = rng.permutation(len(query_items))
        episodes.append(Episode(
            relations=classes,
            support=support,
            queries=[query_items[i] for i in order],
            labels=[labels[i] for i in order],
        ))
    return episodes


def generate_episodes(kg: KnowledgeGraph, corpus: Sequence[AnnotatedSequence], n_way: int = 5,
                      k_shot: int = 1, queries: int = 5, count: int = 50, seed: int = 0) -> EpisodeSet:
    """
    Meta-train and meta-test episodes over disjoint relation sets.

    ``n_way`` relations with enough instances are drawn for the test side; the
    remaining eligible relations (at least two) form the train side, whose
    episodes use ``min(n_way, len(train_relations))`` classes.

    Raises:
        InsufficientDataError: fewer than n_way + 2 relations with enough instances
    """
    rng = np.random.default_rng(seed)
    grouped = relation_instances(kg, corpus)
    needed = k_shot + (queries + n_way - 1) // n_way
    eligible = sorted(r for r, items in grouped.items() if len(items) >= needed)
    if len(eligible) < n_way + 2:
        raise InsufficientDataError(
            f"{len(eligible)} relation(s) have {needed}+ instances; need {n_way + 2} for "
            f"{n_way}-way episodes plus a meta-train side"
        )
    test_relations = sorted(int(r) for r in rng.choice(eligible, size=n_way, replace=False))
    train_relations = [r for r in eligible if r not in test_relations]
    train_way = min(n_way, len(train_relations))
    return EpisodeSet(
        train=_episodes(rng, grouped, train_relations, train_way, k_shot, queries, count),
        test=_episodes(rng, grouped, test_relations, n_way, k_shot, queries, count),
        train_relations=train_relations,
        test_relations=test_relations,
    )


# -- partitions and files ----------------------------------------------------

def restrict_corpus(corpus: Sequence[AnnotatedSequence], global_ids: np.ndarray,
                    num_world_entities: int) -> List[AnnotatedSequence]:
    """Sequences whose mentions all fall inside ``global_ids``, with mentions re-indexed."""
    remap = np.full(num_world_entities, -1, dtype=np.int64)
    remap[global_ids] = np.arange(len(global_ids))
    kept = []
    for seq in corpus:
        local = [int(remap[m.entity]) for m in seq.mentions]
        if all(e >= 0 for e in local):
            kept.append(AnnotatedSequence(
                list(seq.tokens),
                [Mention(e, m.start, m.end) for e, m in zip(local, seq.mentions)],
            ))
    return kept


def partition_world(world: World, fraction: float, seed: int = 0) -> Tuple[WorldPart, WorldPart]:
    kg_pretrain, kg_unseen = split_unseen(world.kg, fraction, seed)
    parts = []
    for kg in (kg_pretrain, kg_unseen):
        parts.append(WorldPart(
            kg=kg,
            corpus=restrict_corpus(world.corpus, kg.global_ids, world.kg.num_entities),
            names=[world.names[g] for g in kg.global_ids],
        ))
    return parts[0], parts[1]


def write_part(kg: KnowledgeGraph, corpus: Sequence[AnnotatedSequence], vocab: Vocabulary,
               directory: str) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    paths = [os.path.join(directory, name) for name in (ENTITY_FILE, RELATION_FILE, TRIPLET_FILE)]
    write_graph(kg, vocab, *paths)
    corpus_path = write_corpus(corpus, vocab, os.path.join(directory, CORPUS_FILE))
    id_path = os.path.join(directory, ID_MAP_FILE)
    with open(id_path, 'w', encoding='utf-8') as f:
        for local, global_id in enumerate(kg.global_ids):
            f.write(f"{local}\t{global_id}\n")
    return paths + [corpus_path, id_path]


def load_part(directory: str, vocab: Vocabulary, num_categories: int) -> Tuple[KnowledgeGraph, List[AnnotatedSequence]]:
    kg = load_graph(
        os.path.join(directory, ENTITY_FILE),
        os.path.join(directory, RELATION_FILE),
        os.path.join(directory, TRIPLET_FILE),
        vocab=vocab,
        num_categories=num_categories,
    )
    id_path = os.path.join(directory, ID_MAP_FILE)
    if os.path.exists(id_path):
        with open(id_path, 'r', encoding='utf-8') as f:
            kg.global_ids = np.asarray([int(line.split('\t')[1]) for line in f if line.strip()],
                                       dtype=np.int64)
    return kg, load_corpus(os.path.join(directory, CORPUS_FILE), vocab)


def write_questions(questions: Sequence[Question], vocab: Vocabulary, path: str) -> str:
    with open(path, 'w', encoding='utf-8') as f:
        for q in questions:
            f.write(q.to_line(vocab) + "\n")
    return path


def load_questions(path: str, vocab: Vocabulary) -> List[Question]:
    questions = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if line.strip():
                questions.append(Question.from_line(line, vocab, path=path, line_number=line_number))
    return questions


def episodes_to_dict(episodes: EpisodeSet) -> Dict[str, object]:
    """Episodes as corpus line indices, for the JSON episode file."""
    encode = lambda ep: {
        'relations': ep.relations,
        'support': [[item.source_index for item in row] for row in ep.support],
        'queries': [item.source_index for item in ep.queries],
        'labels': ep.labels,
    }
    return {
        'train_relations': episodes.train_relations,
        'test_relations': episodes.test_relations,
        'train': [encode(ep) for ep in episodes.train],
        'test': [encode(ep) for ep in episodes.test],
    }


def episodes_from_dict(data: Dict[str, object], corpus: Sequence[AnnotatedSequence]) -> EpisodeSet:
    def decode(entry):
        relations = entry['relations']
        support = [[RelationInstance(corpus[i], relations[c], i) for i in row]
                   for c, row in enumerate(entry['support'])]
        queries = [RelationInstance(corpus[i], relations[label], i)
                   for i, label in zip(entry['queries'], entry['labels'])]
        return Episode(relations=relations, support=support, queries=queries, labels=entry['labels'])

    return EpisodeSet(
        train=[decode(e) for e in data['train']],
        test=[decode(e) for e in data['test']],
        train_relations=data['train_relations'],
        test_relations=data['test_relations'],
    )


def write_episodes(episodes: EpisodeSet, path: str) -> str:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(episodes_to_dict(episodes), f, indent=2)
    return path


def load_episodes(path: str, corpus: Sequence[AnnotatedSequence]) -> EpisodeSet:
    with open(path, 'r', encoding='utf-8') as f:
        return episodes_from_dict(json.load(f), corpus)
