"""
Pytest configuration and shared fixtures for the JAKET desk trainer tests
"""
import os

os.environ.setdefault('JAKET_PROGRESS', 'false')

import numpy as np
import pytest

from config import TrainConfig
from corpus import Vocabulary
from graph_store import KnowledgeGraph
from model import JaketModel
from models import CLS_ID, EOS_ID
from synth_world import WorldConfig, generate_world


@pytest.fixture(scope='session')
def tiny_config():
    """The gradient-check preset: F=8, one LM layer per stage, one GAT layer"""
    return TrainConfig.preset('tiny')


@pytest.fixture(scope='session')
def small_config():
    """Tiny model on a world large enough to split, ask questions about and build episodes from"""
    return TrainConfig.preset('tiny').with_overrides(
        num_entities=40,
        num_relations=4,
        vocab_size=56,
        num_sequences=300,
        name_pool=8,
        unseen_fraction=0.5,
        qa_questions=20,
        episode_count=3,
        finetune_steps=6,
        finetune_eval_every=3,
        qa_finetune_steps=3,
        fewshot_train_steps=2,
        ablation_seeds=1,
        bench_steps=3,
        checkpoint_every=2,
        log_every=0,
    )


@pytest.fixture(scope='session')
def tiny_world(tiny_config):
    """Generated once per session; tests must not mutate it"""
    return generate_world(WorldConfig.from_train_config(tiny_config))


@pytest.fixture(scope='session')
def small_world(small_config):
    return generate_world(WorldConfig.from_train_config(small_config))


@pytest.fixture
def tiny_model(tiny_config, tiny_world):
    kg = tiny_world.kg
    return JaketModel(tiny_config, len(tiny_world.vocab), kg.num_categories, kg.num_relations, seed=0)


@pytest.fixture
def vocab():
    return Vocabulary(['alpha', 'beta', 'gamma', 'delta', 'of', 'the'])


def description(*ids):
    return [CLS_ID] + list(ids) + [EOS_ID]


@pytest.fixture
def star_graph():
    """
    Six entities: 0 is linked to 1..4, and 4 -> 5, over two relations.

    Categories: 0, 1, 0, 1, -1 (unlabeled), 1.
    """
    triplets = [(0, 0, 1), (0, 1, 2), (3, 0, 0), (0, 1, 4), (4, 0, 5)]
    return KnowledgeGraph(
        num_entities=6,
        num_relations=2,
        num_categories=2,
        triplets=np.asarray(triplets),
        categories=np.asarray([0, 1, 0, 1, -1, 1]),
        entity_descriptions=[description(6 + e, 7 + e) for e in range(6)],
        relation_descriptions=[description(6), description(7)],
        entity_spans=[(1, 1)] * 6,
    )
