import numpy as np
import pytest

from adapt_eval import (
    LabelGuard,
    candidate_scores,
    class_scores,
    eval_fewshot_pair,
    eval_kgqa,
    finetune_entity_classification,
    finetune_kgqa,
    pair_tokens,
    run_ablation_grid,
    split_entities,
    split_questions,
    train_pair_head,
)
from exceptions import InsufficientDataError, LabelAccessError
from graph_store import KnowledgeGraph
from memory import rebuild_for_unseen
from model import JaketModel
from models import AnnotatedSequence, RelationInstance
from numerics import Tensor
from synth_world import generate_episodes, generate_qa, partition_world
from tests.conftest import description
from tests.test_synth_world import relation_world


@pytest.fixture(scope='module')
def unseen(small_config, small_world):
    _, part = partition_world(small_world, small_config.unseen_fraction, seed=0)
    return part


@pytest.fixture
def unseen_model(small_config, small_world, unseen):
    return JaketModel(small_config, len(small_world.vocab), unseen.kg.num_categories, unseen.kg.num_relations)


@pytest.fixture
def unseen_memory(unseen_model, small_config, unseen):
    return rebuild_for_unseen(unseen_model.language, unseen.kg, small_config)


def instance(*content):
    return RelationInstance(AnnotatedSequence([1] + list(content) + [2], []), 0, 0)


class TestEntitySplit:
    """Tests for the labeled-entity split and label guard"""

    def test_split_partitions_labeled(self, unseen):
        """Test the three splits are disjoint and cover every labeled entity"""
        split = split_entities(unseen.kg, seed=0)
        parts = [set(split.train.tolist()), set(split.dev.tolist()), set(split.test.tolist())]
        assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
        assert set().union(*parts) == set(unseen.kg.labeled_entities().tolist())

    def test_test_labels_locked(self, star_graph):
        """Test test labels are refused until unlocked"""
        split = split_entities(star_graph, seed=0)
        guard = LabelGuard(star_graph.categories, split)
        with pytest.raises(LabelAccessError, match="before training finished"):
            guard.labels(split.test, 'test')
        guard.unlock_test()
        np.testing.assert_array_equal(guard.labels(split.test, 'test'), star_graph.categories[split.test])

    def test_labels_outside_split(self, star_graph):
        """Test asking for a dev entity as training data raises"""
        split = split_entities(star_graph, seed=0)
        guard = LabelGuard(star_graph.categories, split)
        with pytest.raises(LabelAccessError, match="outside the train split"):
            guard.labels(split.dev, 'train')


class TestEntityClassification:
    """Tests for fine-tuning the category head"""

    def test_reports_and_label_access(self, unseen_model, unseen_memory, unseen, small_config):
        """Test dev and test rows are reported and only the split labels are read"""
        guards = []
        reports = finetune_entity_classification(unseen_model, unseen.kg, unseen_memory, small_config,
                                                 fraction=1.0, seed=0, guard_out=guards)
        assert [r.split for r in reports] == ['dev', 'test']
        assert all(r.task == 'entity-classification@1' and r.metric == 'accuracy' for r in reports)
        assert all(0.0 <= r.value <= 1.0 for r in reports)
        split = split_entities(unseen.kg, seed=0)
        assert guards[0].accessed['train'] == set(split.train.tolist())
        assert guards[0].accessed['test'] == set(split.test.tolist())

    def test_small_fraction_uses_ceiling(self, unseen_model, unseen_memory, unseen, small_config):
        """Test a 5% fraction still trains on at least one entity"""
        guards = []
        reports = finetune_entity_classification(unseen_model, unseen.kg, unseen_memory, small_config,
                                                 fraction=0.05, seed=0, guard_out=guards)
        assert reports[0].task == 'entity-classification@0.05'
        assert len(guards[0].accessed['train']) == 1

    def test_only_head_and_knowledge_change(self, unseen_model, unseen_memory, unseen, small_config):
        """Test the language module is left alone"""
        before = unseen_model.state_arrays()
        finetune_entity_classification(unseen_model, unseen.kg, unseen_memory, small_config)
        after = unseen_model.state_arrays()
        for name in before:
            if name.startswith(('language.', 'heads.token', 'heads.relation', 'heads.pair')):
                np.testing.assert_array_equal(before[name], after[name])

    def test_text_only_freezes_knowledge(self, unseen_model, unseen_memory, unseen, small_config):
        """Test the text-only baseline trains only the category head"""
        before = unseen_model.state_arrays()
        reports = finetune_entity_classification(unseen_model, unseen.kg, unseen_memory, small_config,
                                                 config_label='text-only', use_knowledge=False)
        after = unseen_model.state_arrays()
        assert reports[0].config == 'text-only'
        for name in before:
            if name.startswith('knowledge.'):
                np.testing.assert_array_equal(before[name], after[name])

    def test_too_few_labels(self, tiny_model, tiny_config):
        """Test a graph whose train split rounds to nothing raises"""
        kg = KnowledgeGraph(
            num_entities=3, num_relations=1, num_categories=2,
            triplets=np.asarray([(0, 0, 1)]),
            categories=np.asarray([0, 1, -1]),
            entity_descriptions=[description(6)] * 3,
            relation_descriptions=[description(7)],
        )
        memory = rebuild_for_unseen(tiny_model.language, kg, tiny_config)
        with pytest.raises(InsufficientDataError, match="train and dev"):
            finetune_entity_classification(tiny_model, kg, memory, tiny_config)


class TestKgqa:
    """Tests for question answering over the unseen graph"""

    @pytest.fixture
    def questions(self, unseen, small_world):
        return generate_qa(unseen.kg, unseen.names, small_world.vocab, hops=1, n=6, seed=0)

    def test_finetune_then_eval(self, unseen_model, unseen_memory, unseen, small_config, questions):
        """Test training returns finite losses and evaluation a hits@1 rate"""
        losses = finetune_kgqa(unseen_model, unseen.kg, unseen_memory, questions, small_config)
        assert len(losses) == small_config.qa_finetune_steps
        assert all(np.isfinite(losses))
        report = eval_kgqa(unseen_model, questions, unseen_memory, unseen.kg, small_config)
        assert (report.task, report.split, report.metric) == ('kgqa', '1hop', 'hits@1')
        assert 0.0 <= report.value <= 1.0

    def test_degraded_graph(self, unseen_model, unseen_memory, unseen, small_config, questions):
        """Test the degraded evaluation is labelled and bounded"""
        report = eval_kgqa(unseen_model, questions, unseen_memory, unseen.kg, small_config, degrade=True)
        assert report.task == 'kgqa-50%'
        assert 0.0 <= report.value <= 1.0

    def test_candidate_scores(self, unseen_memory):
        """Test one score per candidate, equal to the memory inner product"""
        cls = Tensor(np.ones(unseen_memory.matrix.shape[1]))
        scores = candidate_scores(cls, unseen_memory, [0, 2]).data
        np.testing.assert_allclose(scores, unseen_memory.matrix[[0, 2]].sum(axis=1))

    def test_split_questions(self, questions):
        """Test both sides are non-empty and together hold every question"""
        train, test = split_questions(questions, 0.99, seed=0)
        assert len(train) == len(questions) - 1 and len(test) == 1
        assert sorted(map(repr, train + test)) == sorted(map(repr, questions))


class TestFewShot:
    """Tests for sentence-pair relation classification"""

    def test_pair_layout(self):
        """Test [CLS] query [SEP] support [EOS] without inner wrappers"""
        assert pair_tokens(instance(6, 7), instance(8), separator_id=5, max_len=16) == [1, 6, 7, 5, 8, 2]

    def test_pair_truncated_from_right(self):
        """Test long pairs keep their head and end in [EOS]"""
        tokens = pair_tokens(instance(6, 7, 8), instance(9, 10, 11), separator_id=5, max_len=5)
        assert tokens == [1, 6, 7, 8, 2]

    def test_train_and_eval(self, tiny_model, tiny_config):
        """Test the pair head trains and scores every query"""
        kg, corpus = relation_world(4)
        episodes = generate_episodes(kg, corpus, n_way=2, k_shot=1, queries=2, count=2, seed=0)
        config = tiny_config.with_overrides(fewshot_train_steps=3)
        losses = train_pair_head(tiny_model, episodes.train, config, separator_id=5)
        assert len(losses) == 3
        scores = class_scores(tiny_model, episodes.test[0], episodes.test[0].queries[0], separator_id=5)
        assert scores.shape == (2,)
        report = eval_fewshot_pair(tiny_model, episodes.test, separator_id=5)
        assert report.task == 'fewshot-2way-1shot'
        assert 0.0 <= report.value <= 1.0

    def test_no_episodes(self, tiny_model, tiny_config):
        """Test training without episodes raises"""
        with pytest.raises(InsufficientDataError):
            train_pair_head(tiny_model, [], tiny_config, separator_id=5)


class TestAblation:
    """Tests for the baseline ladder"""

    def test_fresh_rungs_without_pretrained_model(self, unseen, small_config, small_world):
        """Test pretrained rungs are skipped and no text-only row is added by default"""
        reports = run_ablation_grid(unseen.kg, small_config, seeds=[0], vocab_size=len(small_world.vocab))
        labels = sorted({r.config for r in reports})
        assert labels == ['fresh+lm-encoded', 'fresh+random']
        assert len(reports) == 4

    def test_text_only_row_on_request(self, unseen, small_config, small_world):
        """Test text_only adds one more row per seed"""
        reports = run_ablation_grid(unseen.kg, small_config, seeds=[0], vocab_size=len(small_world.vocab),
                                    text_only=True)
        assert sorted({r.config for r in reports}) == ['fresh+lm-encoded', 'fresh+random', 'text-only']
        assert len(reports) == 6

    @pytest.mark.slow
    def test_full_grid(self, unseen, unseen_model, small_config):
        """Test every rung reports dev and test for every seed"""
        reports = run_ablation_grid(unseen.kg, small_config, seeds=[0, 1], pretrained=unseen_model)
        assert len(reports) == 2 * 4 * 2
        assert {r.seed for r in reports} == {0, 1}

    def test_needs_vocab_size(self, unseen, small_config):
        """Test the grid needs a vocabulary size when no model is given"""
        with pytest.raises(ValueError, match="vocab_size"):
            run_ablation_grid(unseen.kg, small_config, seeds=[0])
