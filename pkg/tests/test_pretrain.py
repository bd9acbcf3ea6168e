import csv
import os
import tempfile

import numpy as np
import pytest

from exceptions import NonFiniteLossError
from memory import build_memory, retrieve
from model import JaketModel
from numerics import check_gradients
from pretrain import (
    assemble_batch,
    build_optimizer,
    candidate_set,
    compute_losses,
    masked_entity_hits,
    pretrain_step,
    split_heldout,
    step_phases,
    total_loss,
    train,
)


@pytest.fixture
def setup(small_config, small_world):
    """A fresh model, memory and optimizer on the small world"""
    kg = small_world.kg
    model = JaketModel(small_config, len(small_world.vocab), kg.num_categories, kg.num_relations, seed=0)
    memory = build_memory(model.language, kg, small_config)
    optimizer = build_optimizer(model, small_config)
    return model, memory, optimizer


class TestBatch:
    """Tests for batch assembly"""

    def test_determined_by_seed_and_step(self, small_config, small_world):
        """Test equal (seed, step) gives equal batches and steps differ"""
        v = len(small_world.vocab)
        a = assemble_batch(small_world.kg, small_world.corpus, small_config, v, 3)
        b = assemble_batch(small_world.kg, small_world.corpus, small_config, v, 3)
        c = assemble_batch(small_world.kg, small_world.corpus, small_config, v, 4)
        np.testing.assert_array_equal(a.km_entities, b.km_entities)
        np.testing.assert_array_equal(a.ids, b.ids)
        assert a.sequences == b.sequences
        assert not (np.array_equal(a.ids, c.ids) and np.array_equal(a.km_entities, c.km_entities))

    def test_triplets_inside_entity_batch(self, small_config, small_world):
        """Test relation triplets have both ends in the KM batch"""
        batch = assemble_batch(small_world.kg, small_world.corpus, small_config, len(small_world.vocab), 0)
        entities = set(batch.km_entities.tolist())
        assert len(batch.triplets) <= small_config.relation_batch
        for h, _, t in batch.triplets.tolist():
            assert h in entities and t in entities

    def test_text_batch_shape(self, small_config, small_world):
        """Test one padded row per sampled sequence"""
        batch = assemble_batch(small_world.kg, small_world.corpus, small_config, len(small_world.vocab), 0)
        assert batch.ids.shape[0] == small_config.lm_batch
        assert batch.pad_mask.sum(axis=1).tolist() == [len(s.tokens) for s in batch.sequences]

    def test_phases(self, small_config):
        """Test alternating steps switch between the two phases"""
        assert step_phases(small_config, 0) == ('km', 'lm')
        alternating = small_config.with_overrides(alternate_steps=True)
        assert step_phases(alternating, 0) == ('km',)
        assert step_phases(alternating, 1) == ('lm',)


class TestCandidates:
    """Tests for masked-entity candidate sets"""

    def test_gold_first_then_neighbors(self, star_graph):
        """Test the gold leads and neighbors precede random fill"""
        chosen = candidate_set(star_graph, 5, 4, np.random.default_rng(0))
        assert chosen[0] == 5
        assert chosen[1] == 4
        assert len(set(chosen.tolist())) == 4

    def test_capped_at_entity_count(self, star_graph):
        """Test more candidates than entities yields every entity once"""
        chosen = candidate_set(star_graph, 0, 64, np.random.default_rng(0))
        assert sorted(chosen.tolist()) == list(range(6))


class TestLosses:
    """Tests for the four pre-training losses"""

    def test_all_components_present_and_finite(self, setup, small_config, small_world):
        """Test every loss is computed and positive"""
        model, memory, _ = setup
        batch = assemble_batch(small_world.kg, small_world.corpus, small_config, len(small_world.vocab), 0)
        losses = compute_losses(model, memory, small_world.kg, batch, small_config)
        for name in ('c', 'r', 't', 'e'):
            assert losses[name] is not None
            assert np.isfinite(losses[name].item()) and losses[name].item() > 0
        assert total_loss(losses).item() == pytest.approx(sum(losses[n].item() for n in 'crte'))

    def test_disabled_losses_are_absent(self, setup, small_config, small_world):
        """Test switching losses off leaves None"""
        model, memory, _ = setup
        config = small_config.with_overrides(use_loss_c=False, use_loss_e=False)
        batch = assemble_batch(small_world.kg, small_world.corpus, config, len(small_world.vocab), 0)
        losses = compute_losses(model, memory, small_world.kg, batch, config)
        assert losses['c'] is None and losses['e'] is None
        assert losses['r'] is not None and losses['t'] is not None

    def test_total_of_nothing(self):
        """Test no components sum to None"""
        assert total_loss(dict.fromkeys('crte')) is None

    def test_gradients_reach_both_modules(self, setup, small_config, small_world):
        """Test the summed loss trains the language and knowledge parameters"""
        model, memory, _ = setup
        batch = assemble_batch(small_world.kg, small_world.corpus, small_config, len(small_world.vocab), 0)
        model.zero_grad()
        total_loss(compute_losses(model, memory, small_world.kg, batch, small_config)).backward()
        params = model.named_parameters()
        assert np.any(params['language.token_embedding.table'].grad_or_zeros() != 0)
        assert any(np.any(p.grad_or_zeros() != 0) for n, p in params.items() if n.startswith('knowledge.'))

    def test_no_gradient_through_memory(self, setup, small_config, small_world):
        """Test category and relation losses reach the KM but not the encoder behind the memory"""
        model, memory, _ = setup
        kg = small_world.kg
        config = small_config.with_overrides(use_loss_t=False, use_loss_e=False)
        batch = assemble_batch(kg, small_world.corpus, config, len(small_world.vocab), 0)
        assert not retrieve(memory, batch.km_entities).requires_grad

        def loss_fn():
            return total_loss(compute_losses(model, memory, kg, batch, config, phases=('km',)))

        params = model.named_parameters()
        lm_params = [p for n, p in params.items() if n.startswith('language.')]
        km_params = [params['heads.category.weight'], params['heads.relation_hidden.weight']]
        result = check_gradients(loss_fn, lm_params + km_params, samples=3, seed=1)
        assert result.passed, result.failures()
        model.zero_grad()
        loss_fn().backward()
        assert all(p.grad is None or not np.any(p.grad) for p in lm_params)
        assert all(np.any(p.grad_or_zeros() != 0) for p in km_params)


class TestTraining:
    """Tests for optimizer steps and the loop"""

    def test_warmup_origin_skips_lm_group(self, setup, small_config, small_world):
        """Test step 0 moves KM parameters but not LM parameters"""
        model, memory, optimizer = setup
        before = model.state_arrays()
        report = pretrain_step(model, optimizer, memory, small_world.kg, small_world.corpus, small_config, 0)
        after = model.state_arrays()
        assert report.lr_lm == 0.0 and report.lr_km > 0.0
        assert np.array_equal(before['language.token_embedding.table'], after['language.token_embedding.table'])
        assert any(not np.array_equal(before[n], after[n]) for n in before if n.startswith('knowledge.'))

    def test_knowledge_phase_leaves_language_untouched(self, setup, small_config, small_world):
        """Test an alternating KM-only step neither decays nor counts an update on LM parameters"""
        model, memory, _ = setup
        config = small_config.with_overrides(alternate_steps=True)
        optimizer = build_optimizer(model, config)
        before = model.state_arrays()
        report = pretrain_step(model, optimizer, memory, small_world.kg, small_world.corpus, config, 2)
        assert report.lr_lm > 0.0
        params = model.named_parameters()
        table = params['language.token_embedding.table']
        assert np.array_equal(before['language.token_embedding.table'], table.data)
        assert table.t == 0 and not np.any(table.m)
        assert params['heads.category.weight'].t == 1

    def test_non_finite_loss_aborts(self, setup, small_config, small_world):
        """Test a NaN weight raises NonFiniteLossError naming the step"""
        model, memory, optimizer = setup
        model.named_parameters()['heads.category.weight'].data[:] = np.nan
        with pytest.raises(NonFiniteLossError, match="step 0"):
            pretrain_step(model, optimizer, memory, small_world.kg, small_world.corpus, small_config, 0)

    def test_metrics_and_checkpoint_calls(self, setup, small_config, small_world):
        """Test one metrics row per step and checkpoints every interval and at the end"""
        model, memory, optimizer = setup
        calls = []
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, 'metrics.csv')
            reports = train(model, optimizer, memory, small_world.kg, small_world.corpus, small_config,
                            0, 5, metrics_path=path, on_checkpoint=calls.append)
            with open(path, newline='') as f:
                rows = list(csv.reader(f))
        assert len(reports) == 5
        assert rows[0][0] == 'step'
        assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3, 4]
        assert calls == [2, 4, 5]

    def test_runs_are_reproducible(self, small_config, small_world):
        """Test two runs with equal seeds produce equal losses and weights"""
        kg = small_world.kg
        results = []
        for _ in range(2):
            model = JaketModel(small_config, len(small_world.vocab), kg.num_categories, kg.num_relations, seed=0)
            memory = build_memory(model.language, kg, small_config)
            reports = train(model, build_optimizer(model, small_config), memory, kg, small_world.corpus,
                            small_config, 0, 3)
            results.append(([r.to_row() for r in reports], model.state_arrays()))
        assert results[0][0] == results[1][0]
        assert all(np.array_equal(results[0][1][k], results[1][1][k]) for k in results[0][1])


class TestHeldout:
    """Tests for the held-out split and masked-entity hits"""

    def test_split_sizes(self, small_world):
        """Test the held-out share is rounded and disjoint"""
        train_part, heldout = split_heldout(small_world.corpus, 0.1, seed=0)
        assert len(heldout) == 30
        assert len(train_part) + len(heldout) == len(small_world.corpus)

    def test_split_of_nothing(self, small_world):
        """Test a zero fraction keeps everything for training"""
        assert split_heldout(small_world.corpus, 0.0) == (list(small_world.corpus), [])

    def test_hits_in_range(self, setup, small_config, small_world):
        """Test hits@1 is a rate over a positive mention count"""
        model, memory, _ = setup
        hits, count = masked_entity_hits(model, memory, small_world.kg, small_world.corpus[:8], small_config)
        assert count >= 8
        assert 0.0 <= hits <= 1.0

    def test_ties_are_misses(self, setup, small_config, small_world):
        """Test a memory of identical rows scores no hits"""
        model, memory, _ = setup
        memory.matrix[:] = 0.0
        hits, count = masked_entity_hits(model, memory, small_world.kg, small_world.corpus[:8], small_config)
        assert count >= 8
        assert hits == 0.0
