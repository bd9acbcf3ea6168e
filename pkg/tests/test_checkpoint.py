import json
import os
import tempfile

import numpy as np
import pytest

from checkpoint import (
    check_architecture,
    check_data,
    checkpoint_path,
    latest_checkpoint,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    sidecar_path,
)
from exceptions import CheckpointError
from memory import build_memory
from model import JaketModel
from pretrain import build_optimizer, train


class TestSaveLoad:
    """Tests for writing and reading checkpoints"""

    def test_bitwise_round_trip(self, tiny_model, tiny_config, star_graph):
        """Test parameters, AdamW slots and memory come back bit for bit"""
        for p in tiny_model.named_parameters().values():
            p.m = p.data * 0.5
            p.v = p.data * p.data
            p.t = 7
        memory = build_memory(tiny_model.language, star_graph, tiny_config)
        memory.updates, memory.steps_since = 2, 4
        with tempfile.TemporaryDirectory() as tmpdir:
            path = save_checkpoint(checkpoint_path(tmpdir, 12), tiny_model, 12, memory=memory, data_digest='abc')
            ckpt = load_checkpoint(path)
        restored = restore_model(ckpt)
        assert ckpt.step == 12 and ckpt.data_digest == 'abc'
        for name, p in tiny_model.named_parameters().items():
            q = restored.named_parameters()[name]
            np.testing.assert_array_equal(q.data, p.data)
            np.testing.assert_array_equal(q.m, p.m)
            np.testing.assert_array_equal(q.v, p.v)
            assert q.t == 7
        np.testing.assert_array_equal(ckpt.memory['matrix'], memory.matrix)
        assert ckpt.memory['counters'].tolist() == [2, 4]

    def test_path_names(self):
        """Test checkpoint files are zero-padded by step with a JSON sidecar"""
        path = checkpoint_path('out', 40)
        assert os.path.basename(path) == 'ckpt_000040.npz'
        assert sidecar_path(path).endswith('ckpt_000040.json')

    def test_missing(self):
        """Test a missing checkpoint raises CheckpointError"""
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint('/nonexistent/ckpt_000001.npz')

    def test_version_mismatch(self, tiny_model):
        """Test an unknown format version is refused"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = save_checkpoint(checkpoint_path(tmpdir, 1), tiny_model, 1)
            meta_path = sidecar_path(path)
            with open(meta_path) as f:
                meta = json.load(f)
            meta['version'] = 99
            with open(meta_path, 'w') as f:
                json.dump(meta, f)
            with pytest.raises(CheckpointError, match="version 99"):
                load_checkpoint(path)

    def test_latest(self, tiny_model):
        """Test the highest-numbered complete checkpoint is found"""
        with tempfile.TemporaryDirectory() as tmpdir:
            assert latest_checkpoint(tmpdir) is None
            for step in (2, 10, 4):
                save_checkpoint(checkpoint_path(tmpdir, step), tiny_model, step)
            open(os.path.join(tmpdir, 'ckpt_000099.npz'), 'w').close()
            assert latest_checkpoint(tmpdir) == checkpoint_path(tmpdir, 10)


class TestCompatibility:
    """Tests for architecture and data checks"""

    def test_architecture_mismatch(self, tiny_model, tiny_config):
        """Test restoring into a wider config is refused"""
        with tempfile.TemporaryDirectory() as tmpdir:
            ckpt = load_checkpoint(save_checkpoint(checkpoint_path(tmpdir, 1), tiny_model, 1))
        wider = tiny_config.with_overrides(hidden_size=16)
        with pytest.raises(CheckpointError, match="hidden_size=8 vs 16"):
            check_architecture(ckpt, wider)
        restore_model(ckpt, tiny_config.with_overrides(finetune_lr=0.5))

    def test_data_mismatch(self, tiny_model):
        """Test a checkpoint for another vocabulary is refused"""
        with tempfile.TemporaryDirectory() as tmpdir:
            ckpt = load_checkpoint(save_checkpoint(checkpoint_path(tmpdir, 1), tiny_model, 1))
        check_data(ckpt, tiny_model.vocab_size, tiny_model.num_categories, tiny_model.num_relations)
        with pytest.raises(CheckpointError, match="vocabulary"):
            check_data(ckpt, tiny_model.vocab_size + 1, tiny_model.num_categories, tiny_model.num_relations)


class TestResume:
    """Tests for resuming pre-training"""

    def test_resume_matches_uninterrupted_run(self, small_config, small_world):
        """Test stopping, saving and resuming reproduces the continuous run exactly"""
        kg, corpus = small_world.kg, small_world.corpus
        vocab_size = len(small_world.vocab)

        def fresh():
            model = JaketModel(small_config, vocab_size, kg.num_categories, kg.num_relations, seed=0)
            return model, build_memory(model.language, kg, small_config)

        model, memory = fresh()
        straight = train(model, build_optimizer(model, small_config), memory, kg, corpus, small_config, 0, 4)

        first, first_memory = fresh()
        head = train(first, build_optimizer(first, small_config), first_memory, kg, corpus, small_config, 0, 2)
        with tempfile.TemporaryDirectory() as tmpdir:
            path = save_checkpoint(checkpoint_path(tmpdir, 2), first, 2, memory=first_memory)
            ckpt = load_checkpoint(path)
        resumed = restore_model(ckpt)
        resumed_memory = build_memory(resumed.language, kg, small_config)
        resumed_memory.load_state(ckpt.memory)
        tail = train(resumed, build_optimizer(resumed, small_config), resumed_memory, kg, corpus, small_config,
                     ckpt.step, 4)

        assert [r.to_row() for r in head + tail] == [r.to_row() for r in straight]
        final = model.state_arrays()
        for name, value in resumed.state_arrays().items():
            np.testing.assert_array_equal(value, final[name])
        np.testing.assert_array_equal(resumed_memory.matrix, memory.matrix)
