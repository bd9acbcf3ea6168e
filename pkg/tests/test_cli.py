import csv
import json
import os
import subprocess
import sys
import tempfile

import pytest

from main import build_parser, resolve_config

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

SMALL_WORLD = """\
num_entities=40
num_relations=4
vocab_size=56
num_sequences=300
name_pool=8
unseen_fraction=0.5
qa_questions=20
episode_count=3
finetune_steps=4
finetune_eval_every=2
qa_finetune_steps=2
fewshot_train_steps=2
ablation_seeds=1
bench_steps=2
checkpoint_every=2
log_every=0
"""


def run_cli(*args, check=True):
    env = dict(os.environ, JAKET_PROGRESS='false')
    return subprocess.run(
        [sys.executable, os.path.join(ROOT, "main.py"), *args],
        capture_output=True,
        text=True,
        check=check,
        cwd=ROOT,
        env=env,
    )


@pytest.fixture
def workdir():
    """A temp directory holding a small-world config file"""
    with tempfile.TemporaryDirectory() as tmpdir:
        with open(os.path.join(tmpdir, 'small.cfg'), 'w') as f:
            f.write(SMALL_WORLD)
        yield tmpdir


def common(workdir):
    return ["--preset", "tiny", "--config", os.path.join(workdir, 'small.cfg'),
            "--data", os.path.join(workdir, 'data'), "--out", os.path.join(workdir, 'out')]


def read_manifest(data_dir):
    with open(os.path.join(data_dir, 'manifest.json')) as f:
        return json.load(f)


def test_cli_help():
    result = run_cli("--help")
    assert "Joint knowledge/text pre-training" in result.stdout


def test_paper_preset_is_accepted():
    """Test --preset paper and its full-scale alias resolve to the full-size model"""
    for name in ('paper', 'full-scale'):
        config = resolve_config(build_parser().parse_args(['pretrain', '--preset', name]))
        assert (config.hidden_size, config.num_layers, config.split_layer) == (768, 12, 6)


def test_unknown_command():
    """Test argparse rejects an unknown command with exit code 2"""
    result = run_cli("download", check=False)
    assert result.returncode == 2


def test_missing_data_dir_fails_cleanly(workdir):
    """Test pre-training without generated data exits 1 with a message"""
    result = run_cli("pretrain", *common(workdir), check=False)
    assert result.returncode == 1
    assert "gen-data" in result.stderr + result.stdout


class TestGenData:
    """Tests for the gen-data command"""

    def test_writes_parts_and_manifest(self, workdir):
        """Test the three partitions, vocabulary and manifest are written"""
        run_cli("gen-data", *common(workdir))
        data_dir = os.path.join(workdir, 'data')
        assert os.path.exists(os.path.join(data_dir, 'vocab.txt'))
        for part in ('full', 'pretrain', 'unseen'):
            assert os.path.isdir(os.path.join(data_dir, part))
        manifest = read_manifest(data_dir)
        assert manifest['counts']['full']['entities'] == 40
        assert manifest['files']

    def test_deterministic(self, workdir):
        """Test the same seed regenerates byte-identical files"""
        run_cli("gen-data", *common(workdir))
        first = read_manifest(os.path.join(workdir, 'data'))['files']
        run_cli("gen-data", *common(workdir))
        assert read_manifest(os.path.join(workdir, 'data'))['files'] == first


class TestPretrain:
    """Tests for the pretrain command"""

    def test_metrics_and_checkpoints(self, workdir):
        """Test one metrics row per step and checkpoints at the interval and the end"""
        run_cli("gen-data", *common(workdir))
        run_cli("pretrain", *common(workdir), "--steps", "3")
        out = os.path.join(workdir, 'out')
        with open(os.path.join(out, 'metrics.csv'), newline='') as f:
            rows = list(csv.reader(f))
        assert [r[0] for r in rows[1:]] == ['0', '1', '2']
        names = sorted(n for n in os.listdir(out) if n.endswith('.npz'))
        assert names == ['ckpt_000002.npz', 'ckpt_000003.npz']
        assert os.path.exists(os.path.join(out, 'config.txt'))

    @pytest.mark.slow
    def test_resume_matches_straight_run(self, workdir):
        """Test resuming from the latest checkpoint writes the same metrics as one run"""
        run_cli("gen-data", *common(workdir))
        straight = common(workdir)[:-1] + [os.path.join(workdir, 'straight')]
        run_cli("pretrain", *straight, "--steps", "4")
        run_cli("pretrain", *common(workdir), "--steps", "2")
        run_cli("pretrain", *common(workdir), "--steps", "4", "--checkpoint", "latest")

        def metrics(out):
            with open(os.path.join(workdir, out, 'metrics.csv'), newline='') as f:
                return [r for r in csv.reader(f) if r[0] != 'step']

        assert metrics('out') == metrics('straight')


class TestGradCheck:
    """Tests for the grad-check command"""

    @pytest.mark.slow
    def test_passes(self, workdir):
        """Test every parameter's analytic gradient matches"""
        result = run_cli("grad-check", "--out", os.path.join(workdir, 'gc'), check=False)
        assert result.returncode == 0
        assert os.path.exists(os.path.join(workdir, 'gc', 'grad_check.csv'))

    @pytest.mark.slow
    def test_corrupted_gradient_fails(self, workdir):
        """Test offsetting one parameter's gradient makes the check exit 1"""
        result = run_cli("grad-check", "--out", os.path.join(workdir, 'gc'),
                         "--corrupt", "heads.category.weight", check=False)
        assert result.returncode == 1


@pytest.mark.slow
class TestFinetuneAndEval:
    """Smoke tests for the downstream commands"""

    def test_fewshot_round_trip(self, workdir):
        """Test fine-tuning the pair head then evaluating its checkpoint"""
        run_cli("gen-data", *common(workdir))
        run_cli("finetune", *common(workdir), "--task", "fewshot")
        out = os.path.join(workdir, 'out')
        assert os.path.exists(os.path.join(out, 'reports_fewshot.csv'))
        run_cli("eval", *common(workdir), "--task", "fewshot",
                "--checkpoint", os.path.join(out, 'finetuned_fewshot.npz'))
        assert os.path.exists(os.path.join(out, 'eval_fewshot.csv'))

    def test_masked_entity_eval(self, workdir):
        """Test scoring held-out text with a pre-training checkpoint"""
        run_cli("gen-data", *common(workdir))
        run_cli("pretrain", *common(workdir), "--steps", "2")
        out = os.path.join(workdir, 'out')
        run_cli("eval", *common(workdir), "--task", "masked-entity",
                "--checkpoint", os.path.join(out, 'ckpt_000002.npz'))
        with open(os.path.join(out, 'eval_masked-entity.csv'), newline='') as f:
            rows = list(csv.reader(f))
        assert len(rows) == 2
