"""
Checkpoints: an ``.npz`` of named arrays (parameters, AdamW slots, memory state)
with a JSON sidecar holding the format version, step and config echo.
"""
import glob
import json
import os
import re
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from config import CHECKPOINT_VERSION, TrainConfig
from exceptions import CheckpointError, ConfigError
from logger import setup_logger
from memory import EntityMemory
from model import JaketModel
from utils import ensure_dir

logger = setup_logger(__name__)

PARAM_PREFIX = 'param/'
SLOT_PREFIXES = {'m': 'adam_m/', 'v': 'adam_v/', 't': 'adam_t/'}
MEMORY_PREFIX = 'memory/'
CHECKPOINT_PATTERN = re.compile(r'^ckpt_(\d+)\.npz$')


@dataclass
class Checkpoint:
    """Everything needed to continue (or fine-tune from) a pre-training run."""
    version: int
    step: int
    config: TrainConfig
    vocab_size: int
    num_categories: int
    num_relations: int
    params: Dict[str, np.ndarray]
    slots: Dict[str, Dict[str, np.ndarray]]
    memory: Dict[str, np.ndarray] = field(default_factory=dict)
    data_digest: Optional[str] = None


def checkpoint_path(out_dir: str, step: int) -> str:
    return os.path.join(out_dir, f"ckpt_{step:06d}.npz")


def sidecar_path(path: str) -> str:
    return path[:-len('.npz')] + '.json' if path.endswith('.npz') else path + '.json'


def save_checkpoint(path: str, model: JaketModel, step: int, memory: Optional[EntityMemory] = None,
                    data_digest: Optional[str] = None) -> str:
    """
    Write ``path`` and its sidecar. Both go through a temporary file and a
    rename, so an interrupted save leaves the previous checkpoint intact.
    """
    ensure_dir(os.path.dirname(path) or '.')
    arrays: Dict[str, np.ndarray] = {}
    for name, p in model.named_parameters().items():
        arrays[PARAM_PREFIX + name] = p.data
        arrays[SLOT_PREFIXES['m'] + name] = p.m
        arrays[SLOT_PREFIXES['v'] + name] = p.v
        arrays[SLOT_PREFIXES['t'] + name] = np.asarray(p.t, dtype=np.int64)
    if memory is not None:
        for key, value in memory.to_state().items():
            arrays[MEMORY_PREFIX + key] = value

    meta = {
        'version': CHECKPOINT_VERSION,
        'step': int(step),
        'vocab_size': model.vocab_size,
        'num_categories': model.num_categories,
        'num_relations': model.num_relations,
        'data_digest': data_digest,
        'config': model.config.to_dict(),
    }
    tmp = path + '.tmp'
    with open(tmp, 'wb') as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)
    meta_path = sidecar_path(path)
    with open(meta_path + '.tmp', 'w', encoding='utf-8') as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    os.replace(meta_path + '.tmp', meta_path)
    logger.info("Checkpoint saved: %s (step %s)", path, step)
    return path


def load_checkpoint(path: str) -> Checkpoint:
    """
    Raises:
        CheckpointError: missing files, unreadable contents or a format version mismatch
    """
    meta_path = sidecar_path(path)
    if not os.path.exists(path) or not os.path.exists(meta_path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with open(meta_path, 'r', encoding='utf-8') as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read {meta_path}: {exc}") from exc
    version = meta.get('version')
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")

    params: Dict[str, np.ndarray] = {}
    slots: Dict[str, Dict[str, np.ndarray]] = {key: {} for key in SLOT_PREFIXES}
    memory: Dict[str, np.ndarray] = {}
    try:
        with np.load(path, allow_pickle=False) as archive:
            for key in archive.files:
                value = archive[key]
                if key.startswith(PARAM_PREFIX):
                    params[key[len(PARAM_PREFIX):]] = value
                elif key.startswith(MEMORY_PREFIX):
                    memory[key[len(MEMORY_PREFIX):]] = value
                else:
                    for slot, prefix in SLOT_PREFIXES.items():
                        if key.startswith(prefix):
                            slots[slot][key[len(prefix):]] = value
                            break
                    else:
                        raise CheckpointError(f"unexpected array {key!r} in {path}")
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc

    try:
        config = TrainConfig(**meta['config'])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"config echo in {meta_path} is unusable: {exc}") from exc
    logger.info("Checkpoint loaded: %s (step %s)", path, meta['step'])
    return Checkpoint(
        version=version,
        step=int(meta['step']),
        config=config,
        vocab_size=int(meta['vocab_size']),
        num_categories=int(meta['num_categories']),
        num_relations=int(meta['num_relations']),
        params=params,
        slots=slots,
        memory=memory,
        data_digest=meta.get('data_digest'),
    )


def restore_model(checkpoint: Checkpoint, config: Optional[TrainConfig] = None) -> JaketModel:
    """
    Rebuild the model with parameters and AdamW slots from ``checkpoint``.

    ``config`` (default: the echoed one) may change training settings but not
    the architecture.
    """
    config = config or checkpoint.config
    check_architecture(checkpoint, config)
    model = JaketModel(config, checkpoint.vocab_size, checkpoint.num_categories, checkpoint.num_relations)
    model.load_state_arrays(checkpoint.params)
    for name, p in model.named_parameters().items():
        try:
            p.m = np.asarray(checkpoint.slots['m'][name], dtype=np.float64).copy()
            p.v = np.asarray(checkpoint.slots['v'][name], dtype=np.float64).copy()
            p.t = int(checkpoint.slots['t'][name])
        except KeyError as exc:
            raise CheckpointError(f"optimizer slots missing for {name}") from exc
    return model


ARCHITECTURE_FIELDS = ('hidden_size', 'num_layers', 'split_layer', 'num_heads', 'max_len', 'ffn_multiplier',
                       'gat_layers', 'gat_heads')


def check_architecture(checkpoint: Checkpoint, config: TrainConfig) -> None:
    """Raises CheckpointError when ``config`` describes a different network than the checkpoint's."""
    differing = [name for name in ARCHITECTURE_FIELDS
                 if getattr(config, name) != getattr(checkpoint.config, name)]
    if differing:
        details = ", ".join(f"{n}={getattr(checkpoint.config, n)} vs {getattr(config, n)}" for n in differing)
        raise CheckpointError(f"checkpoint architecture differs from the config: {details}")


def check_data(checkpoint: Checkpoint, vocab_size: int, num_categories: int, num_relations: int,
               hidden_size: Optional[int] = None) -> None:
    """Raises CheckpointError when the checkpoint cannot serve data of these sizes."""
    problems = []
    if checkpoint.vocab_size != vocab_size:
        problems.append(f"vocabulary {checkpoint.vocab_size} vs {vocab_size}")
    if checkpoint.num_categories != num_categories:
        problems.append(f"categories {checkpoint.num_categories} vs {num_categories}")
    if checkpoint.num_relations != num_relations:
        problems.append(f"relations {checkpoint.num_relations} vs {num_relations}")
    if hidden_size is not None and checkpoint.config.hidden_size != hidden_size:
        problems.append(f"width {checkpoint.config.hidden_size} vs {hidden_size}")
    if problems:
        raise CheckpointError("checkpoint does not match the data: " + "; ".join(problems))


def latest_checkpoint(out_dir: str) -> Optional[str]:
    found = []
    for path in glob.glob(os.path.join(out_dir, 'ckpt_*.npz')):
        match = CHECKPOINT_PATTERN.match(os.path.basename(path))
        if match and os.path.exists(sidecar_path(path)):
            found.append((int(match.group(1)), path))
    return max(found)[1] if found else None
