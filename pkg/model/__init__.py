"""Model package facade."""
from typing import Dict, List

import numpy as np

from config import TrainConfig
from exceptions import CheckpointError
from model.heads import TaskHeads
from model.knowledge import GatLayer, KnowledgeModule, compose
from model.language import LanguageModule, TransformerLayer, merge_mentions
from model.layers import Module
from numerics import Parameter

# Parameter-name prefixes trained at the knowledge-module rate; everything else follows the LM rate
KM_PREFIXES = ('knowledge.', 'heads.category.', 'heads.relation.', 'heads.relation_hidden.')


class JaketModel(Module):
    """
    Language module, knowledge module and task heads of one experiment.

    Parameter names are dotted attribute paths (``language.layers.0.query.weight``)
    and are assigned once here, so they are stable across runs and checkpoints.
    """

    def __init__(self, config: TrainConfig, vocab_size: int, num_categories: int, num_relations: int,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        std = config.init_std
        self.config = config
        self.vocab_size = vocab_size
        self.num_categories = num_categories
        self.num_relations = num_relations
        self.language = LanguageModule(
            vocab_size=vocab_size,
            width=config.hidden_size,
            num_layers=config.num_layers,
            split=config.split_layer,
            heads=config.num_heads,
            max_len=config.max_len,
            ffn_multiplier=config.ffn_multiplier,
            rng=rng,
            std=std,
            eps=config.layer_norm_eps,
        )
        self.knowledge = KnowledgeModule(
            width=config.hidden_size,
            num_layers=config.gat_layers,
            heads=config.gat_heads,
            rng=rng,
            std=std,
            eps=config.layer_norm_eps,
        )
        self.heads = TaskHeads(config.hidden_size, num_categories, num_relations, vocab_size, rng, std)
        for name, p in self.named_parameters().items():
            p.name = name

    def named_parameters(self, prefix: str = '') -> Dict[str, Parameter]:
        found = {}
        for key in ('language', 'knowledge', 'heads'):
            found.update(getattr(self, key).named_parameters(f"{prefix}{key}."))
        return dict(sorted(found.items()))

    def parameter_groups(self) -> Dict[str, List[Parameter]]:
        groups: Dict[str, List[Parameter]] = {'km': [], 'lm': []}
        for name, p in self.named_parameters().items():
            groups['km' if name.startswith(KM_PREFIXES) else 'lm'].append(p)
        return groups

    def copy(self) -> 'JaketModel':
        """Independent model with identical weights (fresh optimizer slots)."""
        twin = JaketModel(self.config, self.vocab_size, self.num_categories, self.num_relations)
        twin.load_state_arrays(self.state_arrays())
        return twin

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True) -> None:
        """
        Copy parameter values in by name.

        Raises:
            CheckpointError: missing or unexpected names (strict), or a shape mismatch
        """
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        if strict and (missing or unexpected):
            raise CheckpointError(
                f"parameter names disagree: missing {missing[:5]}, unexpected {unexpected[:5]}"
            )
        for name, p in params.items():
            if name not in arrays:
                continue
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise CheckpointError(f"shape of {name} is {value.shape}, model expects {p.data.shape}")
            p.data = value.copy()


__all__ = [
    "GatLayer",
    "JaketModel",
    "KnowledgeModule",
    "LanguageModule",
    "TaskHeads",
    "TransformerLayer",
    "compose",
    "merge_mentions",
]
