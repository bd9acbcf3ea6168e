"""
Configuration for the JAKET desk trainer
Process settings come from the environment; experiment settings live in TrainConfig.
"""
import dataclasses
import os
from dataclasses import dataclass
from typing import Dict, List

from exceptions import ConfigError

# Logging settings
LOG_LEVEL = os.getenv('JAKET_LOG_LEVEL', 'INFO')
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILE = os.getenv('JAKET_LOG_FILE', None)  # None = console only

# File settings
OUTPUT_DIR = os.getenv('JAKET_OUTPUT_DIR', 'output')
DATA_DIR = os.getenv('JAKET_DATA_DIR', 'data')
SHOW_PROGRESS = os.getenv('JAKET_PROGRESS', 'true').lower() == 'true'

# Vocabulary: special tokens occupy fixed ids 0-4, the pair separator follows
SPECIAL_TOKENS = ['[MASK]', '[CLS]', '[EOS]', '[PAD]', '[UNK]']
SEPARATOR_TOKEN = '[SEP]'

# Output formats
CHECKPOINT_VERSION = 1
METRICS_HEADER = ['step', 'loss_total', 'loss_c', 'loss_r', 'loss_t', 'loss_e', 'lr_lm', 'lr_km', 'refreshed']
REPORT_HEADER = ['task', 'config', 'split', 'metric', 'value', 'seed']
BENCH_HEADER = ['step', 'mode', 'seconds', 'refreshed']

RELATION_MODES = ('none', 'zero', 'context')
TRUE_WORDS = {'true', '1', 'yes', 'on'}
FALSE_WORDS = {'false', '0', 'no', 'off'}


@dataclass(frozen=True)
class TrainConfig:
    """
    Every tunable of the world generator, the two modules, training and evaluation.

    Defaults are the desk preset. Instances validate themselves on construction,
    so a config that exists is a config that passed validation.
    """
    # Synthetic world
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
    unseen_fraction: float = 0.2
    qa_questions: int = 200
    episode_count: int = 50

    # Language module
    hidden_size: int = 64
    num_layers: int = 4
    split_layer: int = 2
    num_heads: int = 4
    max_len: int = 64
    ffn_multiplier: int = 4
    layer_norm_eps: float = 1e-5
    init_std: float = 0.02

    # Knowledge module
    gat_layers: int = 2
    gat_heads: int = 4
    hops: int = 2
    fanout: int = 10
    walk_length: int = 2
    relation_mode_pretrain: str = 'none'
    relation_mode_finetune: str = 'context'

    # Pre-training batches and losses
    km_batch_roots: int = 16
    relation_batch: int = 64
    lm_batch: int = 16
    token_mask_rate: float = 0.15
    mention_mask_rate: float = 0.15
    num_candidates: int = 64
    description_max_len: int = 64
    heldout_fraction: float = 0.05
    use_loss_c: bool = True
    use_loss_r: bool = True
    use_loss_t: bool = True
    use_loss_e: bool = True
    alternate_steps: bool = False

    # Entity context memory
    memory_init_interval: int = 10
    memory_ratio: int = 2
    memory_repeat: int = 3
    memory_max_interval: int = 500
    memory_momentum: float = 0.8
    memory_batch: int = 128

    # Optimizer and schedule
    lr_lm: float = 3e-3
    lr_km: float = 5e-3
    warmup_lm: int = 20
    warmup_km: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    total_steps: int = 500

    # Run control
    checkpoint_every: int = 100
    log_every: int = 50

    # Fine-tuning and evaluation
    finetune_steps: int = 200
    finetune_lr: float = 1e-3
    finetune_eval_every: int = 10
    finetune_fraction: float = 1.0
    qa_finetune_steps: int = 200
    qa_batch: int = 16
    fewshot_n: int = 5
    fewshot_k: int = 1
    fewshot_queries: int = 5
    fewshot_train_steps: int = 200
    qa_train_fraction: float = 0.8
    qa_question_descriptions: bool = False
    ablation_seeds: int = 5

    # Gradient check and benchmark
    grad_check_h: float = 1e-5
    grad_check_tol: float = 1e-4
    grad_check_floor: float = 1e-5
    grad_check_samples: int = 16
    bench_steps: int = 100

    # Seeds and paths
    seed: int = 0
    train_seed: int = 0
    data_dir: str = DATA_DIR
    out_dir: str = OUTPUT_DIR

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Raise ConfigError when any cross-field invariant is violated."""
        positive = [
            'num_entities', 'num_relations', 'num_categories', 'vocab_size', 'num_sequences',
            'max_seq_len', 'hidden_size', 'num_layers', 'num_heads', 'max_len', 'gat_layers',
            'gat_heads', 'fanout', 'km_batch_roots', 'lm_batch', 'num_candidates',
            'description_max_len', 'memory_init_interval', 'memory_ratio', 'memory_repeat',
            'memory_max_interval', 'memory_batch', 'total_steps', 'name_pool',
            'category_tokens', 'relation_tokens', 'ffn_multiplier', 'relation_batch',
            'grad_check_samples', 'bench_steps', 'qa_batch', 'fewshot_n', 'fewshot_k',
            'fewshot_queries', 'ablation_seeds', 'checkpoint_every', 'finetune_eval_every',
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

        if not 0 < self.split_layer < self.num_layers:
            raise ConfigError(
                f"split_layer must satisfy 0 < split_layer < num_layers, got "
                f"{self.split_layer} of {self.num_layers}"
            )
        if self.hidden_size % self.num_heads:
            raise ConfigError(f"num_heads {self.num_heads} must divide hidden_size {self.hidden_size}")
        if self.hidden_size % self.gat_heads:
            raise ConfigError(f"gat_heads {self.gat_heads} must divide hidden_size {self.hidden_size}")
        if self.hops != self.gat_layers:
            raise ConfigError(f"hops ({self.hops}) must equal gat_layers ({self.gat_layers})")
        if self.max_seq_len > self.max_len:
            raise ConfigError(f"max_seq_len {self.max_seq_len} exceeds model max_len {self.max_len}")
        if self.description_max_len > self.max_len:
            raise ConfigError(
                f"description_max_len {self.description_max_len} exceeds model max_len {self.max_len}"
            )
        if not 0 <= self.memory_momentum < 1:
            raise ConfigError(f"memory_momentum must be in [0, 1), got {self.memory_momentum}")
        if not 0 < self.token_mask_rate < 1:
            raise ConfigError(f"token_mask_rate must be in (0, 1), got {self.token_mask_rate}")
        if not 0 <= self.mention_mask_rate < 1:
            raise ConfigError(f"mention_mask_rate must be in [0, 1), got {self.mention_mask_rate}")
        if not 0 < self.unseen_fraction < 1:
            raise ConfigError(f"unseen_fraction must be in (0, 1), got {self.unseen_fraction}")
        for name in ('concentration', 'homophily', 'label_rate', 'description_mention_rate',
                     'chain_rate', 'heldout_fraction'):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        if not 0 < self.qa_train_fraction < 1:
            raise ConfigError(f"qa_train_fraction must be in (0, 1), got {self.qa_train_fraction}")
        if not 0 < self.finetune_fraction <= 1:
            raise ConfigError(f"finetune_fraction must be in (0, 1], got {self.finetune_fraction}")
        for name in ('relation_mode_pretrain', 'relation_mode_finetune'):
            if getattr(self, name) not in RELATION_MODES:
                raise ConfigError(f"{name} must be one of {RELATION_MODES}, got {getattr(self, name)!r}")
        for name in ('lr_lm', 'lr_km', 'finetune_lr', 'adam_eps', 'grad_check_h', 'layer_norm_eps'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.warmup_lm > self.total_steps or self.warmup_km > self.total_steps:
            raise ConfigError("warmup steps cannot exceed total_steps")
        if self.warmup_lm < 0 or self.warmup_km < 0:
            raise ConfigError("warmup steps cannot be negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must be in [0, 1)")
        if self.walk_length < 0:
            raise ConfigError(f"walk_length cannot be negative, got {self.walk_length}")

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def coerce(cls, key: str, raw: str):
        """Convert a raw string to the declared type of ``key``."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        if key not in fields:
            raise ConfigError(f"Unknown config key: {key}")
        field_type = fields[key].type
        text = raw.strip()
        try:
            if field_type is bool:
                lowered = text.lower()
                if lowered in TRUE_WORDS:
                    return True
                if lowered in FALSE_WORDS:
                    return False
                raise ValueError(f"not a boolean: {text!r}")
            if field_type is int:
                return int(text)
            if field_type is float:
                return float(text)
            return text
        except ValueError as exc:
            raise ConfigError(f"Invalid value for {key}: {exc}") from exc

    @classmethod
    def from_file(cls, path: str, base: 'TrainConfig' = None) -> 'TrainConfig':
        """
        Load a flat key=value config file on top of ``base`` (desk defaults).

        Raises:
            ConfigError: unknown key, malformed line or invalid value
        """
        values: Dict[str, object] = {}
        try:
            with open(path, 'r', encoding='utf-8') as f:
                lines = f.readlines()
        except OSError as exc:
            raise ConfigError(f"Cannot read config file {path}: {exc}") from exc

        for line_number, line in enumerate(lines, start=1):
            stripped = line.split('#', 1)[0].strip()
            if not stripped:
                continue
            if '=' not in stripped:
                raise ConfigError(f"{path}:{line_number}: expected key=value, got {stripped!r}")
            key, raw = stripped.split('=', 1)
            key = key.strip()
            try:
                values[key] = cls.coerce(key, raw)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{line_number}: {exc}") from exc

        return (base or cls()).with_overrides(**values)

    @classmethod
    def preset(cls, name: str) -> 'TrainConfig':
        """
        Named presets: ``desk`` (defaults), ``paper`` (full-size model; alias
        ``full-scale``) and ``tiny`` (gradient checks).
        """
        if name == 'desk':
            return cls()
        if name in ('paper', 'full-scale'):
            return cls(
                hidden_size=768, num_layers=12, split_layer=6, num_heads=8, gat_heads=8,
                max_len=512, lm_batch=1024, km_batch_roots=16384,
                adam_beta1=0.9, adam_beta2=0.999, adam_eps=1e-8, weight_decay=0.01,
                lr_lm=1e-5, warmup_lm=3000, lr_km=1e-4, warmup_km=0, total_steps=100000,
            )
        if name == 'tiny':
            return cls(
                num_entities=12, num_relations=3, num_categories=3, vocab_size=40,
                num_sequences=24, max_seq_len=12, mean_degree=3, name_pool=5,
                category_tokens=2, relation_tokens=2, concentration=0.95,
                qa_questions=8, episode_count=2,
                hidden_size=8, num_layers=2, split_layer=1, num_heads=2, max_len=16,
                ffn_multiplier=2, gat_layers=1, gat_heads=2, hops=1, fanout=3,
                km_batch_roots=3, relation_batch=4, lm_batch=2, num_candidates=5,
                description_max_len=16, memory_batch=8, total_steps=20, warmup_lm=2,
                init_std=0.5, fewshot_n=2, fewshot_queries=2,
            )
        raise ConfigError(f"Unknown preset: {name}")

    def with_overrides(self, **overrides) -> 'TrainConfig':
        unknown = sorted(set(overrides) - set(self.field_names()))
        if unknown:
            raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}")
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    def to_lines(self) -> List[str]:
        """The effective config in the same key=value form ``from_file`` reads."""
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, bool):
                value = 'true' if value else 'false'
            lines.append(f"{key}={value}")
        return lines

    def save(self, path: str) -> str:
        with open(path, 'w', encoding='utf-8') as f:
            f.write("\n".join(self.to_lines()) + "\n")
        return path
