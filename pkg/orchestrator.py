"""Command flows: world generation, pre-training, fine-tuning, evaluation, gradient check, memory benchmark."""
import csv
import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from adapt_eval import (
    TRAINING_FRACTIONS,
    eval_fewshot_pair,
    eval_kgqa,
    finetune_entity_classification,
    finetune_kgqa,
    run_ablation_grid,
    split_questions,
    train_pair_head,
)
from checkpoint import (
    Checkpoint,
    check_data,
    checkpoint_path,
    latest_checkpoint,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from config import BENCH_HEADER, REPORT_HEADER, SHOW_PROGRESS, TrainConfig
from corpus import Vocabulary
from exceptions import ConfigError, DataFormatError, InsufficientDataError
from graph_store import KnowledgeGraph, sample_neighborhood
from logger import setup_logger
from memory import (
    EntityMemory,
    build_memory,
    build_relation_memory,
    encode_all,
    maybe_refresh,
    rebuild_for_unseen,
    retrieve,
)
from model import JaketModel
from models import AnnotatedSequence, EvalReport, Question
from numerics import Tensor, check_gradients, no_grad
from pretrain import (
    assemble_batch,
    build_optimizer,
    compute_losses,
    language_forward,
    masked_entity_hits,
    split_heldout,
    total_loss,
    train,
)
from synth_world import (
    EPISODE_FILE,
    MANIFEST_FILE,
    QA_FILES,
    VOCAB_FILE,
    WorldConfig,
    generate_episodes,
    generate_qa,
    generate_world,
    load_episodes,
    load_part,
    load_questions,
    partition_world,
    question_descriptions,
    write_episodes,
    write_part,
    write_questions,
)
from utils import ensure_dir, file_digest, format_duration

logger = setup_logger(__name__)

PARTS = ('full', 'pretrain', 'unseen')
TASKS = ('entity', 'kgqa', 'fewshot', 'ablation', 'masked-entity')
METRICS_FILE = 'metrics.csv'
CONFIG_ECHO_FILE = 'config.txt'
# Shortest benchmark whose speedup ratio is reported without a warning
MIN_BENCH_STEPS = 100

StatusCallback = Optional[Callable[[str], None]]


@dataclass
class OrchestratorResult:
    status: str
    message: str
    output_path: Optional[str] = None
    reports: List[EvalReport] = field(default_factory=list)
    details: Dict[str, object] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == 'ok'


@dataclass
class DataBundle:
    """A generated data directory, loaded."""
    vocab: Vocabulary
    manifest: Dict[str, object]
    num_categories: int

    def part(self, data_dir: str, name: str) -> Tuple[KnowledgeGraph, List[AnnotatedSequence]]:
        return load_part(os.path.join(data_dir, name), self.vocab, self.num_categories)


def _notify_status(callback: StatusCallback, message: str) -> None:
    if callback:
        callback(message)


def write_reports(reports: Sequence[EvalReport], path: str) -> str:
    ensure_dir(os.path.dirname(path) or '.')
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_HEADER)
        writer.writerows(r.to_row() for r in reports)
    return path


def load_data(data_dir: str) -> DataBundle:
    """
    Raises:
        DataFormatError: no manifest or vocabulary in ``data_dir``
    """
    manifest_path = os.path.join(data_dir, MANIFEST_FILE)
    vocab_path = os.path.join(data_dir, VOCAB_FILE)
    if not os.path.exists(manifest_path) or not os.path.exists(vocab_path):
        raise DataFormatError(f"{data_dir} is not a generated data directory (run gen-data first)")
    try:
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"unreadable manifest: {exc}", path=manifest_path) from exc
    return DataBundle(
        vocab=Vocabulary.from_file(vocab_path),
        manifest=manifest,
        num_categories=int(manifest['config']['num_categories']),
    )


# -- gen-data ---------------------------------------------------------------

def run_gen_data(config: TrainConfig, data_dir: str, status_callback: StatusCallback = None) -> OrchestratorResult:
    """Generate the world, its pre-training/unseen partitions, QA and episode files, and the manifest."""
    _notify_status(status_callback, "Generating synthetic world...")
    world = generate_world(WorldConfig.from_train_config(config))
    pretrain_part, unseen_part = partition_world(world, config.unseen_fraction, seed=config.seed)

    ensure_dir(data_dir)
    written = [world.vocab.to_file(os.path.join(data_dir, VOCAB_FILE))]
    written += write_part(world.kg, world.corpus, world.vocab, os.path.join(data_dir, 'full'))
    written += write_part(pretrain_part.kg, pretrain_part.corpus, world.vocab, os.path.join(data_dir, 'pretrain'))
    unseen_dir = os.path.join(data_dir, 'unseen')
    written += write_part(unseen_part.kg, unseen_part.corpus, world.vocab, unseen_dir)

    _notify_status(status_callback, "Generating questions and episodes...")
    skipped = []
    for hops, name in sorted(QA_FILES.items()):
        try:
            questions = generate_qa(unseen_part.kg, unseen_part.names, world.vocab, hops,
                                    config.qa_questions, seed=config.seed + hops)
        except InsufficientDataError as exc:
            logger.warning("Skipping %s-hop questions: %s", hops, exc)
            skipped.append(name)
            continue
        written.append(write_questions(questions, world.vocab, os.path.join(unseen_dir, name)))
    try:
        episodes = generate_episodes(unseen_part.kg, unseen_part.corpus, config.fewshot_n, config.fewshot_k,
                                     config.fewshot_queries, config.episode_count, seed=config.seed)
        written.append(write_episodes(episodes, os.path.join(unseen_dir, EPISODE_FILE)))
    except InsufficientDataError as exc:
        logger.warning("Skipping few-shot episodes: %s", exc)
        skipped.append(EPISODE_FILE)

    manifest = {
        'seed': config.seed,
        'config': config.to_dict(),
        'signal_accuracy': world.signal_accuracy,
        'counts': {
            name: {'entities': part.num_entities, 'triplets': part.num_triplets}
            for name, part in zip(PARTS, (world.kg, pretrain_part.kg, unseen_part.kg))
        },
        'skipped': skipped,
        'files': {os.path.relpath(p, data_dir): file_digest(p) for p in sorted(written)},
    }
    manifest_path = os.path.join(data_dir, MANIFEST_FILE)
    with open(manifest_path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info("Wrote %s files and the manifest to %s", len(written), data_dir)
    return OrchestratorResult(status='ok', message=f"Generated data in {data_dir}", output_path=manifest_path,
                              details={'files': len(written), 'skipped': skipped})


# -- pretrain ---------------------------------------------------------------

def run_pretrain(config: TrainConfig, data_dir: str, out_dir: str, steps: Optional[int] = None,
                 resume: Optional[str] = None, status_callback: StatusCallback = None) -> OrchestratorResult:
    """
    Pre-train on the pre-training partition, writing metrics and checkpoints to ``out_dir``.

    ``resume`` is a checkpoint path, or ``'latest'`` for the newest one in ``out_dir``.
    Steps run up to ``steps`` (default ``total_steps``); the rate schedule always
    spans ``total_steps``.
    """
    data = load_data(data_dir)
    kg, corpus = data.part(data_dir, 'pretrain')
    train_corpus, heldout = split_heldout(corpus, config.heldout_fraction, seed=config.seed)
    if not train_corpus:
        raise InsufficientDataError("the pre-training corpus is empty")
    ensure_dir(out_dir)
    config.save(os.path.join(out_dir, CONFIG_ECHO_FILE))
    digest = data.manifest.get('files', {}).get(os.path.join('pretrain', 'triplets.tsv'))

    if resume == 'latest':
        resume = latest_checkpoint(out_dir)
    if resume:
        _notify_status(status_callback, f"Resuming from {resume}...")
        ckpt = load_checkpoint(resume)
        check_data(ckpt, len(data.vocab), kg.num_categories, kg.num_relations, config.hidden_size)
        model = restore_model(ckpt, config)
        memory = build_memory(model.language, kg, config)
        memory.load_state(ckpt.memory)
        start = ckpt.step
    else:
        model = JaketModel(config, len(data.vocab), kg.num_categories, kg.num_relations, seed=config.seed)
        memory = build_memory(model.language, kg, config)
        start = 0
    end = steps if steps is not None else config.total_steps
    if end < start:
        raise ConfigError(f"checkpoint is at step {start}, past the requested {end}")

    optimizer = build_optimizer(model, config)
    relation_table = None
    if config.relation_mode_pretrain == 'context':
        relation_table = build_relation_memory(model.language, kg, config).matrix

    def on_checkpoint(next_step: int) -> None:
        save_checkpoint(checkpoint_path(out_dir, next_step), model, next_step, memory, digest)

    _notify_status(status_callback, f"Pre-training steps {start}..{end}...")
    started = time.perf_counter()
    metrics_path = os.path.join(out_dir, METRICS_FILE)
    reports = train(model, optimizer, memory, kg, train_corpus, config, start, end,
                    metrics_path=metrics_path, on_checkpoint=on_checkpoint, relation_table=relation_table)
    elapsed = time.perf_counter() - started

    details: Dict[str, object] = {'steps': len(reports), 'final_step': end, 'memory_updates': memory.updates}
    if heldout:
        hits, count = masked_entity_hits(model, memory, kg, heldout, config, seed=config.seed,
                                         relation_table=relation_table)
        details.update({'heldout_hits_at_1': hits, 'heldout_mentions': count})
        logger.info("Held-out masked-entity hits@1: %.3f over %s mentions", hits, count)
    logger.info("Pre-trained %s steps in %s", len(reports), format_duration(elapsed))
    return OrchestratorResult(status='ok', message=f"Pre-trained to step {end}", output_path=metrics_path,
                              details=details)


# -- finetune / eval ---------------------------------------------------------

def _load_model(checkpoint: Optional[str], config: TrainConfig, data: DataBundle,
                kg: KnowledgeGraph) -> Tuple[Optional[JaketModel], Optional[Checkpoint]]:
    if not checkpoint:
        return None, None
    ckpt = load_checkpoint(checkpoint)
    check_data(ckpt, len(data.vocab), kg.num_categories, kg.num_relations, config.hidden_size)
    return restore_model(ckpt, config), ckpt


def _fresh_or(model: Optional[JaketModel], config: TrainConfig, data: DataBundle, kg: KnowledgeGraph,
              seed: int) -> JaketModel:
    if model is not None:
        return model.copy()
    return JaketModel(config, len(data.vocab), kg.num_categories, kg.num_relations, seed=seed)


def _questions(data_dir: str, data: DataBundle) -> Dict[int, List[Question]]:
    found = {}
    for hops, name in sorted(QA_FILES.items()):
        path = os.path.join(data_dir, 'unseen', name)
        if os.path.exists(path):
            found[hops] = load_questions(path, data.vocab)
    if not found:
        raise InsufficientDataError(f"no question files under {data_dir}/unseen")
    return found


def _qa_memory(model: JaketModel, kg: KnowledgeGraph, config: TrainConfig,
               train_questions: Sequence[Question]) -> EntityMemory:
    overrides = question_descriptions(train_questions) if config.qa_question_descriptions else None
    return rebuild_for_unseen(model.language, kg, config, overrides=overrides)


def run_finetune(config: TrainConfig, data_dir: str, out_dir: str, task: str, checkpoint: Optional[str] = None,
                 status_callback: StatusCallback = None) -> OrchestratorResult:
    """
    Fine-tune on the unseen partition and report.

    Tasks: ``entity`` (classification at each training fraction), ``kgqa``,
    ``fewshot`` and ``ablation`` (the baseline grid over ``ablation_seeds`` seeds).
    Without a checkpoint the model starts fresh.
    """
    if task not in TASKS or task == 'masked-entity':
        raise ConfigError(f"finetune task must be one of entity, kgqa, fewshot, ablation; got {task!r}")
    data = load_data(data_dir)
    kg, corpus = data.part(data_dir, 'unseen')
    pretrained, _ = _load_model(checkpoint, config, data, kg)
    ensure_dir(out_dir)
    seed = config.seed
    reports: List[EvalReport] = []
    output_path = None
    _notify_status(status_callback, f"Fine-tuning {task}...")

    if task == 'entity':
        label = 'pretrained' if pretrained is not None else 'fresh'
        for fraction in TRAINING_FRACTIONS:
            model = _fresh_or(pretrained, config, data, kg, seed)
            memory = rebuild_for_unseen(model.language, kg, config)
            reports += finetune_entity_classification(model, kg, memory, config, fraction, seed,
                                                      config_label=label)
    elif task == 'ablation':
        seeds = list(range(seed, seed + config.ablation_seeds))
        reports += run_ablation_grid(kg, config, seeds, pretrained=pretrained, vocab_size=len(data.vocab),
                                     fraction=config.finetune_fraction, text_only=True)
    elif task == 'kgqa':
        model = _fresh_or(pretrained, config, data, kg, seed)
        questions = [q for qs in _questions(data_dir, data).values() for q in qs]
        train_q, test_q = split_questions(questions, config.qa_train_fraction, seed)
        memory = _qa_memory(model, kg, config, train_q)
        finetune_kgqa(model, kg, memory, train_q, config, seed)
        output_path = save_checkpoint(os.path.join(out_dir, 'finetuned_kgqa.npz'), model, config.qa_finetune_steps,
                                      memory)
        reports += _kgqa_reports(model, memory, kg, test_q, config, seed)
    else:
        model = _fresh_or(pretrained, config, data, kg, seed)
        episodes = load_episodes(os.path.join(data_dir, 'unseen', EPISODE_FILE), corpus)
        train_pair_head(model, episodes.train, config, data.vocab.separator_id, seed)
        output_path = save_checkpoint(os.path.join(out_dir, 'finetuned_fewshot.npz'), model,
                                      config.fewshot_train_steps)
        reports.append(eval_fewshot_pair(model, episodes.test, data.vocab.separator_id, seed))

    report_path = write_reports(reports, os.path.join(out_dir, f"reports_{task}.csv"))
    for report in reports:
        logger.info("%s %s %s %s = %.4f (seed %s)", report.task, report.config, report.split, report.metric,
                    report.value, report.seed)
    return OrchestratorResult(status='ok', message=f"Fine-tuned {task}", output_path=output_path or report_path,
                              reports=reports, details={'report_path': report_path})


def _kgqa_reports(model: JaketModel, memory: EntityMemory, kg: KnowledgeGraph, questions: Sequence[Question],
                  config: TrainConfig, seed: int) -> List[EvalReport]:
    reports = []
    for hops in sorted({q.hops for q in questions}):
        subset = [q for q in questions if q.hops == hops]
        reports.append(eval_kgqa(model, subset, memory, kg, config, degrade=False, seed=seed))
        reports.append(eval_kgqa(model, subset, memory, kg, config, degrade=True, seed=seed))
    return reports


def run_eval(config: TrainConfig, data_dir: str, out_dir: str, task: str, checkpoint: str,
             status_callback: StatusCallback = None) -> OrchestratorResult:
    """
    Evaluate a checkpoint without further training.

    ``masked-entity`` scores held-out pre-training text with a pre-training
    checkpoint; ``kgqa`` and ``fewshot`` score the held-out questions or the
    meta-test episodes with the checkpoint ``finetune`` wrote.
    """
    if task not in ('masked-entity', 'kgqa', 'fewshot'):
        raise ConfigError(f"eval task must be one of masked-entity, kgqa, fewshot; got {task!r}")
    if not checkpoint:
        raise ConfigError("eval needs --checkpoint")
    data = load_data(data_dir)
    ensure_dir(out_dir)
    seed = config.seed
    _notify_status(status_callback, f"Evaluating {task}...")

    if task == 'masked-entity':
        kg, corpus = data.part(data_dir, 'pretrain')
        ckpt = load_checkpoint(checkpoint)
        check_data(ckpt, len(data.vocab), kg.num_categories, kg.num_relations, config.hidden_size)
        model = restore_model(ckpt, config)
        memory = build_memory(model.language, kg, config, frozen=True)
        if ckpt.memory:
            memory.load_state(ckpt.memory)
        _, heldout = split_heldout(corpus, config.heldout_fraction, seed=seed)
        if not heldout:
            raise InsufficientDataError("no held-out sequences; raise heldout_fraction")
        relation_table = None
        if config.relation_mode_pretrain == 'context':
            relation_table = build_relation_memory(model.language, kg, config).matrix
        hits, _ = masked_entity_hits(model, memory, kg, heldout, config, seed=seed, relation_table=relation_table)
        reports = [EvalReport('masked-entity', 'pretrained', 'heldout', 'hits@1', hits, seed)]
    elif task == 'kgqa':
        kg, _ = data.part(data_dir, 'unseen')
        model, ckpt = _load_model(checkpoint, config, data, kg)
        questions = [q for qs in _questions(data_dir, data).values() for q in qs]
        train_q, test_q = split_questions(questions, config.qa_train_fraction, seed)
        memory = _qa_memory(model, kg, config, train_q)
        if ckpt.memory:
            memory.load_state(ckpt.memory)
        reports = _kgqa_reports(model, memory, kg, test_q, config, seed)
    else:
        kg, corpus = data.part(data_dir, 'unseen')
        model, _ = _load_model(checkpoint, config, data, kg)
        episodes = load_episodes(os.path.join(data_dir, 'unseen', EPISODE_FILE), corpus)
        reports = [eval_fewshot_pair(model, episodes.test, data.vocab.separator_id, seed)]

    report_path = write_reports(reports, os.path.join(out_dir, f"eval_{task}.csv"))
    for report in reports:
        logger.info("%s %s %s = %.4f", report.task, report.split, report.metric, report.value)
    return OrchestratorResult(status='ok', message=f"Evaluated {task}", output_path=report_path, reports=reports)


# -- grad-check ----------------------------------------------------------------

def run_grad_check(config: TrainConfig, out_dir: Optional[str] = None, corrupt: Optional[str] = None,
                   status_callback: StatusCallback = None) -> OrchestratorResult:
    """
    Central-difference check of every parameter through all four losses, the
    fusion and both relation-aware GAT terms, on a world built from ``config``.

    ``corrupt`` names a parameter whose analytic gradient is offset (negative control).
    """
    _notify_status(status_callback, "Building the gradient-check world...")
    world = generate_world(WorldConfig.from_train_config(config))
    kg = world.kg
    model = JaketModel(config, len(world.vocab), kg.num_categories, kg.num_relations, seed=config.seed)
    memory = build_memory(model.language, kg, config, frozen=True)
    relation_table = build_relation_memory(model.language, kg, config).matrix
    batch = assemble_batch(kg, world.corpus, config, len(world.vocab), step=0)

    def loss_fn() -> Tensor:
        losses = compute_losses(model, memory, kg, batch, config, ('km', 'lm'), 'context', relation_table)
        missing = [name for name, term in losses.items() if term is None]
        if missing:
            logger.warning("Loss term(s) %s absent from the gradient-check batch", missing)
        return total_loss(losses)

    _notify_status(status_callback, "Comparing gradients...")
    result = check_gradients(
        loss_fn,
        list(model.named_parameters().values()),
        h=config.grad_check_h,
        tolerance=config.grad_check_tol,
        floor=config.grad_check_floor,
        samples=config.grad_check_samples,
        seed=config.seed,
        corrupt=corrupt,
    )
    output_path = None
    if out_dir:
        output_path = os.path.join(ensure_dir(out_dir), 'grad_check.csv')
        with open(output_path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['parameter', 'max_relative_error', 'probes', 'passed'])
            for name in sorted(result.errors):
                error = result.errors[name]
                writer.writerow([name, repr(error), result.probes[name], int(error <= result.tolerance)])
    failures = result.failures()
    if failures:
        logger.error("Gradient check failed for %s parameter(s): %s", len(failures), ", ".join(failures[:5]))
        return OrchestratorResult(status='failed', message=f"Gradient check failed (worst {result.worst:.3g})",
                                  output_path=output_path, details={'errors': result.errors})
    logger.info("Gradient check passed for %s parameters (worst %.3g)", len(result.errors), result.worst)
    return OrchestratorResult(status='ok', message=f"Gradient check passed (worst {result.worst:.3g})",
                              output_path=output_path, details={'errors': result.errors})


# -- bench-memory --------------------------------------------------------------

def _bench_step(model: JaketModel, memory: EntityMemory, kg: KnowledgeGraph, config: TrainConfig,
                corpus: Sequence[AnnotatedSequence], step: int, recompute: bool,
                relation_table: Optional[np.ndarray] = None) -> float:
    """Seconds for one batch's entity inputs, KM forward and fused LM forward."""
    started = time.perf_counter()
    batch = assemble_batch(kg, corpus, config, model.vocab_size, step)
    targets = [int(e) for e in batch.km_entities] + batch.fusion_entities
    subgraph = sample_neighborhood(kg, targets, hops=config.hops, fanout=config.fanout, seed=batch.subgraph_seed)
    with no_grad():
        if recompute:
            nodes = [int(n) for n in subgraph.nodes]
            e0 = Tensor(encode_all(model.language, [memory.descriptions[n] for n in nodes],
                                   [memory.spans[n] for n in nodes], memory.batch_size))
        else:
            e0 = retrieve(memory, subgraph.nodes)
        e_km = model.knowledge.forward(subgraph, e0, config.relation_mode_pretrain, relation_table)
        row_of = {int(e): i for i, e in enumerate(subgraph.targets)}
        language_forward(model, batch.ids, batch.pad_mask, batch.sequences, e_km, row_of)
    return time.perf_counter() - started


def run_bench_memory(config: TrainConfig, data_dir: str, out_dir: str, steps: Optional[int] = None,
                     status_callback: StatusCallback = None) -> OrchestratorResult:
    """
    Per-step time with memory retrieval (scheduled refreshes included) against
    encoding every sampled entity's description on the fly.

    Runs shorter than ``MIN_BENCH_STEPS`` still complete, with a warning that
    the ratio understates the steady-state speedup.
    """
    data = load_data(data_dir)
    kg, corpus = data.part(data_dir, 'pretrain')
    steps = steps or config.bench_steps
    if steps < MIN_BENCH_STEPS:
        logger.warning("Benchmarking only %s steps (fewer than %s); the speedup ratio may be understated",
                       steps, MIN_BENCH_STEPS)
    model = JaketModel(config, len(data.vocab), kg.num_categories, kg.num_relations, seed=config.seed)
    memory = build_memory(model.language, kg, config)
    relation_table = None
    if config.relation_mode_pretrain == 'context':
        relation_table = build_relation_memory(model.language, kg, config).matrix
    ensure_dir(out_dir)
    trace_path = os.path.join(out_dir, 'bench_memory.csv')
    totals = {'retrieve': 0.0, 'recompute': 0.0}
    _notify_status(status_callback, f"Benchmarking {steps} steps per mode...")
    with open(trace_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(BENCH_HEADER)
        for step in tqdm(range(steps), desc='Benchmarking memory', disable=not SHOW_PROGRESS):
            seconds = _bench_step(model, memory, kg, config, corpus, step, recompute=False,
                                  relation_table=relation_table)
            started = time.perf_counter()
            refreshed = maybe_refresh(memory, model.language, step)
            seconds += time.perf_counter() - started
            totals['retrieve'] += seconds
            writer.writerow([step, 'retrieve', repr(seconds), int(refreshed)])

            seconds = _bench_step(model, memory, kg, config, corpus, step, recompute=True,
                                  relation_table=relation_table)
            totals['recompute'] += seconds
            writer.writerow([step, 'recompute', repr(seconds), 0])

    ratio = totals['recompute'] / totals['retrieve'] if totals['retrieve'] > 0 else float('inf')
    logger.info("Memory retrieval: %s per step; on-the-fly encoding: %s per step; speedup %.2fx",
                format_duration(totals['retrieve'] / steps), format_duration(totals['recompute'] / steps), ratio)
    return OrchestratorResult(status='ok', message=f"Speedup {ratio:.2f}x", output_path=trace_path,
                              details={'ratio': ratio, 'refreshes': memory.updates, **totals})
