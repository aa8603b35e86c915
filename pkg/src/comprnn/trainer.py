"""Training procedures: the supervised-automaton regimen, the two-phase
curriculum search runs, and the prompt-manipulation variants.

Both experiments update weights after every episode.  The supervised run
(variant "exp1") first teaches a 29-unit LSTM the automaton transitions with
MSE on its hidden states over random well-formed input/output pairs, then
freezes it and trains the readout on atomic episodes of a concrete task set.
Search runs (variant "exp2" and its ablations) train the full 60-unit network
with cross-entropy only: atomic episodes first, then a uniform mix of all 72
tasks with held-out composed inputs excluded.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from . import net
from .automaton import READOUT_UNITS, STATE_DIM, trace_with_outputs
from .evaluation import (
    atomic_items,
    evaluate_exhaustive,
    evaluate_items,
    seen_composed_items,
    task_holdout_items,
    zero_shot_items,
)
from .prompts import CODE_CHARS, Episode, INPUT_DIM, INPUT_INDEX, episode_from_pair, render_prompt
from .records import RunRecord
from .seeding import derive_seed
from .tables import Split, TaskRef, TaskSet, dumps_task_set, load_task_set, train_inputs

VARIANTS = (
    "exp1",
    "exp2",
    "composed_only",
    "shuffled_prompts",
    "random_task_codes",
    "held_out_compositions",
)

DESK_EPISODES_PER_PHASE = 200_000
PAPER_EPISODES_PER_PHASE = 1_000_000

EXP1_LSTM_UNITS = STATE_DIM  # hidden layer mirrors the 29-unit automaton state
EXP2_LSTM_UNITS = 60


class TrainerError(ValueError):
    pass


@dataclass
class TrainConfig:
    variant: str = "exp2"
    episodes_phase1: int = DESK_EPISODES_PER_PHASE
    episodes_phase2: int = DESK_EPISODES_PER_PHASE
    init_seed: int = 0
    train_seed: int = 0
    task_set_path: str | None = None
    lstm_units: int | None = None  # default: 29 for exp1, 60 otherwise
    sigmoid_units: int = 10
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    final_output_only: bool = False
    held_out_compositions: int = 16  # task-level holdout size for that variant
    # Supervised-run schedule, calibrated on pilot runs (no published rates):
    # the tail fraction of phase 1 runs at lr * decay to settle the rare
    # stage-handoff transition, and the readout trains faster than the LSTM.
    exp1_lr_decay_tail: float = 0.2
    exp1_lr_decay_factor: float = 0.1
    exp1_phase2_lr: float = 0.01
    log_path: str | None = None
    log_every: int = 1000

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise TrainerError(f"unknown variant {self.variant!r}")
        if self.episodes_phase1 < 0 or self.episodes_phase2 < 0:
            raise TrainerError("episode counts must be non-negative")

    def resolved_lstm_units(self) -> int:
        if self.lstm_units is not None:
            return self.lstm_units
        return EXP1_LSTM_UNITS if self.variant == "exp1" else EXP2_LSTM_UNITS

    def optimizer_settings(self) -> dict:
        out = {"kind": self.optimizer, "lr": self.lr}
        if self.optimizer == "adam":
            out.update(beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        return out

    def make_optimizer(self, config: net.NetConfig, lr: float | None = None) -> net.OptState:
        return net.OptState.create(
            self.optimizer, config, lr if lr is not None else self.lr,
            **({"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}
               if self.optimizer == "adam" else {}))


class RollingSuccess:
    """Percentage of correct outputs in the most recent 100 episodes."""

    def __init__(self, window: int = 100):
        self.window: deque[bool] = deque(maxlen=window)

    def update(self, correct: bool) -> None:
        self.window.append(bool(correct))

    @property
    def rate(self) -> float:
        if not self.window:
            return 0.0
        return 100.0 * sum(self.window) / len(self.window)


class TrainLogger:
    """Newline-delimited JSON training log, one record every `every` episodes."""

    def __init__(self, path: str | Path | None, every: int = 1000):
        self.every = every
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self._losses: list[float] = []

    def record(self, phase: int, episode: int, rolling: float, loss: float) -> None:
        if self._fh is None:
            return
        self._losses.append(loss)
        if episode % self.every == 0:
            line = {
                "phase": phase,
                "episode": episode,
                "rolling_success": rolling,
                "mean_loss": sum(self._losses) / len(self._losses),
            }
            self._fh.write(json.dumps(line) + "\n")
            self._losses.clear()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class Draw(NamedTuple):
    """One sampled training episode before encoding."""

    task: TaskRef
    input: str
    prompt_codes: tuple[str, ...]


def acd_sigmoid_mask(sigmoid_units: int = 10) -> np.ndarray:
    """Connectivity mask: the sigmoid layer reads only segments A, C, and D."""
    mask = np.zeros((sigmoid_units, STATE_DIM))
    mask[:, list(READOUT_UNITS)] = 1.0
    return mask


class EpisodeBank:
    """Pre-encoded gold-feedback episodes for every (task, input) of a task set."""

    def __init__(self, task_set: TaskSet, final_output_only: bool = False):
        self.task_set = task_set
        self._episodes: dict[tuple[TaskRef, str], Episode] = {}
        self._arrays: dict[tuple[TaskRef, str], tuple[np.ndarray, np.ndarray]] = {}
        from .prompts import build_episode

        for task in task_set.all_tasks:
            for bits in task_set.inputs():
                ep = build_episode(task, task_set, bits, final_output_only)
                self._episodes[(task, bits)] = ep
                self._arrays[(task, bits)] = (ep.step_vectors, ep.target_indices())

    def episode(self, task: TaskRef, bits: str) -> Episode:
        return self._episodes[(task, bits)]

    def arrays(self, task: TaskRef, bits: str) -> tuple[np.ndarray, np.ndarray]:
        return self._arrays[(task, bits)]


def patch_prompt_codes(vectors: np.ndarray, new_codes: tuple[str, ...]) -> np.ndarray:
    """Copy of the step vectors with the prompt's code characters swapped.

    Code characters sit at prompt positions 2 (and 3 for composed tasks).
    """
    patched = vectors.copy()
    for i, code in enumerate(new_codes):
        row = 2 + i
        patched[row, :INPUT_DIM] = 0.0
        patched[row, INPUT_INDEX[code]] = 1.0
    return patched


def variant_task_pool(
    variant: str,
    phase: int,
    task_set: TaskSet,
    excluded: tuple[TaskRef, ...] = (),
) -> tuple[TaskRef, ...]:
    """Tasks an episode may be drawn from in the given curriculum phase."""
    composed = tuple(t for t in task_set.composed if t not in excluded)
    if variant == "composed_only":
        return composed
    if phase == 1:
        return task_set.atomic
    return task_set.atomic + composed


def base_draws(
    pool: tuple[TaskRef, ...],
    task_set: TaskSet,
    split: Split,
    rng: np.random.Generator,
) -> Iterator[Draw]:
    """Uniform over tasks, then uniform over admissible inputs for the task."""
    inputs_for = {
        task: (task_set.inputs() if task.kind == "atomic"
               else train_inputs(task_set, split, task))
        for task in pool
    }
    n = len(pool)
    while True:
        task = pool[rng.integers(n)]
        inputs = inputs_for[task]
        yield Draw(task, inputs[rng.integers(len(inputs))], task.codes)


def shuffled_code_bijection(
    train_seed: int, composed_tasks: tuple[TaskRef, ...]
) -> dict[TaskRef, tuple[str, ...]]:
    """One fixed random bijection over the composed codes, seeded by train_seed.

    The same mapping is applied in every training phase and at test time, so
    a code like "db" consistently denotes one underlying composed task.
    """
    rng = np.random.default_rng(derive_seed(train_seed, "code-shuffle"))
    perm = rng.permutation(len(composed_tasks))
    return {
        composed_tasks[i]: composed_tasks[int(perm[i])].codes
        for i in range(len(composed_tasks))
    }


def train_code_mapper(
    variant: str, train_seed: int, composed_tasks: tuple[TaskRef, ...]
):
    """Prompt-code treatment for composed training draws, or None for true codes."""
    if variant == "shuffled_prompts":
        mapping = shuffled_code_bijection(train_seed, composed_tasks)
        return lambda task: mapping[task]
    if variant == "random_task_codes":
        rng = np.random.default_rng(derive_seed(train_seed, "code-resample"))
        n = len(composed_tasks)
        return lambda task: composed_tasks[int(rng.integers(n))].codes
    if variant in VARIANTS:
        return None
    raise TrainerError(f"unknown variant {variant!r}")


def apply_variant(variant: str, draws: Iterator[Draw], code_mapper=None) -> Iterator[Draw]:
    """Rewrite composed draws' prompt codes through the variant's code mapper."""
    if variant not in VARIANTS:
        raise TrainerError(f"unknown variant {variant!r}")
    if code_mapper is None:
        yield from draws
        return
    for d in draws:
        if d.task.kind == "composed":
            yield d._replace(prompt_codes=tuple(code_mapper(d.task)))
        else:
            yield d


def _load_tables(
    config: TrainConfig, task_set: TaskSet | None, split: Split | None
) -> tuple[TaskSet, Split]:
    if task_set is not None and split is not None:
        return task_set, split
    if config.task_set_path is None:
        raise TrainerError("no task set: pass one in or set task_set_path")
    return load_task_set(config.task_set_path)


def task_set_hash(task_set: TaskSet, split: Split) -> str:
    return hashlib.sha256(dumps_task_set(task_set, split).encode("utf-8")).hexdigest()


def held_out_task_subset(
    task_set: TaskSet, count: int, train_seed: int
) -> tuple[TaskRef, ...]:
    """Composed tasks excluded from training for the held_out_compositions variant."""
    if not 0 < count < len(task_set.composed):
        raise TrainerError(f"held-out composition count {count} out of range")
    rng = np.random.default_rng(derive_seed(train_seed, "held-compositions"))
    picks = rng.choice(len(task_set.composed), size=count, replace=False)
    return tuple(task_set.composed[int(i)] for i in sorted(picks))


def train_exp2(
    config: TrainConfig,
    task_set: TaskSet | None = None,
    split: Split | None = None,
    run_id: int = 0,
) -> tuple[net.NetParams, RunRecord]:
    """One search-style run: cross-entropy curriculum, then free-running scores."""
    if config.variant == "exp1":
        raise TrainerError("use train_exp1 for the supervised-automaton variant")
    task_set, split = _load_tables(config, task_set, split)
    t_start = time.perf_counter()

    net_config = net.NetConfig(
        lstm_units=config.resolved_lstm_units(), sigmoid_units=config.sigmoid_units)
    params = net.init_params(config.init_seed, net_config)
    opt = config.make_optimizer(net_config)
    bank = EpisodeBank(task_set, config.final_output_only)
    grads = net.Gradients.zeros(net_config)
    rng = np.random.default_rng(config.train_seed)

    excluded: tuple[TaskRef, ...] = ()
    if config.variant == "held_out_compositions":
        excluded = held_out_task_subset(
            task_set, config.held_out_compositions, config.train_seed)

    rolling = RollingSuccess()
    logger = TrainLogger(config.log_path, config.log_every)
    code_mapper = train_code_mapper(config.variant, config.train_seed, task_set.composed)
    status, error = "ok", None
    phase1_rolling: float | None = None
    episode_counter = 0
    try:
        for phase, n_episodes in ((1, config.episodes_phase1), (2, config.episodes_phase2)):
            pool = variant_task_pool(config.variant, phase, task_set, excluded)
            draws = apply_variant(
                config.variant, base_draws(pool, task_set, split, rng), code_mapper)
            for _ in range(n_episodes):
                draw = next(draws)
                if draw.task.kind == "composed" and split.is_held_out(draw.task, draw.input):
                    raise TrainerError("held-out item sampled for training")
                vectors, targets = bank.arrays(draw.task, draw.input)
                if draw.prompt_codes != draw.task.codes:
                    vectors = patch_prompt_codes(vectors, draw.prompt_codes)
                result = net.bptt_arrays(params, vectors, targets, out=grads)
                if not math.isfinite(result.loss):
                    raise net.NonFiniteGradientError("non-finite training loss")
                net.update(params, grads, opt)
                rolling.update(result.all_correct)
                episode_counter += 1
                logger.record(phase, episode_counter, rolling.rate, result.loss)
            if phase == 1:
                phase1_rolling = rolling.rate
    except net.NonFiniteGradientError as exc:
        status, error = "failed", str(exc)
    finally:
        logger.close()

    atomic_acc = seen_acc = gen_perf = None
    if status == "ok":
        atomic_acc, seen_acc, gen_perf = _score_exp2(
            params, config, task_set, split, excluded)
    record = RunRecord(
        run_id=run_id,
        variant=config.variant,
        init_seed=config.init_seed,
        train_seed=config.train_seed,
        episodes_phase1=config.episodes_phase1,
        episodes_phase2=config.episodes_phase2,
        optimizer=config.optimizer_settings(),
        task_set_hash=task_set_hash(task_set, split),
        atomic_accuracy=atomic_acc,
        seen_composed_accuracy=seen_acc,
        generalization_performance=gen_perf,
        phase1_rolling_success=phase1_rolling,
        wall_time=time.perf_counter() - t_start,
        status=status,
        error=error,
    )
    return params, record


def eval_code_mapper(
    variant: str,
    train_seed: int,
    composed_tasks: tuple[TaskRef, ...],
):
    """Test-time prompt-code treatment matching the training variant.

    shuffled_prompts reuses the training bijection; random_task_codes
    resamples codes per test item (the baseline then measures task-set
    statistics, not code knowledge).  Other variants use true codes.
    """
    if variant == "shuffled_prompts":
        mapping = shuffled_code_bijection(train_seed, composed_tasks)
        return lambda task: mapping.get(task, task.codes)
    if variant == "random_task_codes":
        rng = np.random.default_rng(derive_seed(train_seed, "eval-codes"))
        n = len(composed_tasks)
        return lambda task: (composed_tasks[int(rng.integers(n))].codes
                             if task.kind == "composed" else task.codes)
    return None


def _score_exp2(
    params: net.NetParams,
    config: TrainConfig,
    task_set: TaskSet,
    split: Split,
    excluded: tuple[TaskRef, ...],
) -> tuple[float, float, float]:
    fo = config.final_output_only
    mapper = eval_code_mapper(config.variant, config.train_seed, task_set.composed)
    atomic = evaluate_items(params, atomic_items(task_set, fo))
    if config.variant == "held_out_compositions":
        seen = evaluate_items(
            params,
            [i for i in seen_composed_items(task_set, split, None, fo)
             if i.task not in excluded])
        gen = evaluate_items(params, task_holdout_items(task_set, excluded, fo))
    else:
        seen = evaluate_items(params, seen_composed_items(task_set, split, mapper, fo))
        gen = evaluate_items(params, zero_shot_items(task_set, split, mapper, fo))
    return (atomic.generalization_performance,
            seen.generalization_performance,
            gen.generalization_performance)


def _random_form_episode(
    rng: np.random.Generator,
) -> tuple[TaskRef, str, str]:
    """Random prompt plus a random well-formed output of the right length.

    The automaton transitions do not depend on table contents, so any bit
    string of the correct length is a valid supervision episode for them.
    """
    n_codes = 2 if rng.integers(2) else 1  # 50/50 atomic vs composed
    codes = tuple(CODE_CHARS[int(i)] for i in rng.integers(0, 8, n_codes))
    bits = "".join("01"[int(b)] for b in rng.integers(0, 2, 3))
    out = "".join("01"[int(b)] for b in rng.integers(0, 2, 3 * n_codes)) + "."
    return TaskRef(codes), bits, out


def exp1_probe_mse(
    params: net.NetParams, seed: int, n_episodes: int = 200
) -> float:
    """Mean per-unit squared error of hidden states against fresh random traces."""
    rng = np.random.default_rng(derive_seed(seed, "exp1-probe"))
    total, count = 0.0, 0
    for _ in range(n_episodes):
        task, bits, out = _random_form_episode(rng)
        episode = episode_from_pair(render_prompt(task, bits), out)
        trace = trace_with_outputs(task, bits, out)
        hidden = net.forward(params, episode).hidden
        total += float(((hidden - trace.vectors) ** 2).sum())
        count += trace.vectors.size
    return total / count


def train_exp1(
    config: TrainConfig,
    task_set: TaskSet | None = None,
    split: Split | None = None,
) -> tuple[net.NetParams, dict]:
    """Two-phase supervised regimen on the 29-unit masked architecture.

    Phase 1 trains only the LSTM tensors with MSE against automaton state
    traces over random well-formed input/output pairs; phase 2 freezes them
    and trains the readout with cross-entropy on atomic episodes of the task
    set.  Composed tasks are never trained on.
    """
    if config.variant != "exp1":
        raise TrainerError("train_exp1 requires variant='exp1'")
    if config.final_output_only:
        raise TrainerError("the automaton trace always includes intermediate outputs")
    task_set, split = _load_tables(config, task_set, split)
    t_start = time.perf_counter()

    if config.resolved_lstm_units() != STATE_DIM:
        raise TrainerError(f"supervised run needs {STATE_DIM} LSTM units")
    net_config = net.NetConfig(
        lstm_units=STATE_DIM,
        sigmoid_units=config.sigmoid_units,
        sigmoid_mask=acd_sigmoid_mask(config.sigmoid_units))
    params = net.init_params(config.init_seed, net_config)
    grads = net.Gradients.zeros(net_config)
    rng = np.random.default_rng(config.train_seed)
    logger = TrainLogger(config.log_path, config.log_every)

    metrics: dict = {"variant": "exp1", "status": "ok", "error": None}
    try:
        # Phase 1: learn the automaton transitions.
        n_tail = int(config.episodes_phase1 * config.exp1_lr_decay_tail)
        n_head = config.episodes_phase1 - n_tail
        opt = config.make_optimizer(net_config)
        for i in range(config.episodes_phase1):
            if i == n_head:
                opt = config.make_optimizer(
                    net_config, lr=config.lr * config.exp1_lr_decay_factor)
            task, bits, out = _random_form_episode(rng)
            episode = episode_from_pair(render_prompt(task, bits), out)
            trace = trace_with_outputs(task, bits, out)
            result = net.bptt(params, episode, loss="mse_hidden",
                              trace=trace.vectors, trainable=net.LSTM_TENSORS, out=grads)
            if not math.isfinite(result.loss):
                raise net.NonFiniteGradientError("non-finite phase-1 loss")
            net.update(params, grads, opt, frozen=net.HEAD_TENSORS)
            logger.record(1, i + 1, 0.0, result.loss)
        metrics["phase1_probe_mse"] = exp1_probe_mse(params, config.train_seed)

        # Phase 2: freeze the recurrent layer, train the readout on atomics only.
        opt = config.make_optimizer(net_config, lr=config.exp1_phase2_lr)
        bank = EpisodeBank(task_set)
        rolling = RollingSuccess()
        inputs = task_set.inputs()
        for i in range(config.episodes_phase2):
            task = task_set.atomic[rng.integers(len(task_set.atomic))]
            bits = inputs[rng.integers(len(inputs))]
            episode = bank.episode(task, bits)
            result = net.bptt(params, episode, loss="cross_entropy",
                              trainable=net.HEAD_TENSORS, out=grads)
            if not math.isfinite(result.loss):
                raise net.NonFiniteGradientError("non-finite phase-2 loss")
            net.update(params, grads, opt, frozen=net.LSTM_TENSORS)
            rolling.update(result.all_correct)
            logger.record(2, config.episodes_phase1 + i + 1, rolling.rate, result.loss)
        metrics["phase2_final_rolling"] = rolling.rate
    except net.NonFiniteGradientError as exc:
        metrics["status"], metrics["error"] = "failed", str(exc)
    finally:
        logger.close()

    if metrics["status"] == "ok":
        report = evaluate_exhaustive(params, task_set)
        n_atomic = len(task_set.atomic) * len(task_set.inputs())
        atomic_part = [s.correct for s in report.items[:n_atomic]]
        composed_part = [s.correct for s in report.items[n_atomic:]]
        metrics["exhaustive_accuracy"] = report.generalization_performance
        metrics["atomic_accuracy"] = 100.0 * sum(atomic_part) / len(atomic_part)
        metrics["composed_accuracy"] = 100.0 * sum(composed_part) / len(composed_part)
    metrics["wall_time"] = time.perf_counter() - t_start
    return params, metrics


def exp1_run_record(config: TrainConfig, metrics: dict,
                    task_set: TaskSet, split: Split, run_id: int = 0) -> RunRecord:
    """RunRecord view of a supervised run: every composed item is zero-shot."""
    return RunRecord(
        run_id=run_id,
        variant="exp1",
        init_seed=config.init_seed,
        train_seed=config.train_seed,
        episodes_phase1=config.episodes_phase1,
        episodes_phase2=config.episodes_phase2,
        optimizer=config.optimizer_settings(),
        task_set_hash=task_set_hash(task_set, split),
        atomic_accuracy=metrics.get("atomic_accuracy"),
        seen_composed_accuracy=None,
        generalization_performance=metrics.get("composed_accuracy"),
        phase1_rolling_success=None,
        wall_time=metrics["wall_time"],
        status=metrics["status"],
        error=metrics["error"],
    )
