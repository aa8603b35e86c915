"""Scoring: zero-shot generalization, exhaustive accuracy, and random baselines.

An item is correct iff the emitted string equals the target exactly,
including the terminating dot.  Generalization performance is the percentage
of correct items over the 128 held-out (composed task, input) pairs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import net
from .automaton import oracle_output
from .prompts import OUTPUT_INDEX, encode_step, expected_output, parse_prompt, render_prompt
from .tables import Split, TaskRef, TaskSet, train_inputs

CodeMapper = Callable[[TaskRef], tuple[str, ...]]


class SequenceModel(Protocol):
    def generate(self, prompt: str, max_outputs: int) -> str: ...


class NetworkModel:
    """Free-running wrapper around trained parameters."""

    def __init__(self, params: net.NetParams):
        self.params = params

    def generate(self, prompt: str, max_outputs: int) -> str:
        reading = np.stack([encode_step(ch, None) for ch in prompt])
        return net.generate(self.params, reading, max_outputs)


class OracleModel:
    """The automaton evaluated in place of a network; exact by construction."""

    def __init__(self, task_set: TaskSet):
        self.task_set = task_set

    def generate(self, prompt: str, max_outputs: int) -> str:
        task, bits = parse_prompt(prompt, self.task_set.length)
        return oracle_output(task, self.task_set, bits)


def _as_model(model: SequenceModel | net.NetParams) -> SequenceModel:
    if isinstance(model, net.NetParams):
        return NetworkModel(model)
    return model


@dataclass(frozen=True)
class EvalItem:
    task: TaskRef
    input: str
    prompt: str
    target: str


@dataclass(frozen=True)
class ScoredItem:
    prompt: str
    target: str
    emitted: str
    correct: bool


@dataclass
class EvalReport:
    items: list[ScoredItem]
    by_task: dict[str, float]

    @property
    def n_correct(self) -> int:
        return sum(item.correct for item in self.items)

    @property
    def generalization_performance(self) -> float:
        return 100.0 * self.n_correct / len(self.items)

    def to_dict(self) -> dict:
        return {
            "generalization_performance": self.generalization_performance,
            "n_items": len(self.items),
            "n_correct": self.n_correct,
            "by_task": self.by_task,
            "items": [
                {"prompt": i.prompt, "target": i.target, "emitted": i.emitted,
                 "correct": i.correct}
                for i in self.items
            ],
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        return path


def make_item(
    task: TaskRef,
    task_set: TaskSet,
    bits: str,
    code_mapper: CodeMapper | None = None,
    final_output_only: bool = False,
) -> EvalItem:
    codes = task.codes if code_mapper is None else tuple(code_mapper(task))
    prompt = render_prompt(TaskRef(codes), bits)
    target = expected_output(task, task_set, bits, final_output_only)
    return EvalItem(task=task, input=bits, prompt=prompt, target=target)


def zero_shot_items(
    task_set: TaskSet,
    split: Split,
    code_mapper: CodeMapper | None = None,
    final_output_only: bool = False,
) -> list[EvalItem]:
    """The held-out (composed task, input) pairs; 128 for the standard split."""
    return [
        make_item(task, task_set, bits, code_mapper, final_output_only)
        for task in task_set.composed
        for bits in split.held_out[task]
    ]


def exhaustive_items(
    task_set: TaskSet,
    code_mapper: CodeMapper | None = None,
    final_output_only: bool = False,
) -> list[EvalItem]:
    """All inputs to all atomic and composed tasks; (8 + 64) x 8 = 576."""
    return [
        make_item(task, task_set, bits, code_mapper, final_output_only)
        for task in task_set.all_tasks
        for bits in task_set.inputs()
    ]


def atomic_items(task_set: TaskSet, final_output_only: bool = False) -> list[EvalItem]:
    return [
        make_item(task, task_set, bits, None, final_output_only)
        for task in task_set.atomic
        for bits in task_set.inputs()
    ]


def seen_composed_items(
    task_set: TaskSet,
    split: Split,
    code_mapper: CodeMapper | None = None,
    final_output_only: bool = False,
) -> list[EvalItem]:
    """Composed tasks over their non-held-out inputs (the training combinations)."""
    return [
        make_item(task, task_set, bits, code_mapper, final_output_only)
        for task in task_set.composed
        for bits in train_inputs(task_set, split, task)
    ]


def task_holdout_items(
    task_set: TaskSet,
    excluded: tuple[TaskRef, ...],
    final_output_only: bool = False,
) -> list[EvalItem]:
    """All inputs of composed tasks excluded from training (task-level holdout)."""
    return [
        make_item(task, task_set, bits, None, final_output_only)
        for task in excluded
        for bits in task_set.inputs()
    ]


def evaluate_items(model: SequenceModel | net.NetParams, items: list[EvalItem]) -> EvalReport:
    model = _as_model(model)
    scored = []
    per_task: dict[str, list[bool]] = {}
    for item in items:
        emitted = model.generate(item.prompt, net.free_running_cap(len(item.target)))
        correct = emitted == item.target
        scored.append(ScoredItem(item.prompt, item.target, emitted, correct))
        per_task.setdefault(item.task.code_string, []).append(correct)
    by_task = {code: 100.0 * sum(v) / len(v) for code, v in sorted(per_task.items())}
    return EvalReport(items=scored, by_task=by_task)


def evaluate_zero_shot(
    model: SequenceModel | net.NetParams,
    task_set: TaskSet,
    split: Split,
    code_mapper: CodeMapper | None = None,
    final_output_only: bool = False,
) -> EvalReport:
    return evaluate_items(model, zero_shot_items(task_set, split, code_mapper, final_output_only))


def evaluate_exhaustive(
    model: SequenceModel | net.NetParams,
    task_set: TaskSet,
    final_output_only: bool = False,
) -> EvalReport:
    return evaluate_items(model, exhaustive_items(task_set, None, final_output_only))


@dataclass
class BaselineResult:
    mean_performance: float  # percent correct, averaged over trials
    trials: int
    items_per_trial: int
    total_correct: int


def _target_matrix(items: list[EvalItem]) -> np.ndarray:
    lengths = {len(item.target) for item in items}
    if len(lengths) != 1:
        raise ValueError("baseline scoring expects uniform target lengths")
    return np.array([[OUTPUT_INDEX[ch] for ch in item.target] for item in items])


def baseline_random_output(
    task_set: TaskSet, split: Split, trials: int = 10_000, seed: int = 0
) -> BaselineResult:
    """Emit uniformly random characters from {0, 1, .} for every test item.

    Correct exactly when the first |target| sampled characters reproduce the
    target (an early dot or a missing dot both mismatch), so the per-item
    success probability is (1/3)^7 for the standard split.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    targets = _target_matrix(zero_shot_items(task_set, split))
    n_items, tlen = targets.shape
    rng = np.random.default_rng(seed)
    total = 0
    for start in range(0, trials, 256):  # bound memory for large trial counts
        chunk = min(256, trials - start)
        draws = rng.integers(0, 3, size=(chunk, n_items, tlen))
        total += int((draws == targets[None]).all(axis=2).sum())
    return BaselineResult(
        mean_performance=100.0 * total / (trials * n_items),
        trials=trials, items_per_trial=n_items, total_correct=total)


def baseline_random_wellformed(
    task_set: TaskSet, split: Split, trials: int = 10_000, seed: int = 0
) -> BaselineResult:
    """Sample six random bits and append the dot for every test item.

    Per-item success probability is 2^-6 against the standard 7-character
    composed targets.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n_bits = 2 * task_set.length
    targets = _target_matrix(zero_shot_items(task_set, split))
    n_items, tlen = targets.shape
    rng = np.random.default_rng(seed)
    total = 0
    for start in range(0, trials, 256):
        chunk = min(256, trials - start)
        draws = rng.integers(0, 2, size=(chunk, n_items, n_bits))
        if tlen == n_bits + 1:
            hits = (draws == targets[None, :, :n_bits]).all(axis=2)
            total += int(hits.sum())
        # A target of any other length can never match "six bits plus dot".
    return BaselineResult(
        mean_performance=100.0 * total / (trials * n_items),
        trials=trials, items_per_trial=n_items, total_correct=total)
