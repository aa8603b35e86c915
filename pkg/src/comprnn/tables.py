"""Bijective bit-string lookup tables, their compositions, and the holdout split.

A task set is 8 random permutations of the 2^L bit strings (L=3 by default),
named a..h, plus all 64 ordered pairs of them as composed tasks.  For each
composed task two input strings are withheld for zero-shot evaluation.
"""
from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TASKSET_FORMAT_VERSION = 1

DEFAULT_NUM_TABLES = 8
DEFAULT_LENGTH = 3
DEFAULT_HOLDOUT_PER_TASK = 2


class TableError(ValueError):
    """Malformed bit string, table, task reference, or task-set file."""


def all_bitstrings(length: int) -> list[str]:
    """All bit strings of the given length, in lexicographic order."""
    return [format(i, f"0{length}b") for i in range(2**length)]


def check_bitstring(bits: str, length: int) -> str:
    if len(bits) != length or any(ch not in "01" for ch in bits):
        raise TableError(f"expected a {length}-bit string, got {bits!r}")
    return bits


@dataclass(frozen=True)
class LookupTable:
    """A bijective mapping over all bit strings of one fixed length.

    `outputs` lists the image of each input in lexicographic input order,
    mirroring the on-disk format.
    """

    code: str
    outputs: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.code) != 1 or self.code not in string.ascii_lowercase:
            raise TableError(f"table code must be a single lowercase letter, got {self.code!r}")
        n = len(self.outputs)
        if n == 0 or n & (n - 1):
            raise TableError(f"table must cover a power-of-two domain, got {n} outputs")
        length = self.length
        for out in self.outputs:
            check_bitstring(out, length)
        if len(set(self.outputs)) != n:
            raise TableError(f"table {self.code!r} is not a bijection")

    @property
    def length(self) -> int:
        return (len(self.outputs) - 1).bit_length()

    def apply(self, bits: str) -> str:
        check_bitstring(bits, self.length)
        return self.outputs[int(bits, 2)]


@dataclass(frozen=True)
class TaskRef:
    """Reference to an atomic or composed task; codes in application order."""

    codes: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.codes:
            raise TableError("task reference needs at least one code")
        for code in self.codes:
            if len(code) != 1 or code not in string.ascii_lowercase:
                raise TableError(f"bad table code {code!r}")

    @property
    def kind(self) -> str:
        return "atomic" if len(self.codes) == 1 else "composed"

    @property
    def code_string(self) -> str:
        return "".join(self.codes)

    @classmethod
    def from_string(cls, codes: str) -> "TaskRef":
        return cls(tuple(codes))


@dataclass(frozen=True)
class TaskSet:
    """8 atomic lookup tables plus all ordered pairs as composed tasks."""

    seed: int
    length: int
    tables: dict[str, LookupTable]
    atomic: tuple[TaskRef, ...] = field(init=False)
    composed: tuple[TaskRef, ...] = field(init=False)

    def __post_init__(self) -> None:
        codes = sorted(self.tables)
        for code, table in self.tables.items():
            if table.code != code:
                raise TableError(f"table keyed {code!r} carries code {table.code!r}")
            if table.length != self.length:
                raise TableError(f"table {code!r} has length {table.length}, expected {self.length}")
        outputs_seen = {t.outputs for t in self.tables.values()}
        if len(outputs_seen) != len(codes):
            raise TableError("tables must be pairwise distinct permutations")
        object.__setattr__(self, "atomic", tuple(TaskRef((c,)) for c in codes))
        object.__setattr__(
            self, "composed", tuple(TaskRef((c1, c2)) for c1 in codes for c2 in codes)
        )

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(sorted(self.tables))

    @property
    def all_tasks(self) -> tuple[TaskRef, ...]:
        return self.atomic + self.composed

    def inputs(self) -> list[str]:
        return all_bitstrings(self.length)


@dataclass(frozen=True)
class Split:
    """Per-composed-task held-out evaluation inputs."""

    held_out: dict[TaskRef, tuple[str, ...]]
    seed: int

    def is_held_out(self, task: TaskRef, bits: str) -> bool:
        return bits in self.held_out.get(task, ())

    @property
    def total_items(self) -> int:
        return sum(len(v) for v in self.held_out.values())


def generate_task_set(
    seed: int,
    num_tables: int = DEFAULT_NUM_TABLES,
    length: int = DEFAULT_LENGTH,
) -> TaskSet:
    """Sample `num_tables` distinct random permutations, deterministically in `seed`."""
    domain = 2**length
    n_perms = math.factorial(domain)
    if num_tables > n_perms:
        raise TableError(f"cannot draw {num_tables} distinct tables from {n_perms} permutations")
    if num_tables > len(string.ascii_lowercase):
        raise TableError(f"at most {len(string.ascii_lowercase)} single-letter codes available")
    rng = np.random.default_rng(seed)
    strings = all_bitstrings(length)
    tables: dict[str, LookupTable] = {}
    seen: set[tuple[int, ...]] = set()
    for code in string.ascii_lowercase[:num_tables]:
        while True:
            perm = tuple(int(i) for i in rng.permutation(domain))
            if perm not in seen:
                seen.add(perm)
                break
        tables[code] = LookupTable(code, tuple(strings[i] for i in perm))
    return TaskSet(seed=seed, length=length, tables=tables)


def apply_table(table: LookupTable, bits: str) -> str:
    return table.apply(bits)


def apply_composition(task: TaskRef, task_set: TaskSet, bits: str) -> list[str]:
    """Intermediate output of every stage, in application order.

    The final answer is the last element; the supervision string is the
    concatenation of all stages.
    """
    check_bitstring(bits, task_set.length)
    stages = []
    current = bits
    for code in task.codes:
        if code not in task_set.tables:
            raise TableError(f"unknown table code {code!r}")
        current = task_set.tables[code].apply(current)
        stages.append(current)
    return stages


def holdout_split(
    task_set: TaskSet,
    per_task: int = DEFAULT_HOLDOUT_PER_TASK,
    seed: int = 0,
) -> Split:
    """Withhold `per_task` inputs per composed task, independently and uniformly."""
    domain = 2**task_set.length
    if per_task >= domain:
        raise TableError(f"cannot hold out {per_task} of {domain} inputs")
    rng = np.random.default_rng(seed)
    strings = task_set.inputs()
    held: dict[TaskRef, tuple[str, ...]] = {}
    for task in task_set.composed:
        picks = rng.choice(domain, size=per_task, replace=False)
        held[task] = tuple(sorted(strings[int(i)] for i in picks))
    return Split(held_out=held, seed=seed)


def train_inputs(task_set: TaskSet, split: Split, task: TaskRef) -> list[str]:
    """Inputs admissible as training episodes for the task."""
    held = split.held_out.get(task, ())
    return [b for b in task_set.inputs() if b not in held]


def dumps_task_set(task_set: TaskSet, split: Split) -> str:
    doc = {
        "format_version": TASKSET_FORMAT_VERSION,
        "seed": task_set.seed,
        "length": task_set.length,
        "tables": {code: list(t.outputs) for code, t in task_set.tables.items()},
        "holdout": {task.code_string: list(bits) for task, bits in split.held_out.items()},
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def save_task_set(task_set: TaskSet, split: Split, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dumps_task_set(task_set, split), encoding="utf-8")
    return path


def load_task_set(path: str | Path) -> tuple[TaskSet, Split]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise TableError(f"cannot read task-set file {path}: {exc}") from exc
    if doc.get("format_version") != TASKSET_FORMAT_VERSION:
        raise TableError(
            f"task-set format_version {doc.get('format_version')!r} != {TASKSET_FORMAT_VERSION}"
        )
    tables = {
        code: LookupTable(code, tuple(outs)) for code, outs in doc["tables"].items()
    }
    task_set = TaskSet(seed=doc["seed"], length=doc["length"], tables=tables)
    held = {
        TaskRef.from_string(codes): tuple(bits) for codes, bits in doc["holdout"].items()
    }
    for task, bits in held.items():
        for b in bits:
            check_bitstring(b, task_set.length)
    split = Split(held_out=held, seed=doc["seed"])
    return task_set, split
