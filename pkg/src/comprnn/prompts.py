"""Prompt rendering/parsing and the per-timestep input-vector encoding.

An episode is processed character by character.  Prompts look like
"NCg:001." (atomic) or "PCgc:001." (composed, codes in application order);
the target is the concatenated stage outputs followed by a dot, e.g.
"110111.".  Each timestep feeds the network a 20-dim vector: a 16-way
one-hot of the input character (a space once the prompt has been read)
concatenated with a 4-slot block holding the previous step's output
character (all zeros before any output exists).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .tables import TaskRef, TaskSet, apply_composition, check_bitstring

INPUT_CHARS = ("P", "N", "C", "a", "b", "c", "d", "e", "f", "g", "h", "0", "1", ":", ".", " ")
OUTPUT_CHARS = ("0", "1", ".")
# Previous-output block: one slot per output character plus a null slot.
# The null slot is represented as all zeros (it never carries a one).
PREV_SLOTS = len(OUTPUT_CHARS) + 1

INPUT_INDEX = {ch: i for i, ch in enumerate(INPUT_CHARS)}
OUTPUT_INDEX = {ch: i for i, ch in enumerate(OUTPUT_CHARS)}

INPUT_DIM = len(INPUT_CHARS)
OUTPUT_DIM = len(OUTPUT_CHARS)
STEP_DIM = INPUT_DIM + PREV_SLOTS

SPACE_INDEX = INPUT_INDEX[" "]
CODE_CHARS = "abcdefgh"


@dataclass(frozen=True)
class Vocab:
    input_chars: tuple[str, ...] = INPUT_CHARS
    output_chars: tuple[str, ...] = OUTPUT_CHARS
    prev_out_slots: int = PREV_SLOTS

    @property
    def step_dim(self) -> int:
        return len(self.input_chars) + self.prev_out_slots


VOCAB = Vocab()


class PromptError(ValueError):
    """Malformed prompt or symbol outside the vocabulary."""


def render_prompt(task: TaskRef, bits: str) -> str:
    """"NC"+code for atomic tasks, "PC"+codes for composed ones."""
    for code in task.codes:
        if code not in CODE_CHARS:
            raise PromptError(f"code {code!r} is not in the prompt vocabulary")
    if any(ch not in "01" for ch in bits) or not bits:
        raise PromptError(f"bad input bits {bits!r}")
    if len(task.codes) == 1:
        return f"NC{task.codes[0]}:{bits}."
    if len(task.codes) == 2:
        return f"PC{task.code_string}:{bits}."
    raise PromptError(f"prompt grammar covers depth 1 or 2, got {len(task.codes)} codes")


def parse_prompt(s: str, length: int | None = None) -> tuple[TaskRef, str]:
    """Inverse of render_prompt; rejects anything outside the grammar."""
    if len(s) < 2 or s[:2] not in ("NC", "PC"):
        raise PromptError(f"malformed prompt prefix in {s!r}")
    n_codes = 1 if s[0] == "N" else 2
    codes = s[2 : 2 + n_codes]
    if len(codes) < n_codes:
        raise PromptError(f"truncated prompt {s!r}")
    for code in codes:
        if code not in CODE_CHARS:
            raise PromptError(f"unknown table code {code!r} in {s!r}")
    rest = s[2 + n_codes :]
    if not rest.startswith(":"):
        raise PromptError(f"missing ':' separator in {s!r}")
    body = rest[1:]
    if not body.endswith("."):
        raise PromptError(f"missing terminating dot in {s!r}")
    bits = body[:-1]
    if not bits or any(ch not in "01" for ch in bits):
        raise PromptError(f"bad input bits in {s!r}")
    if length is not None and len(bits) != length:
        raise PromptError(f"expected {length} input bits, got {len(bits)} in {s!r}")
    return TaskRef(tuple(codes)), bits


def expected_output(
    task: TaskRef, task_set: TaskSet, bits: str, final_output_only: bool = False
) -> str:
    """Concatenated stage outputs plus the terminating dot."""
    stages = apply_composition(task, task_set, bits)
    if final_output_only:
        return stages[-1] + "."
    return "".join(stages) + "."


def encode_step(input_char: str, prev_output: str | None) -> np.ndarray:
    """20-dim input vector for one timestep."""
    vec = np.zeros(STEP_DIM)
    try:
        vec[INPUT_INDEX[input_char]] = 1.0
    except KeyError:
        raise PromptError(f"input character {input_char!r} outside vocabulary") from None
    if prev_output is not None:
        try:
            vec[INPUT_DIM + OUTPUT_INDEX[prev_output]] = 1.0
        except KeyError:
            raise PromptError(f"output character {prev_output!r} outside vocabulary") from None
    return vec


@dataclass(frozen=True)
class Episode:
    """One prompt/target pair with its per-timestep encoding and loss mask."""

    prompt: str
    target: str
    task: TaskRef
    input: str
    step_vectors: np.ndarray  # (steps, 20)
    loss_mask: np.ndarray  # (steps,) bool

    @property
    def n_steps(self) -> int:
        return len(self.prompt) + len(self.target)

    @property
    def n_reading(self) -> int:
        return len(self.prompt)

    def target_indices(self) -> np.ndarray:
        """Per-step target symbol index; -1 on reading (unmasked) steps."""
        idx = np.full(self.n_steps, -1, dtype=np.int64)
        for k, ch in enumerate(self.target):
            idx[self.n_reading + k] = OUTPUT_INDEX[ch]
        return idx


def episode_from_pair(prompt: str, target: str) -> Episode:
    """Build an episode from raw prompt/target strings (gold feedback)."""
    task, bits = parse_prompt(prompt)
    if not target.endswith(".") or any(ch not in "01" for ch in target[:-1]):
        raise PromptError(f"bad target string {target!r}")
    n_read, n_out = len(prompt), len(target)
    vectors = np.zeros((n_read + n_out, STEP_DIM))
    for t, ch in enumerate(prompt):
        vectors[t, INPUT_INDEX[ch]] = 1.0
    for k in range(n_out):
        t = n_read + k
        vectors[t, SPACE_INDEX] = 1.0
        if k > 0:
            vectors[t, INPUT_DIM + OUTPUT_INDEX[target[k - 1]]] = 1.0
    mask = np.zeros(n_read + n_out, dtype=bool)
    mask[n_read:] = True
    return Episode(
        prompt=prompt,
        target=target,
        task=task,
        input=bits,
        step_vectors=vectors,
        loss_mask=mask,
    )


def build_episode(
    task: TaskRef, task_set: TaskSet, bits: str, final_output_only: bool = False
) -> Episode:
    check_bitstring(bits, task_set.length)
    prompt = render_prompt(task, bits)
    target = expected_output(task, task_set, bits, final_output_only)
    return episode_from_pair(prompt, target)


def dump_episodes(episodes: Iterable[Episode], path: str | Path) -> Path:
    """Debug/golden dump: one tab-separated "prompt\\ttarget" line per episode."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(f"{ep.prompt}\t{ep.target}\n")
    return path
