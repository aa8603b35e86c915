"""Finite-state automaton that solves depth-2 lookup-table composition.

The 29-unit state is split into five segments:

  A (units 0-7)   current atomic task, one-hot
  B (units 8-15)  next atomic task (the rest of the call stack), one-hot
  C (units 16-21) input string of the current task, three 2-unit one-hots
  D (units 22-24) index into the current output string (all zeros = none)
  E (units 25-28) bits already emitted for the current task, two 2-unit one-hots

The automaton is both the ground-truth oracle for episode outputs and the
source of per-timestep hidden-state supervision targets.  It is fixed to
3-bit strings, at most 8 tables, and composition depth <= 2.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .prompts import render_prompt
from .tables import TaskRef, TaskSet, check_bitstring

SEG_A = slice(0, 8)
SEG_B = slice(8, 16)
SEG_C = slice(16, 22)
SEG_D = slice(22, 25)
SEG_E = slice(25, 29)
STATE_DIM = 29

WORD_LEN = 3  # bit-string length the segment layout encodes
MAX_TABLES = 8

# Hidden-layer units the sigmoid layer may read in the supervised experiment:
# segments A (task), C (input), and D (output index).
READOUT_UNITS = tuple(range(SEG_A.start, SEG_A.stop)) + tuple(
    range(SEG_C.start, SEG_C.stop)
) + tuple(range(SEG_D.start, SEG_D.stop))


class AutomatonError(ValueError):
    """Input outside the episode grammar or an unrepresentable configuration."""


def code_rank(code: str) -> int:
    """Alphabetical rank of a table code: a -> 0 ... h -> 7."""
    rank = ord(code) - ord("a")
    if not 0 <= rank < MAX_TABLES:
        raise AutomatonError(f"code {code!r} has no automaton unit")
    return rank


class AutomatonState(NamedTuple):
    """Compact view of the 29-unit segmented state.

    `task`/`pending` are code ranks (segments A/B), `input_bits` the up-to-3
    bits of segment C, `out_pos` the 1-based output index of segment D (None
    = all zeros), `emitted` the up-to-2 buffered bits of segment E.
    """

    task: int | None = None
    pending: int | None = None
    input_bits: tuple[int, ...] = ()
    out_pos: int | None = None
    emitted: tuple[int, ...] = ()

    def to_vector(self) -> np.ndarray:
        vec = np.zeros(STATE_DIM)
        if self.task is not None:
            vec[SEG_A.start + self.task] = 1.0
        if self.pending is not None:
            vec[SEG_B.start + self.pending] = 1.0
        for slot, bit in enumerate(self.input_bits):
            vec[SEG_C.start + 2 * slot + bit] = 1.0
        if self.out_pos is not None:
            vec[SEG_D.start + self.out_pos - 1] = 1.0
        for slot, bit in enumerate(self.emitted):
            vec[SEG_E.start + 2 * slot + bit] = 1.0
        return vec


INITIAL_STATE = AutomatonState()


def step(state: AutomatonState, input_char: str, prev_output: str | None) -> AutomatonState:
    """One transition, driven by the input character and the fed-back output."""
    if input_char == " ":
        return _output_step(state, prev_output)
    if prev_output is not None:
        raise AutomatonError("reading steps carry no previous output")
    if input_char in "PNC:":
        return state
    if input_char in "abcdefgh":
        rank = code_rank(input_char)
        if state.task is None:
            return AutomatonState(task=rank, pending=state.pending,
                                  input_bits=state.input_bits,
                                  out_pos=state.out_pos, emitted=state.emitted)
        if state.pending is None:
            return AutomatonState(task=state.task, pending=rank,
                                  input_bits=state.input_bits,
                                  out_pos=state.out_pos, emitted=state.emitted)
        raise AutomatonError("call stack full: more than two task codes")
    if input_char in "01":
        if state.out_pos is not None:
            raise AutomatonError("input bit after the prompt dot")
        if len(state.input_bits) >= WORD_LEN:
            raise AutomatonError(f"more than {WORD_LEN} input bits before the dot")
        return AutomatonState(task=state.task, pending=state.pending,
                              input_bits=state.input_bits + (int(input_char),),
                              out_pos=state.out_pos, emitted=state.emitted)
    if input_char == ".":
        if state.task is None or len(state.input_bits) != WORD_LEN:
            raise AutomatonError("prompt dot before task code and full input string")
        return AutomatonState(task=state.task, pending=state.pending,
                              input_bits=state.input_bits, out_pos=1, emitted=())
    raise AutomatonError(f"character {input_char!r} outside the episode grammar")


def _output_step(state: AutomatonState, prev_output: str | None) -> AutomatonState:
    if prev_output is None:
        # First output step: the dot was just read, nothing to store yet.
        return state
    if prev_output == ".":
        return INITIAL_STATE
    if prev_output not in "01":
        raise AutomatonError(f"fed-back output {prev_output!r} outside vocabulary")
    bit = int(prev_output)
    if state.out_pos in (1, 2):
        return AutomatonState(task=state.task, pending=state.pending,
                              input_bits=state.input_bits,
                              out_pos=state.out_pos + 1,
                              emitted=state.emitted + (bit,))
    if state.out_pos == WORD_LEN:
        if state.pending is not None:
            # Pop the stack: B moves to A, the three emitted bits become C.
            return AutomatonState(task=state.pending, pending=None,
                                  input_bits=state.emitted + (bit,),
                                  out_pos=1, emitted=())
        return AutomatonState(task=state.task, pending=None,
                              input_bits=state.input_bits,
                              out_pos=None, emitted=state.emitted)
    raise AutomatonError("output step without an active output index")


def emit(state: AutomatonState, task_set: TaskSet) -> str:
    """Output character determined by segments A (task), C (input), D (index)."""
    if state.out_pos is None:
        if len(state.input_bits) != WORD_LEN:
            raise AutomatonError("emit called during the reading phase")
        return "."
    if state.task is None or len(state.input_bits) != WORD_LEN:
        raise AutomatonError("output index active but task or input incomplete")
    code = chr(ord("a") + state.task)
    b0, b1, b2 = state.input_bits
    # index into the lexicographically ordered outputs, skipping string I/O
    return task_set.tables[code].outputs[4 * b0 + 2 * b1 + b2][state.out_pos - 1]


@dataclass(frozen=True)
class StateTrace:
    """Per-step 29-dim supervision targets plus the emitted output string."""

    vectors: np.ndarray  # (steps, 29)
    emitted: str
    input_chars: tuple[str, ...]
    prev_outputs: tuple[str | None, ...]
    emitted_chars: tuple[str | None, ...]

    @property
    def n_steps(self) -> int:
        return self.vectors.shape[0]


def _check_supported(task: TaskRef) -> None:
    if len(task.codes) > 2:
        raise AutomatonError("automaton stack holds at most two tasks")


def trace_with_outputs(task: TaskRef, bits: str, output: str) -> StateTrace:
    """Trace for a prompt paired with an arbitrary well-formed output string.

    The transitions only depend on the characters read and fed back, never on
    actual table contents, so any "bits-then-dot" output of the right length
    yields a valid trace.  This is what the transition-learning phase trains
    on.
    """
    _check_supported(task)
    check_bitstring(bits, WORD_LEN)
    expected_len = WORD_LEN * len(task.codes) + 1
    if len(output) != expected_len or not output.endswith(".") or any(
        ch not in "01" for ch in output[:-1]
    ):
        raise AutomatonError(f"output {output!r} is not {expected_len - 1} bits plus a dot")
    prompt = render_prompt(task, bits)
    vectors = []
    inputs: list[str] = []
    prevs: list[str | None] = []
    emits: list[str | None] = []
    state = INITIAL_STATE
    for ch in prompt:
        state = step(state, ch, None)
        vectors.append(state.to_vector())
        inputs.append(ch)
        prevs.append(None)
        emits.append(None)
    for k, ch in enumerate(output):
        prev = output[k - 1] if k > 0 else None
        state = step(state, " ", prev)
        vectors.append(state.to_vector())
        inputs.append(" ")
        prevs.append(prev)
        emits.append(ch)
    return StateTrace(
        vectors=np.array(vectors),
        emitted=output,
        input_chars=tuple(inputs),
        prev_outputs=tuple(prevs),
        emitted_chars=tuple(emits),
    )


def trace_episode(task: TaskRef, task_set: TaskSet, bits: str) -> StateTrace:
    """Oracle trace: run step/emit over a full episode against real tables."""
    _check_supported(task)
    if task_set.length != WORD_LEN or len(task_set.tables) > MAX_TABLES:
        raise AutomatonError("automaton layout covers 3-bit strings and at most 8 tables")
    check_bitstring(bits, task_set.length)
    prompt = render_prompt(task, bits)
    vectors = []
    inputs: list[str] = []
    prevs: list[str | None] = []
    emits: list[str | None] = []
    state = INITIAL_STATE
    for ch in prompt:
        state = step(state, ch, None)
        vectors.append(state.to_vector())
        inputs.append(ch)
        prevs.append(None)
        emits.append(None)
    emitted = []
    prev: str | None = None
    cap = 2 * (WORD_LEN * len(task.codes) + 1) + 4
    for _ in range(cap):
        state = step(state, " ", prev)
        ch = emit(state, task_set)
        vectors.append(state.to_vector())
        inputs.append(" ")
        prevs.append(prev)
        emits.append(ch)
        emitted.append(ch)
        prev = ch
        if ch == ".":
            break
    else:
        raise AutomatonError("automaton failed to terminate with a dot")
    return StateTrace(
        vectors=np.array(vectors),
        emitted="".join(emitted),
        input_chars=tuple(inputs),
        prev_outputs=tuple(prevs),
        emitted_chars=tuple(emits),
    )


def oracle_output(task: TaskRef, task_set: TaskSet, bits: str) -> str:
    """Emitted output string only, skipping trace-vector construction.

    Same step/emit transitions as trace_episode; used for fast exhaustive
    equivalence scans and oracle-backed evaluation.
    """
    _check_supported(task)
    check_bitstring(bits, task_set.length)
    state = INITIAL_STATE
    for ch in render_prompt(task, bits):
        state = step(state, ch, None)
    emitted = []
    prev: str | None = None
    cap = 2 * (WORD_LEN * len(task.codes) + 1) + 4
    for _ in range(cap):
        state = step(state, " ", prev)
        ch = emit(state, task_set)
        emitted.append(ch)
        prev = ch
        if ch == ".":
            return "".join(emitted)
    raise AutomatonError("automaton failed to terminate with a dot")


def format_trace(trace: StateTrace) -> str:
    """Text export: one "input prev target emitted" line per step."""
    lines = []
    for t in range(trace.n_steps):
        bits = "".join(str(int(v)) for v in trace.vectors[t])
        prev = trace.prev_outputs[t] or "-"
        emitted = trace.emitted_chars[t] or "-"
        lines.append(f"{trace.input_chars[t]}\t{prev}\t{bits}\t{emitted}")
    return "\n".join(lines) + "\n"


def dump_traces(traces: Iterable[StateTrace], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(format_trace(trace))
            fh.write("\n")
    return path
