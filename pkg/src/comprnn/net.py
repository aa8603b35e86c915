"""From-scratch LSTM network: parameters, forward, BPTT, optimizers, checkpoints.

Architecture: 20-dim step input -> LSTM (60 units, or 29 for the supervised
automaton experiment) -> 10-unit sigmoid layer -> 3-way softmax.  An optional
binary connectivity mask restricts which LSTM units the sigmoid layer reads.
All arithmetic is float64; the heavy loops live in `kernels`.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import kernels
from .prompts import Episode, INPUT_DIM, OUTPUT_CHARS, STEP_DIM

assert kernels.SPACE_COL == 15 and kernels.PREV_OFFSET == INPUT_DIM

CHECKPOINT_MAGIC = b"COMPRNN\x01"
CHECKPOINT_FORMAT_VERSION = 1

TENSOR_ORDER = ("w_gates", "b_gates", "w_sig", "b_sig", "w_out", "b_out")
LSTM_TENSORS = ("w_gates", "b_gates")
HEAD_TENSORS = ("w_sig", "b_sig", "w_out", "b_out")

INIT_SCALE = 0.1  # weights ~ U(-0.1, 0.1), biases zero


class NetError(ValueError):
    """Dimension mismatch or invalid configuration."""


class NonFiniteGradientError(RuntimeError):
    """A gradient went non-finite; the run must be recorded as failed."""


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


@dataclass(frozen=True, eq=False)
class NetConfig:
    lstm_units: int
    input_dim: int = STEP_DIM
    sigmoid_units: int = 10
    output_dim: int = len(OUTPUT_CHARS)
    sigmoid_mask: np.ndarray | None = None  # (sigmoid_units, lstm_units) binary

    def __post_init__(self) -> None:
        if min(self.lstm_units, self.input_dim, self.sigmoid_units, self.output_dim) <= 0:
            raise NetError("all dimensions must be positive")
        if self.sigmoid_mask is not None:
            expected = (self.sigmoid_units, self.lstm_units)
            if self.sigmoid_mask.shape != expected:
                raise NetError(f"mask shape {self.sigmoid_mask.shape} != {expected}")

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        h, d, s, o = self.lstm_units, self.input_dim, self.sigmoid_units, self.output_dim
        return {
            "w_gates": (4 * h, d + h),
            "b_gates": (4 * h,),
            "w_sig": (s, h),
            "b_sig": (s,),
            "w_out": (o, s),
            "b_out": (o,),
        }

    def fingerprint(self) -> dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "lstm_units": self.lstm_units,
            "sigmoid_units": self.sigmoid_units,
            "output_dim": self.output_dim,
            "has_mask": self.sigmoid_mask is not None,
        }


@dataclass
class NetParams:
    """All learnable tensors.  Gate rows are stacked [input, forget, cell, output]."""

    config: NetConfig
    w_gates: np.ndarray
    b_gates: np.ndarray
    w_sig: np.ndarray
    b_sig: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_ORDER}

    def copy(self) -> "NetParams":
        return NetParams(self.config, *(getattr(self, n).copy() for n in TENSOR_ORDER))


@dataclass
class Gradients:
    w_gates: np.ndarray
    b_gates: np.ndarray
    w_sig: np.ndarray
    b_sig: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    @classmethod
    def zeros(cls, config: NetConfig) -> "Gradients":
        shapes = config.tensor_shapes()
        return cls(*(np.zeros(shapes[name]) for name in TENSOR_ORDER))

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_ORDER}


@dataclass
class OptState:
    kind: str  # "adam" | "sgd"
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] | None = None
    v: dict[str, np.ndarray] | None = None

    @classmethod
    def adam(cls, config: NetConfig, lr: float = 1e-3,
             beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "OptState":
        shapes = config.tensor_shapes()
        return cls(kind="adam", lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   m={n: np.zeros(shapes[n]) for n in TENSOR_ORDER},
                   v={n: np.zeros(shapes[n]) for n in TENSOR_ORDER})

    @classmethod
    def sgd(cls, lr: float) -> "OptState":
        return cls(kind="sgd", lr=lr)

    @classmethod
    def create(cls, kind: str, config: NetConfig, lr: float, **kwargs: float) -> "OptState":
        if kind == "adam":
            return cls.adam(config, lr=lr, **kwargs)
        if kind == "sgd":
            return cls.sgd(lr=lr)
        raise NetError(f"unknown optimizer kind {kind!r}")

    def settings(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "lr": self.lr}
        if self.kind == "adam":
            out.update(beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        return out


def init_params(seed: int, config: NetConfig) -> NetParams:
    """Weights ~ U(-0.1, 0.1), biases exactly zero, deterministic in `seed`.

    The generator is consumed in TENSOR_ORDER (weight tensors only).
    """
    rng = np.random.default_rng(seed)
    shapes = config.tensor_shapes()
    arrays = {}
    for name in TENSOR_ORDER:
        if name.startswith("w_"):
            arrays[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, shapes[name])
        else:
            arrays[name] = np.zeros(shapes[name])
    if config.sigmoid_mask is not None:
        arrays["w_sig"] *= config.sigmoid_mask
    return NetParams(config, **arrays)


@dataclass
class ForwardResult:
    hidden: np.ndarray  # (steps, lstm_units)
    probs: np.ndarray  # (steps, 3)
    emitted: str


def _check_episode(params: NetParams, episode: Episode) -> None:
    if episode.step_vectors.shape[1] != params.config.input_dim:
        raise NetError(
            f"episode step dim {episode.step_vectors.shape[1]} != "
            f"config input_dim {params.config.input_dim}"
        )


def free_running_cap(target_len: int) -> int:
    """Output-step budget during free running: twice the target plus slack."""
    return 2 * target_len + 4


def forward(params: NetParams, episode: Episode, feedback: str = "gold") -> ForwardResult:
    """Unroll the network over an episode.

    feedback="gold" feeds the target's previous character on output steps (the
    vectors baked into the episode); feedback="model" feeds the network's own
    previous argmax and stops at the first emitted '.' or the step cap.
    """
    _check_episode(params, episode)
    if feedback == "gold":
        hs = kernels.forward_hidden(params.w_gates, params.b_gates, episode.step_vectors)
        _, probs = kernels.head_forward(params.w_sig, params.b_sig,
                                        params.w_out, params.b_out, hs)
        out = np.argmax(probs[episode.loss_mask], axis=1)
        emitted = "".join(OUTPUT_CHARS[i] for i in out)
        return ForwardResult(hidden=hs, probs=probs, emitted=emitted)
    if feedback == "model":
        reading = np.ascontiguousarray(episode.step_vectors[: episode.n_reading])
        cap = free_running_cap(len(episode.target))
        hs, probs, emit_idx, n_emit = kernels.generate_free(
            params.w_gates, params.b_gates, params.w_sig, params.b_sig,
            params.w_out, params.b_out, reading, cap)
        steps = episode.n_reading + n_emit
        emitted = "".join(OUTPUT_CHARS[i] for i in emit_idx[:n_emit])
        return ForwardResult(hidden=hs[:steps], probs=probs[:steps], emitted=emitted)
    raise NetError(f"unknown feedback mode {feedback!r}")


def generate(params: NetParams, reading_vectors: np.ndarray, cap: int) -> str:
    """Free-running emission given pre-encoded prompt vectors."""
    hs, probs, emit_idx, n_emit = kernels.generate_free(
        params.w_gates, params.b_gates, params.w_sig, params.b_sig,
        params.w_out, params.b_out, np.ascontiguousarray(reading_vectors), cap)
    return "".join(OUTPUT_CHARS[i] for i in emit_idx[:n_emit])


@dataclass
class BpttResult:
    grads: Gradients
    loss: float
    all_correct: bool | None  # None for the hidden-state MSE loss


def bptt_arrays(
    params: NetParams,
    step_vectors: np.ndarray,
    target_indices: np.ndarray,
    trainable: tuple[str, ...] | None = None,
    out: Gradients | None = None,
) -> BpttResult:
    """Cross-entropy BPTT over pre-encoded step vectors (training hot path)."""
    grads = out if out is not None else Gradients.zeros(params.config)
    names = TENSOR_ORDER if trainable is None else trainable
    update_lstm = any(n in LSTM_TENSORS for n in names)
    update_head = any(n in HEAD_TENSORS for n in names)
    value, correct = kernels.bptt_ce(
        params.w_gates, params.b_gates, params.w_sig, params.b_sig,
        params.w_out, params.b_out, step_vectors, target_indices,
        grads.w_gates, grads.b_gates, grads.w_sig, grads.b_sig,
        grads.w_out, grads.b_out, update_lstm, update_head)
    if params.config.sigmoid_mask is not None:
        grads.w_sig *= params.config.sigmoid_mask
    return BpttResult(grads=grads, loss=float(value), all_correct=bool(correct))


def bptt(
    params: NetParams,
    episode: Episode,
    loss: str = "cross_entropy",
    trace: np.ndarray | None = None,
    trainable: tuple[str, ...] | None = None,
    out: Gradients | None = None,
) -> BpttResult:
    """Exact gradients of the episode loss via backpropagation through time.

    loss="cross_entropy" scores masked output steps (mean); loss="mse_hidden"
    needs `trace`, the (steps, lstm_units) hidden-state targets, and produces
    LSTM gradients only.  `trainable` limits which tensor groups get filled
    (None = all); `out` reuses a gradient buffer.
    """
    _check_episode(params, episode)
    if loss == "cross_entropy":
        return bptt_arrays(params, episode.step_vectors, episode.target_indices(),
                           trainable=trainable, out=out)
    grads = out if out is not None else Gradients.zeros(params.config)
    if loss == "mse_hidden":
        if trace is None:
            raise NetError("mse_hidden loss needs a hidden-state trace")
        if trace.shape != (episode.n_steps, params.config.lstm_units):
            raise NetError(
                f"trace shape {trace.shape} does not match episode "
                f"({episode.n_steps} steps x {params.config.lstm_units} units)"
            )
        grads.w_sig[:] = 0.0
        grads.b_sig[:] = 0.0
        grads.w_out[:] = 0.0
        grads.b_out[:] = 0.0
        value = kernels.bptt_mse(params.w_gates, params.b_gates,
                                 episode.step_vectors, np.ascontiguousarray(trace),
                                 grads.w_gates, grads.b_gates)
        return BpttResult(grads=grads, loss=float(value), all_correct=None)
    raise NetError(f"unknown loss {loss!r}")


def update(
    params: NetParams,
    grads: Gradients,
    opt: OptState,
    frozen: tuple[str, ...] = (),
) -> tuple[NetParams, OptState]:
    """One optimizer step in place; re-applies the mask, skips frozen tensors."""
    opt.step += 1
    ok = 1
    for name in TENSOR_ORDER:
        if name in frozen:
            continue
        p = getattr(params, name)
        g = getattr(grads, name)
        if opt.kind == "adam":
            ok &= kernels.adam_step(p, g, opt.m[name], opt.v[name], opt.step,
                                    opt.lr, opt.beta1, opt.beta2, opt.eps)
        elif opt.kind == "sgd":
            ok &= kernels.sgd_step(p, g, opt.lr)
        else:
            raise NetError(f"unknown optimizer kind {opt.kind!r}")
    if params.config.sigmoid_mask is not None:
        params.w_sig *= params.config.sigmoid_mask
    if not ok:
        raise NonFiniteGradientError("non-finite gradient during update")
    return params, opt


def _checkpoint_tensors(params: NetParams, opt: OptState) -> list[tuple[str, np.ndarray]]:
    entries = [(name, getattr(params, name)) for name in TENSOR_ORDER]
    if params.config.sigmoid_mask is not None:
        entries.append(("sigmoid_mask", params.config.sigmoid_mask))
    if opt.kind == "adam" and opt.m is not None:
        entries.extend((f"m_{name}", opt.m[name]) for name in TENSOR_ORDER)
        entries.extend((f"v_{name}", opt.v[name]) for name in TENSOR_ORDER)
    return entries


def save_checkpoint(
    params: NetParams, opt: OptState, meta: dict[str, Any] | None, path: str | Path
) -> Path:
    """Binary checkpoint: fixed header, named f64-LE tensors, sha256 trailer."""
    entries = _checkpoint_tensors(params, opt)
    header = {
        "config": params.config.fingerprint(),
        "optimizer": {**opt.settings(), "step": opt.step,
                      "has_moments": opt.kind == "adam" and opt.m is not None},
        "meta": meta or {},
        "tensors": [[name, list(arr.shape)] for name, arr in entries],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += CHECKPOINT_FORMAT_VERSION.to_bytes(4, "little")
    blob += len(header_bytes).to_bytes(4, "little")
    blob += header_bytes
    for _, arr in entries:
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    blob += hashlib.sha256(blob).digest()
    path = Path(path)
    path.write_bytes(bytes(blob))
    return path


def load_checkpoint(path: str | Path) -> tuple[NetParams, OptState, dict[str, Any]]:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 + 32:
        raise CheckpointIntegrityError("checkpoint truncated")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointIntegrityError("bad checkpoint magic")
    if hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
        raise CheckpointIntegrityError("checkpoint checksum mismatch")
    off = len(CHECKPOINT_MAGIC)
    version = int.from_bytes(raw[off : off + 4], "little")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format_version {version} != {CHECKPOINT_FORMAT_VERSION}"
        )
    off += 4
    header_len = int.from_bytes(raw[off : off + 4], "little")
    off += 4
    try:
        header = json.loads(raw[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"unreadable checkpoint header: {exc}") from exc
    off += header_len
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        end = off + 8 * n
        if end > len(raw) - 32:
            raise CheckpointIntegrityError("checkpoint payload truncated")
        arrays[name] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).copy()
        off = end
    if off != len(raw) - 32:
        raise CheckpointIntegrityError("checkpoint payload has trailing bytes")

    cfg = header["config"]
    mask = arrays.get("sigmoid_mask") if cfg.get("has_mask") else None
    config = NetConfig(
        lstm_units=cfg["lstm_units"], input_dim=cfg["input_dim"],
        sigmoid_units=cfg["sigmoid_units"], output_dim=cfg["output_dim"],
        sigmoid_mask=mask)
    params = NetParams(config, *(arrays[name] for name in TENSOR_ORDER))
    o = header["optimizer"]
    opt = OptState(kind=o["kind"], lr=o["lr"], beta1=o.get("beta1", 0.9),
                   beta2=o.get("beta2", 0.999), eps=o.get("eps", 1e-8), step=o["step"])
    if o.get("has_moments"):
        opt.m = {name: arrays[f"m_{name}"] for name in TENSOR_ORDER}
        opt.v = {name: arrays[f"v_{name}"] for name in TENSOR_ORDER}
    return params, opt, header["meta"]
