"""Provenance record for one training run.

Re-exported by `search`; lives apart so the trainer can emit records without
importing the search harness.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass
class RunRecord:
    """One run's identity, configuration, and final scores.

    (init_seed, train_seed, variant, config hash) identify a run; re-running
    it reproduces the same scores bit-for-bit.  `wall_time` is the only field
    allowed to differ between reproductions.
    """

    run_id: int
    variant: str
    init_seed: int
    train_seed: int
    episodes_phase1: int
    episodes_phase2: int
    optimizer: dict
    task_set_hash: str
    atomic_accuracy: float | None
    seen_composed_accuracy: float | None
    generalization_performance: float | None
    phase1_rolling_success: float | None
    wall_time: float
    status: str  # "ok" | "failed"
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        return cls(**doc)

    def comparable_dict(self) -> dict:
        """Everything that must reproduce exactly across re-runs."""
        doc = self.to_dict()
        doc.pop("wall_time")
        return doc
