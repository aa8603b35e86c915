"""Massively parallel random search over seeded training runs.

Results are newline-delimited JSON: a header line carrying the format version
and a config hash, then one RunRecord per line.  Runs are fully independent
and individually seeded, so the record set is identical for any worker count,
and an interrupted search resumes by skipping run_ids already on disk.
"""
from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import kernels
from .records import RunRecord
from .seeding import derive_seed
from .tables import Split, TaskSet, load_task_set
from .trainer import TrainConfig, exp1_run_record, train_exp1, train_exp2

RESULTS_FORMAT_VERSION = 1


class SearchError(ValueError):
    pass


@dataclass
class SearchConfig:
    n_runs: int
    task_set_path: str
    master_seed: int = 0
    workers: int = 1
    variant: str = "exp2"
    episodes_phase1: int = 50_000
    episodes_phase2: int = 50_000
    lstm_units: int | None = None
    optimizer: str = "adam"
    lr: float = 1e-3
    final_output_only: bool = False
    held_out_compositions: int = 16
    seed_policy: str = "fresh"  # "fresh" | "fixed_init"
    fixed_init_seed: int | None = None

    def __post_init__(self) -> None:
        if self.seed_policy not in ("fresh", "fixed_init"):
            raise SearchError(f"unknown seed policy {self.seed_policy!r}")
        if self.n_runs < 1:
            raise SearchError("n_runs must be >= 1")

    def identity(self) -> dict:
        """Everything that defines the run set (worker count and n_runs do not)."""
        doc = asdict(self)
        doc.pop("workers")
        doc.pop("n_runs")
        return doc

    def config_hash(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def seeds_for(self, run_id: int) -> tuple[int, int]:
        """(init_seed, train_seed), a pure function of run index and master seed."""
        train_seed = derive_seed(self.master_seed, f"train/{run_id}")
        if self.seed_policy == "fixed_init":
            init_seed = (self.fixed_init_seed if self.fixed_init_seed is not None
                         else derive_seed(self.master_seed, "init/fixed"))
        else:
            init_seed = derive_seed(self.master_seed, f"init/{run_id}")
        return init_seed, train_seed

    def train_config(self, run_id: int) -> TrainConfig:
        init_seed, train_seed = self.seeds_for(run_id)
        return TrainConfig(
            variant=self.variant,
            episodes_phase1=self.episodes_phase1,
            episodes_phase2=self.episodes_phase2,
            init_seed=init_seed,
            train_seed=train_seed,
            task_set_path=self.task_set_path,
            lstm_units=self.lstm_units,
            optimizer=self.optimizer,
            lr=self.lr,
            final_output_only=self.final_output_only,
            held_out_compositions=self.held_out_compositions,
        )


_TABLE_CACHE: dict[str, tuple[TaskSet, Split]] = {}


def _cached_tables(path: str) -> tuple[TaskSet, Split]:
    if path not in _TABLE_CACHE:
        _TABLE_CACHE[path] = load_task_set(path)
    return _TABLE_CACHE[path]


def run_one(run_id: int, config: SearchConfig) -> RunRecord:
    """Execute a single run; any crash becomes a failed record, not a lost one."""
    train_config = config.train_config(run_id)
    try:
        task_set, split = _cached_tables(config.task_set_path)
        if config.variant == "exp1":
            _, metrics = train_exp1(train_config, task_set, split)
            return exp1_run_record(train_config, metrics, task_set, split, run_id)
        _, record = train_exp2(train_config, task_set, split, run_id)
        return record
    except Exception as exc:  # noqa: BLE001 - a worker must always return a record
        return RunRecord(
            run_id=run_id, variant=config.variant,
            init_seed=train_config.init_seed, train_seed=train_config.train_seed,
            episodes_phase1=config.episodes_phase1, episodes_phase2=config.episodes_phase2,
            optimizer={"kind": config.optimizer, "lr": config.lr},
            task_set_hash="", atomic_accuracy=None, seen_composed_accuracy=None,
            generalization_performance=None, phase1_rolling_success=None,
            wall_time=0.0, status="failed", error=f"{type(exc).__name__}: {exc}")


def make_header(config_hash: str, config: dict) -> dict:
    return {"format_version": RESULTS_FORMAT_VERSION,
            "config_hash": config_hash, "config": config}


def read_results(path: str | Path) -> tuple[dict, list[RunRecord]]:
    """Header plus records; a partial trailing line (live writer) is skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SearchError(f"results file {path} is empty")
    header = json.loads(lines[0])
    if header.get("format_version") != RESULTS_FORMAT_VERSION:
        raise SearchError(
            f"results format_version {header.get('format_version')!r} "
            f"!= {RESULTS_FORMAT_VERSION}")
    records = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(RunRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, TypeError):
            if i == len(lines):
                continue  # partial last line of a live file
            raise SearchError(f"corrupt record at {path}:{i}")
    return header, records


def run_search(config: SearchConfig, out: str | Path) -> Path:
    """Train all runs across the worker pool, appending records as they finish."""
    out = Path(out)
    done: dict[int, RunRecord] = {}
    if out.exists():
        header, records = read_results(out)
        if header["config_hash"] != config.config_hash():
            raise SearchError("existing results were produced by a different config")
        done = {r.run_id: r for r in records}
    pending = [i for i in range(config.n_runs) if i not in done]

    mode = "a" if out.exists() else "w"
    with open(out, mode, encoding="utf-8") as fh:
        if mode == "w":
            fh.write(json.dumps(make_header(config.config_hash(), config.identity()),
                                sort_keys=True) + "\n")
            fh.flush()
        if pending:
            kernels.warmup()  # compile before forking so workers reuse the cache
        if config.workers <= 1 or len(pending) <= 1:
            for run_id in pending:
                record = run_one(run_id, config)
                done[record.run_id] = record
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
                fh.flush()
        else:
            with ProcessPoolExecutor(max_workers=config.workers) as pool:
                futures = {pool.submit(run_one, run_id, config): run_id
                           for run_id in pending}
                remaining = set(futures)
                while remaining:
                    finished, remaining = wait(remaining, return_when=FIRST_COMPLETED)
                    for fut in finished:
                        run_id = futures[fut]
                        exc = fut.exception()
                        if exc is not None:
                            init_seed, train_seed = config.seeds_for(run_id)
                            record = RunRecord(
                                run_id=run_id, variant=config.variant,
                                init_seed=init_seed, train_seed=train_seed,
                                episodes_phase1=config.episodes_phase1,
                                episodes_phase2=config.episodes_phase2,
                                optimizer={"kind": config.optimizer, "lr": config.lr},
                                task_set_hash="", atomic_accuracy=None,
                                seen_composed_accuracy=None,
                                generalization_performance=None,
                                phase1_rolling_success=None, wall_time=0.0,
                                status="failed", error=f"worker crash: {exc}")
                        else:
                            record = fut.result()
                        done[record.run_id] = record
                        fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
                        fh.flush()

    # Canonical rewrite: header plus records sorted by run_id.
    tmp = out.with_suffix(out.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(make_header(config.config_hash(), config.identity()),
                            sort_keys=True) + "\n")
        for run_id in sorted(done):
            fh.write(json.dumps(done[run_id].to_dict(), sort_keys=True) + "\n")
    tmp.replace(out)
    return out


@dataclass
class Aggregate:
    """Histogram and summary statistics over generalization performance."""

    bin_width: float
    bins: list[tuple[float, float, int]]
    mean: float
    median: float
    max_score: float
    count_above_80: int
    count_above_90: int
    n_scored: int
    n_failed: int

    def summary_dict(self) -> dict:
        return {
            "bin_width": self.bin_width,
            "mean": self.mean,
            "median": self.median,
            "max": self.max_score,
            "count_above_80": self.count_above_80,
            "count_above_90": self.count_above_90,
            "n_scored": self.n_scored,
            "n_failed": self.n_failed,
        }

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        rows = ["bin_low,bin_high,count"]
        rows += [f"{lo:g},{hi:g},{count}" for lo, hi, count in self.bins]
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        return path

    def write_svg(self, path: str | Path, title: str = "generalization performance") -> Path:
        path = Path(path)
        path.write_text(render_histogram_svg([(title, self.bins)], self.summary_dict()),
                        encoding="utf-8")
        return path


def bin_scores(scores: list[float], bin_width: float) -> list[tuple[float, float, int]]:
    """Counts over [0, 100]; the final bin includes the value 100 itself."""
    if bin_width <= 0 or bin_width > 100:
        raise SearchError("bin width must be in (0, 100]")
    n_bins = int(100 / bin_width) + (1 if 100 % bin_width else 0)
    counts = [0] * n_bins
    for s in scores:
        if not 0 <= s <= 100:
            raise SearchError(f"score {s} out of range")
        counts[min(int(s / bin_width), n_bins - 1)] += 1
    return [(i * bin_width, min((i + 1) * bin_width, 100.0), counts[i])
            for i in range(n_bins)]


def aggregate(source: str | Path | list[RunRecord], bin_width: float = 5.0) -> Aggregate:
    """Bin scores of successful runs and recompute the headline statistics."""
    records = source if isinstance(source, list) else read_results(source)[1]
    scores = sorted(r.generalization_performance for r in records
                    if r.status == "ok" and r.generalization_performance is not None)
    n_failed = sum(r.status != "ok" for r in records)
    if not scores:
        raise SearchError("no successful runs to aggregate")
    n = len(scores)
    median = (scores[n // 2] if n % 2 else (scores[n // 2 - 1] + scores[n // 2]) / 2)
    return Aggregate(
        bin_width=bin_width,
        bins=bin_scores(scores, bin_width),
        mean=sum(scores) / n,
        median=median,
        max_score=scores[-1],
        count_above_80=sum(s > 80 for s in scores),
        count_above_90=sum(s > 90 for s in scores),
        n_scored=n,
        n_failed=n_failed,
    )


@dataclass
class InitComparison:
    """Side-by-side distributions of two fixed-initialization searches."""

    a: Aggregate
    b: Aggregate
    label_a: str
    label_b: str

    def to_dict(self) -> dict:
        return {self.label_a: self.a.summary_dict(), self.label_b: self.b.summary_dict()}

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        return path

    def write_svg(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(
            render_histogram_svg(
                [(self.label_a, self.a.bins), (self.label_b, self.b.bins)],
                {self.label_a: self.a.summary_dict(), self.label_b: self.b.summary_dict()}),
            encoding="utf-8")
        return path


def compare_inits(
    path_a: str | Path, path_b: str | Path, bin_width: float = 5.0
) -> InitComparison:
    """Summaries for two result sets sharing a variant (fixed-init reruns)."""
    header_a, records_a = read_results(path_a)
    header_b, records_b = read_results(path_b)
    variant_a = header_a.get("config", {}).get("variant")
    variant_b = header_b.get("config", {}).get("variant")
    if variant_a != variant_b:
        raise SearchError(f"variant mismatch: {variant_a!r} vs {variant_b!r}")
    return InitComparison(
        a=aggregate(records_a, bin_width),
        b=aggregate(records_b, bin_width),
        label_a=Path(path_a).stem,
        label_b=Path(path_b).stem,
    )


_SERIES_COLORS = ("#4878a8", "#c44e52")


def render_histogram_svg(
    series: list[tuple[str, list[tuple[float, float, int]]]],
    provenance: dict | None = None,
) -> str:
    """Static bar-chart SVG, rendered without any external plotting library."""
    width, height = 720, 380
    left, right, top, bottom = 56, 16, 28, 48
    plot_w, plot_h = width - left - right, height - top - bottom
    n_bins = len(series[0][1])
    max_count = max((c for _, bins in series for _, _, c in bins), default=0) or 1
    n_series = len(series)
    slot_w = plot_w / n_bins
    bar_w = slot_w * 0.8 / n_series

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<desc>{json.dumps(provenance or {}, sort_keys=True)}</desc>",
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = top + plot_h * (1 - frac)
        parts.append(
            f'<line x1="{left}" y1="{y:.1f}" x2="{left + plot_w}" y2="{y:.1f}" '
            f'stroke="#dddddd"/>')
        parts.append(
            f'<text x="{left - 6}" y="{y + 4:.1f}" font-size="11" text-anchor="end" '
            f'font-family="sans-serif">{max_count * frac:g}</text>')
    for s, (label, bins) in enumerate(series):
        color = _SERIES_COLORS[s % len(_SERIES_COLORS)]
        for i, (_lo, _hi, count) in enumerate(bins):
            bar_h = plot_h * count / max_count
            x = left + i * slot_w + slot_w * 0.1 + s * bar_w
            y = top + plot_h - bar_h
            parts.append(
                f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" '
                f'height="{bar_h:.1f}" fill="{color}"/>')
        parts.append(
            f'<rect x="{left + 8 + s * 180}" y="{6}" width="12" height="12" fill="{color}"/>')
        parts.append(
            f'<text x="{left + 24 + s * 180}" y="{16}" font-size="12" '
            f'font-family="sans-serif">{label}</text>')
    for i, (lo, _hi, _c) in enumerate(series[0][1]):
        if n_bins <= 20 or i % 2 == 0:
            x = left + i * slot_w
            parts.append(
                f'<text x="{x:.1f}" y="{top + plot_h + 16}" font-size="10" '
                f'font-family="sans-serif">{lo:g}</text>')
    parts.append(
        f'<text x="{left + plot_w / 2:.0f}" y="{height - 8}" font-size="12" '
        f'text-anchor="middle" font-family="sans-serif">'
        f'zero-shot generalization (%)</text>')
    parts.append(
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="#333"/>')
    parts.append(
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" '
        f'y2="{top + plot_h}" stroke="#333"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
