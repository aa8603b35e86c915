from __future__ import annotations

import json
import xml.etree.ElementTree as ET

import pytest

from comprnn.records import RunRecord
from comprnn.search import (
    Aggregate,
    SearchConfig,
    SearchError,
    aggregate,
    bin_scores,
    compare_inits,
    read_results,
    run_one,
    run_search,
)


def tiny_search(task_file, **kw) -> SearchConfig:
    base = dict(n_runs=4, task_set_path=str(task_file), master_seed=3,
                workers=1, episodes_phase1=150, episodes_phase2=150)
    base.update(kw)
    return SearchConfig(**base)


def fake_record(run_id: int, score: float | None, status: str = "ok") -> RunRecord:
    return RunRecord(
        run_id=run_id, variant="exp2", init_seed=run_id, train_seed=run_id + 100,
        episodes_phase1=10, episodes_phase2=10, optimizer={"kind": "adam", "lr": 1e-3},
        task_set_hash="x", atomic_accuracy=None, seen_composed_accuracy=None,
        generalization_performance=score, phase1_rolling_success=None,
        wall_time=1.0, status=status)


def comparable(records):
    return sorted(json.dumps(r.comparable_dict(), sort_keys=True) for r in records)


def test_seed_assignment_is_a_pure_function_of_run_index(task_file):
    config = tiny_search(task_file)
    assert config.seeds_for(2) == config.seeds_for(2)
    assert config.seeds_for(1) != config.seeds_for(2)
    fixed = tiny_search(task_file, seed_policy="fixed_init")
    assert fixed.seeds_for(0)[0] == fixed.seeds_for(3)[0]
    assert fixed.seeds_for(0)[1] != fixed.seeds_for(3)[1]


def test_config_hash_ignores_execution_parameters(task_file):
    a = tiny_search(task_file, workers=1, n_runs=4)
    b = tiny_search(task_file, workers=8, n_runs=9)
    assert a.config_hash() == b.config_hash()
    c = tiny_search(task_file, master_seed=4)
    assert a.config_hash() != c.config_hash()


def test_search_results_roundtrip(tmp_path, task_file):
    config = tiny_search(task_file)
    out = run_search(config, tmp_path / "results.jsonl")
    header, records = read_results(out)
    assert header["format_version"] == 1
    assert header["config_hash"] == config.config_hash()
    assert [r.run_id for r in records] == [0, 1, 2, 3]
    assert all(r.status == "ok" for r in records)


def test_worker_count_does_not_change_the_record_set(tmp_path, task_file):
    out1 = run_search(tiny_search(task_file, workers=1), tmp_path / "w1.jsonl")
    out2 = run_search(tiny_search(task_file, workers=2), tmp_path / "w2.jsonl")
    _, records1 = read_results(out1)
    _, records2 = read_results(out2)
    assert comparable(records1) == comparable(records2)


def test_fixed_init_policy_shares_the_initialization(tmp_path, task_file):
    out = run_search(tiny_search(task_file, seed_policy="fixed_init"),
                     tmp_path / "fixed.jsonl")
    _, records = read_results(out)
    assert len({r.init_seed for r in records}) == 1
    assert len({r.train_seed for r in records}) == len(records)


def test_resume_skips_completed_runs_and_is_idempotent(tmp_path, task_file):
    partial = tiny_search(task_file, n_runs=2)
    out = run_search(partial, tmp_path / "resume.jsonl")
    first_two = read_results(out)[1]

    full = tiny_search(task_file, n_runs=4)
    run_search(full, out)
    _, records = read_results(out)
    assert [r.run_id for r in records] == [0, 1, 2, 3]
    # the first two runs were not recomputed (wall_time would differ)
    assert [r.to_dict() for r in records[:2]] == [r.to_dict() for r in first_two]

    before = out.read_bytes()
    run_search(full, out)  # resuming a completed search appends nothing
    assert out.read_bytes() == before


def test_resume_rejects_a_different_config(tmp_path, task_file):
    out = run_search(tiny_search(task_file), tmp_path / "r.jsonl")
    with pytest.raises(SearchError, match="different config"):
        run_search(tiny_search(task_file, master_seed=99), out)


def test_run_one_failure_becomes_a_failed_record(tmp_path, task_file):
    config = tiny_search(task_file, task_set_path=str(task_file) + ".missing")
    record = run_one(0, config)
    assert record.status == "failed"
    assert record.error and "missing" in record.error


def test_partial_trailing_line_is_tolerated(tmp_path, task_file):
    out = run_search(tiny_search(task_file, n_runs=2), tmp_path / "live.jsonl")
    with open(out, "a", encoding="utf-8") as fh:
        fh.write('{"run_id": 99, "variant": "exp')  # writer mid-line
    _, records = read_results(out)
    assert [r.run_id for r in records] == [0, 1]


def test_bin_scores_edges():
    bins = bin_scores([0.0, 4.9, 5.0, 99.9, 100.0], 5.0)
    assert len(bins) == 20
    assert bins[0] == (0.0, 5.0, 2)
    assert bins[1][2] == 1
    assert bins[-1] == (95.0, 100.0, 2)  # 100 lands in the last bin
    with pytest.raises(SearchError):
        bin_scores([101.0], 5.0)


def test_aggregate_all_zero_scores_fill_one_bin():
    agg = aggregate([fake_record(i, 0.0) for i in range(7)], bin_width=5.0)
    assert agg.bins[0][2] == 7
    assert sum(c for _, _, c in agg.bins) == 7
    assert agg.mean == 0.0 and agg.max_score == 0.0


def test_aggregate_statistics_match_an_independent_recount():
    scores = [3.125, 18.75, 50.0, 81.25, 92.1875, 100.0]
    records = [fake_record(i, s) for i, s in enumerate(scores)]
    records.append(fake_record(len(scores), None, status="failed"))
    agg = aggregate(records, bin_width=5.0)
    assert agg.n_scored == 6 and agg.n_failed == 1
    assert agg.mean == pytest.approx(sum(scores) / len(scores), abs=1e-9)
    assert agg.median == pytest.approx((50.0 + 81.25) / 2)
    assert agg.count_above_80 == 3 and agg.count_above_90 == 2
    # histogram recount from the raw records equals the binned counts
    for lo, hi, count in agg.bins:
        expected = sum(lo <= s < hi or (hi == 100.0 and s == 100.0) for s in scores)
        assert count == expected


def test_aggregate_requires_a_scored_run():
    with pytest.raises(SearchError):
        aggregate([fake_record(0, None, status="failed")])


def test_csv_and_svg_outputs(tmp_path):
    agg = aggregate([fake_record(i, s) for i, s in enumerate([10.0, 12.0, 88.0])])
    csv_path = agg.write_csv(tmp_path / "hist.csv")
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "bin_low,bin_high,count"
    assert len(lines) == 21
    assert lines[3] == "10,15,2"
    svg_path = agg.write_svg(tmp_path / "hist.svg")
    root = ET.fromstring(svg_path.read_text())  # well-formed XML
    assert root.tag.endswith("svg")
    rects = [el for el in root.iter() if el.tag.endswith("rect")]
    assert len(rects) > 20


def test_aggregation_does_not_mutate_the_results_file(tmp_path, task_file):
    out = run_search(tiny_search(task_file, n_runs=2), tmp_path / "agg.jsonl")
    before = out.read_bytes()
    aggregate(out)
    assert out.read_bytes() == before


def test_compare_inits(tmp_path, task_file):
    out_a = run_search(tiny_search(task_file, seed_policy="fixed_init", n_runs=2),
                       tmp_path / "a.jsonl")
    comparison = compare_inits(out_a, out_a)
    assert comparison.a.summary_dict() == comparison.b.summary_dict()
    comparison.write_json(tmp_path / "cmp.json")
    comparison.write_svg(tmp_path / "cmp.svg")
    assert ET.fromstring((tmp_path / "cmp.svg").read_text()).tag.endswith("svg")


def test_compare_inits_rejects_mismatched_variants(tmp_path, task_file):
    out_a = run_search(tiny_search(task_file, n_runs=2), tmp_path / "va.jsonl")
    out_b = run_search(tiny_search(task_file, n_runs=2, variant="composed_only"),
                       tmp_path / "vb.jsonl")
    with pytest.raises(SearchError, match="variant mismatch"):
        compare_inits(out_a, out_b)
