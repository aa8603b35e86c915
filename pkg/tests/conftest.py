from __future__ import annotations

import pytest

from comprnn.tables import LookupTable, TaskSet, generate_task_set, holdout_split, save_task_set

# Published example tables g and c: the documented rows are fixed, the
# remaining rows are filled with any consistent bijection.
#   g: 000->010, 001->110, 010->001        c: 000->100, 001->000, 010->101,
#                                             110->111 (pinned by cg(001)=110111)
PAPER_G = ("010", "110", "001", "000", "011", "100", "101", "111")
PAPER_C = ("100", "000", "101", "001", "010", "011", "111", "110")


def make_paper_task_set() -> TaskSet:
    base = generate_task_set(seed=77)
    tables = dict(base.tables)
    tables["g"] = LookupTable("g", PAPER_G)
    tables["c"] = LookupTable("c", PAPER_C)
    return TaskSet(seed=77, length=3, tables=tables)


@pytest.fixture(scope="session")
def paper_set() -> TaskSet:
    return make_paper_task_set()


@pytest.fixture(scope="session")
def paper_split(paper_set):
    return holdout_split(paper_set, per_task=2, seed=5)


@pytest.fixture()
def task_file(tmp_path, paper_set, paper_split):
    return save_task_set(paper_set, paper_split, tmp_path / "tasks.json")
