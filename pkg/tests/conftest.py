from __future__ import annotations

import random

import pytest
import torch

from fairsynth.data import Cohort, PatientRecord

torch.set_num_threads(1)

GROUPS = ("White", "Black", "Hispanic", "Asian", "Others")


def random_records(n: int, seed: int = 0, n_codes: int = 12, max_visits: int = 4, groups=GROUPS) -> list[PatientRecord]:
    rng = random.Random(seed)
    records = []
    for i in range(n):
        visits = []
        for _ in range(rng.randint(1, max_visits)):
            codes = {f"d_{rng.randrange(n_codes):03d}" for _ in range(rng.randint(1, 3))}
            if rng.random() < 0.4:
                codes.add(f"lab:hr:{rng.randrange(3)}")
            visits.append(frozenset(codes))
        records.append(
            PatientRecord(
                patient_id=f"p{seed}-{i:04d}",
                static={"ethnicity": groups[i % len(groups)] if i < len(groups) else rng.choice(groups),
                        "gender": rng.choice("MF")},
                labels=frozenset(f"ph{j}" for j in range(3) if rng.random() < 0.3),
                visits=tuple(visits),
                outcome=int(rng.random() < 0.3),
            )
        )
    return records


def random_cohort(n: int, seed: int = 0, **kwargs) -> Cohort:
    return Cohort.from_records(random_records(n, seed, **kwargs), min_code_count=1)


@pytest.fixture
def small_cohort() -> Cohort:
    return random_cohort(40, seed=1)


# One status line per acceptance criterion, echoed at the end of the run.
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
