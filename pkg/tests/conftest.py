import json
from pathlib import Path

import numpy as np
import pytest

from msra.core import Alphabet

DATA = Path(__file__).parent / "data"

# Argmax layout of a two-sequence prediction: "12" on row 1, "579" on row 3.
PAIR_LAYOUT = [
    "-------",
    "-1-2---",
    "-------",
    "--5-7-9",
    "-------",
]

ACCEPTANCE_LINES = []


def layout_to_grid(rows, alphabet, peak=0.8):
    """Probability grid whose argmax reproduces ``rows`` (``-`` is blank)."""
    H, W, Q = len(rows), len(rows[0]), alphabet.size
    x = np.full((H, W, Q), (1 - peak) / (Q - 1))
    for i, row in enumerate(rows):
        for j, ch in enumerate(row):
            k = 0 if ch == alphabet.blank_char else alphabet.encode(ch)[0]
            x[i, j, k] = peak
    return x


@pytest.fixture
def digits():
    return Alphabet("0123456789")


@pytest.fixture
def pair_grid(digits):
    return layout_to_grid(PAIR_LAYOUT, digits)


@pytest.fixture
def pair_grid_file():
    return DATA / "pair_grid.json"


@pytest.fixture
def acceptance():
    def record(criterion, passed, detail=""):
        ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'} {criterion}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
