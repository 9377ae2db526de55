"""Paired-comparison significance: McNemar on aligned top-1 correctness.

The test looks only at discordant queries, where exactly one of the two
models is correct. With b = row-model-only-correct and c =
column-model-only-correct counts,

    chi2 = (b - c)^2 / (b + c)
    p    = erfc(sqrt(chi2 / 2))

which is the survival function of a 1-dof chi-square; no continuity
correction is applied. b + c = 0 means no discordant queries at all: the
result is a tie with chi2 = 0 and p = 1.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

from .core import InvalidConfigError, LengthMismatchError


class Direction(enum.Enum):
    ROW_BETTER = "row_better"
    COL_BETTER = "col_better"
    TIE = "tie"

    @property
    def arrow(self) -> str:
        # up = fewer errors for the row model
        return {"row_better": "↑", "col_better": "↓", "tie": "="}[self.value]


@dataclass(frozen=True)
class ContingencyTable:
    """Counts over aligned queries; 'row'/'col' are the two compared models."""

    both_correct: int
    row_only_correct: int
    col_only_correct: int
    both_incorrect: int

    def __post_init__(self) -> None:
        cells = (
            self.both_correct,
            self.row_only_correct,
            self.col_only_correct,
            self.both_incorrect,
        )
        if any(cell < 0 for cell in cells):
            raise InvalidConfigError("contingency counts must be >= 0")


@dataclass(frozen=True)
class McNemarResult:
    chi2: float
    p_value: float
    direction: Direction


def correctness_vector(
    row_flags: Sequence[bool], col_flags: Sequence[bool]
) -> ContingencyTable:
    """Tabulate two aligned per-query correctness vectors."""
    if len(row_flags) != len(col_flags):
        raise LengthMismatchError(
            f"flag vectors differ in length: {len(row_flags)} vs {len(col_flags)}"
        )
    both = row_only = col_only = neither = 0
    for row_ok, col_ok in zip(row_flags, col_flags):
        if row_ok and col_ok:
            both += 1
        elif row_ok:
            row_only += 1
        elif col_ok:
            col_only += 1
        else:
            neither += 1
    return ContingencyTable(both, row_only, col_only, neither)


def mcnemar(table: ContingencyTable) -> McNemarResult:
    """McNemar chi-square on the discordant cells, exact erfc-based p."""
    b = table.row_only_correct
    c = table.col_only_correct
    if b + c == 0:
        return McNemarResult(chi2=0.0, p_value=1.0, direction=Direction.TIE)
    chi2 = (b - c) ** 2 / (b + c)
    p_value = math.erfc(math.sqrt(chi2 / 2.0))
    if b > c:
        direction = Direction.ROW_BETTER
    elif c > b:
        direction = Direction.COL_BETTER
    else:
        direction = Direction.TIE
    return McNemarResult(chi2=chi2, p_value=p_value, direction=direction)
