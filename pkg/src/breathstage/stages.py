"""Sleep stage enumerations and the 5-class to 4-class collapse."""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class Stage5(IntEnum):
    # integer order doubles as the argmax tie-break order
    WAKE = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4

    @property
    def code(self) -> str:
        return _STAGE5_CODES[self]

    @classmethod
    def from_code(cls, code: str) -> "Stage5":
        try:
            return _STAGE5_LOOKUP[code.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown stage code {code!r}") from None


class Stage4(IntEnum):
    WAKE = 0
    LIGHT = 1
    DEEP = 2
    REM = 3

    @property
    def code(self) -> str:
        return _STAGE4_CODES[self]


_STAGE5_CODES = {Stage5.WAKE: "W", Stage5.N1: "N1", Stage5.N2: "N2", Stage5.N3: "N3", Stage5.REM: "REM"}
_STAGE5_LOOKUP = {v: k for k, v in _STAGE5_CODES.items()}
_STAGE5_LOOKUP.update({"R": Stage5.REM, "WAKE": Stage5.WAKE})
_STAGE4_CODES = {Stage4.WAKE: "W", Stage4.LIGHT: "L", Stage4.DEEP: "D", Stage4.REM: "REM"}

# index = Stage5 value, entry = Stage4 value
COLLAPSE = np.array([Stage4.WAKE, Stage4.LIGHT, Stage4.LIGHT, Stage4.DEEP, Stage4.REM], dtype=np.int64)

# (5, 4) indicator; probs5 @ COLLAPSE_MATRIX sums N1 and N2 mass
COLLAPSE_MATRIX = np.zeros((5, 4))
COLLAPSE_MATRIX[np.arange(5), COLLAPSE] = 1.0


def collapse_labels(stages5) -> np.ndarray:
    """Map integer 5-class labels to 4-class labels."""
    return COLLAPSE[np.asarray(stages5, dtype=np.int64)]
