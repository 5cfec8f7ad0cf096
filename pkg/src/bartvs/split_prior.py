"""Informed prior weights on splitting variables.

A per-variable prior importance ``m_k`` in [0, 1] and an influence parameter
``c`` give splitting weights ``w_k = 1 + c * m_k``. Weights only change which
variable a rule splits on; split values stay uniform over observed values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

C_GRID = (0.0, 0.5, 1.0, 2.0, 4.0, 10000.0)
CLAMP_RANGE = (0.05, 0.95)


@dataclass(frozen=True)
class PriorSpec:
    """Prior importance probabilities plus the influence parameter ``c``."""

    probabilities: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        m = np.array(self.probabilities, dtype=float).ravel()
        if m.size == 0:
            raise ValueError("prior needs at least one variable")
        if not np.isfinite(m).all() or (m < 0).any() or (m > 1).any():
            raise ValueError("prior probabilities must lie in [0, 1]")
        c = float(self.c)
        if not (np.isfinite(c) and c >= 0):
            raise ValueError("influence parameter c must be finite and >= 0")
        m.setflags(write=False)
        object.__setattr__(self, "probabilities", m)
        object.__setattr__(self, "c", c)

    @property
    def K(self) -> int:
        return self.probabilities.size

    def with_c(self, c: float) -> "PriorSpec":
        return PriorSpec(self.probabilities, c)


def compute_weights(spec: PriorSpec) -> np.ndarray:
    """Splitting weights ``1 + c * m``."""
    return 1.0 + spec.c * spec.probabilities


def uniform_weights(K: int) -> np.ndarray:
    """Equal weights, used by every permutation-null run."""
    if K < 1:
        raise ValueError("K must be >= 1")
    return np.ones(K)


def doubled_weight_spec(true_set: Iterable[int], K: int) -> np.ndarray:
    """Weight 2 on ``true_set`` and 1 elsewhere.

    Normalized, a doubled variable is chosen with probability ``2 / (K + len(true_set))``.
    """
    w = uniform_weights(K)
    idx = sorted(set(int(k) for k in true_set))
    if idx and (idx[0] < 0 or idx[-1] >= K):
        raise ValueError(f"true_set indices must lie in [0, {K})")
    w[idx] = 2.0
    return w


def selection_probabilities(weights) -> np.ndarray:
    """Normalized variable-choice probabilities at a node where all variables can split."""
    w = np.asarray(weights, dtype=float)
    return w / w.sum()


def read_prior_file(path, names: Sequence[str], clamp: bool = False,
                    default: float | None = None) -> np.ndarray:
    """Read a two-column (name, probability) file into a vector ordered like ``names``.

    A header row is skipped when its second field is not numeric. Names not in
    ``names`` are an error; dataset variables missing from the file are an
    error unless ``default`` is given. With ``clamp`` the probabilities are
    truncated to [0.05, 0.95].
    """
    path = Path(path)
    text = path.read_text()
    try:
        dialect = csv.Sniffer().sniff(text.splitlines()[0] if text else ",", delimiters=",\t; ")
    except csv.Error:
        dialect = csv.excel
    index = {n: i for i, n in enumerate(names)}
    values: dict[str, float] = {}
    for lineno, row in enumerate(csv.reader(text.splitlines(), dialect), start=1):
        row = [c.strip() for c in row if c.strip() != ""]
        if not row:
            continue
        if len(row) != 2:
            raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
        name, raw = row
        try:
            prob = float(raw)
        except ValueError:
            if lineno == 1:
                continue
            raise ValueError(f"{path}:{lineno}: non-numeric probability {raw!r}") from None
        if name not in index:
            raise ValueError(f"{path}:{lineno}: unknown variable {name!r}")
        if name in values:
            raise ValueError(f"{path}:{lineno}: duplicate variable {name!r}")
        if not (0.0 <= prob <= 1.0):
            raise ValueError(f"{path}:{lineno}: probability {prob} outside [0, 1]")
        values[name] = prob
    missing = [n for n in names if n not in values]
    if missing and default is None:
        raise ValueError(f"{path}: no prior probability for {', '.join(missing[:5])}"
                         + (" ..." if len(missing) > 5 else ""))
    out = np.array([values.get(n, default) for n in names], dtype=float)
    if clamp:
        out = np.clip(out, *CLAMP_RANGE)
    return out
