"""Model selection over (G, D) and clustering evaluation."""

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from ._math import sigmoid
from .criteria import bic, count_parameters, map_classify
from .ecm import FitConfig, FitResult, fit, with_seed_key
from .exceptions import MltcnError, SelectionFailed
from .model import BinaryDataset

logger = logging.getLogger(__name__)

__all__ = [
    "CellFailure", "EvaluationReport", "MedianProfiles", "SelectionGrid",
    "adjusted_rand_index", "bic", "count_parameters", "evaluation_report",
    "grid_select", "map_classify", "median_profiles", "rand_index",
]


@dataclass(frozen=True)
class CellFailure:
    G: int
    D: int
    error: str


@dataclass
class SelectionGrid:
    """Fits indexed by ``(G, D)``; ``best`` is the successful cell with minimum BIC."""

    cells: dict
    best: tuple
    n: int
    m: int
    rotation_adjust: bool = False

    def bic_of(self, key):
        cell = self.cells[key]
        if isinstance(cell, CellFailure):
            return float("nan")
        k = count_parameters(key[0], key[1], self.m, self.rotation_adjust)
        return bic(cell.bound, k, self.n)

    @property
    def g_values(self):
        return sorted({g for g, _ in self.cells})

    @property
    def d_values(self):
        return sorted({d for _, d in self.cells})

    def bic_table(self):
        """BIC as a ``len(d_values) x len(g_values)`` array (rows D, columns G)."""
        return np.array([[self.bic_of((g, d)) if (g, d) in self.cells else np.nan
                          for g in self.g_values] for d in self.d_values])

    @property
    def best_fit(self):
        return self.cells[self.best]


def _cell_bic(cell, key, n, m, rotation_adjust):
    k = count_parameters(key[0], key[1], m, rotation_adjust)
    return bic(cell.bound, k, n)


def grid_select(data, g_range, d_range, config=None, rotation_adjust=False):
    """Fit every ``(G, D)`` cell and mark the one with the smallest BIC.

    Each cell draws from its own child stream ``(G, D)`` of the base seed.
    Failing cells are kept as :class:`CellFailure` records.
    """
    config = config or FitConfig()
    x = data.responses if isinstance(data, BinaryDataset) else np.asarray(data)
    n, m = x.shape
    g_range, d_range = list(g_range), list(d_range)
    if not g_range or not d_range:
        raise ValueError("g_range and d_range must be non-empty")
    cells = {}
    for D in d_range:
        for G in g_range:
            cell_config = with_seed_key(FitConfig(**{**config.__dict__, "G": G, "D": D}), G, D)
            try:
                cells[(G, D)] = fit(x, cell_config)
            except (MltcnError, ValueError) as exc:
                logger.warning("cell G=%d D=%d failed: %s", G, D, exc)
                cells[(G, D)] = CellFailure(G, D, repr(exc))
    ok = {key: _cell_bic(cell, key, n, m, rotation_adjust)
          for key, cell in cells.items() if isinstance(cell, FitResult)}
    if not ok:
        raise SelectionFailed("every cell of the grid failed")
    best = min(ok, key=lambda key: (ok[key], key))
    return SelectionGrid(cells=cells, best=best, n=n, m=m, rotation_adjust=rotation_adjust)


# -- partition agreement ------------------------------------------------------

def _contingency(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("label vectors must be one-dimensional and of equal length")
    if a.size < 2:
        raise ValueError("need at least two labels")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _pair_counts(table):
    """Integer pair sums: all pairs, same-cell pairs, same-row pairs, same-column pairs."""
    def c2(v):
        v = np.asarray(v, dtype=object)
        return int(np.sum(v * (v - 1) // 2))
    n = int(table.sum())
    return n * (n - 1) // 2, c2(table.ravel()), c2(table.sum(axis=1)), c2(table.sum(axis=0))


def rand_index(a, b):
    """Fraction of observation pairs on which two partitions agree."""
    total, both, rows, cols = _pair_counts(_contingency(a, b))
    agreements = total + 2 * both - rows - cols
    return float(Fraction(agreements, total))


def adjusted_rand_index(a, b):
    """Hubert-Arabie chance-corrected Rand index.

    The degenerate case with zero denominator (both partitions all-singleton
    or both a single cluster) returns 1.
    """
    total, both, rows, cols = _pair_counts(_contingency(a, b))
    expected = Fraction(rows * cols, total)
    maximum = Fraction(rows + cols, 2)
    if maximum == expected:
        return 1.0
    return float((both - expected) / (maximum - expected))


# -- reports ------------------------------------------------------------------

@dataclass
class MedianProfiles:
    """Positive-response probabilities per component.

    ``median`` is ``sigmoid(alpha)``, the response probability at ``y = 0``.
    ``normal`` and ``extreme`` (when data were given) are the observed
    response rates weighted by ``z c`` and ``z (1 - c)`` respectively.
    """

    median: np.ndarray
    normal: Optional[np.ndarray] = None
    extreme: Optional[np.ndarray] = None
    variable_names: Optional[tuple] = None


def median_profiles(params, data=None, resp=None, normal_prob=None):
    median = sigmoid(np.asarray(params.alpha))
    if data is None:
        return MedianProfiles(median=np.atleast_2d(median))
    x = np.asarray(data.responses if isinstance(data, BinaryDataset) else data, dtype=float)
    names = data.variable_names if isinstance(data, BinaryDataset) else None
    wn = np.asarray(resp) * np.asarray(normal_prob)
    we = np.asarray(resp) * (1.0 - np.asarray(normal_prob))
    with np.errstate(invalid="ignore", divide="ignore"):
        normal = (wn.T @ x) / wn.sum(axis=0)[:, None]
        extreme = (we.T @ x) / we.sum(axis=0)[:, None]
    return MedianProfiles(median=median, normal=normal, extreme=extreme, variable_names=names)


@dataclass
class EvaluationReport:
    """Agreement between a fitted clustering and reference labels.

    ``cross_tab[r, g, k]`` counts observations with reference label
    ``label_values[r]``, MAP component ``g`` and flag ``k`` (0 normal,
    1 extreme).
    """

    label_values: list
    cross_tab: np.ndarray
    rand: float
    ari: float
    n_extreme: int
    n_misclassified: int
    matching: dict = field(default_factory=dict)

    @property
    def n(self):
        return int(self.cross_tab.sum())


def evaluation_report(result, labels):
    """Cross-tabulate labels against MAP groups and normal/extreme flags.

    Misclassifications are counted under the group-to-label matching that
    maximises agreement (Hungarian assignment on the contingency table).
    """
    labels = np.asarray(labels)
    groups = np.asarray(result.map_labels)
    extreme = np.asarray(result.extreme_flags, dtype=bool)
    if labels.shape != groups.shape:
        raise ValueError(f"expected {groups.shape[0]} labels, got {labels.shape[0]}")
    values, li = np.unique(labels, return_inverse=True)
    G = int(result.params.n_components)
    cross = np.zeros((len(values), G, 2), dtype=np.int64)
    np.add.at(cross, (li, groups, extreme.astype(int)), 1)
    agree = cross.sum(axis=2)  # labels x groups
    rows, cols = linear_sum_assignment(-agree)
    matched = int(agree[rows, cols].sum())
    return EvaluationReport(
        label_values=values.tolist(), cross_tab=cross,
        rand=rand_index(labels, groups), ari=adjusted_rand_index(labels, groups),
        n_extreme=int(extreme.sum()), n_misclassified=int(labels.size - matched),
        matching={int(g): values[r].item() for r, g in zip(rows, cols)},
    )
