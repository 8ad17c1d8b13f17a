"""Information criterion and MAP classification helpers."""

import math

import numpy as np


def count_parameters(G, D, M, rotation_adjust=False):
    """Number of free parameters of a ``(G, D)`` model on ``M`` variables.

    Counts ``G - 1`` mixing weights and, per component, ``M`` intercepts,
    ``M * D`` slopes, one ``tau`` and one ``eta``. With ``rotation_adjust``
    the ``D (D - 1) / 2`` rotational degrees of freedom of each slope matrix
    are subtracted.
    """
    G, D, M = int(G), int(D), int(M)
    if min(G, D, M) < 1:
        raise ValueError("G, D and M must be positive")
    k = (G - 1) + G * (M + M * D + 2)
    if rotation_adjust:
        k -= G * D * (D - 1) // 2
    return k


def bic(loglik, k, n):
    """``-2 loglik + k log n``; smaller is better."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return -2.0 * loglik + k * math.log(n)


def map_classify(resp):
    """Row-wise argmax of the responsibilities; ties go to the lowest index."""
    return np.argmax(np.asarray(resp), axis=1)
