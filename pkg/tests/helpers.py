"""Shared builders for the unit tests."""

import numpy as np

from coda.data import AuxiliarySample, Config, PrimarySample


def small_pair(rng, n_e=60, n_u=80, r=2, s=1):
    """Unstructured pair for shape and bookkeeping checks."""
    XE, XU = rng.normal(size=(n_e, r)), rng.normal(size=(n_u, r))
    AE, AU = rng.integers(0, 2, n_e), rng.integers(0, 2, n_u)
    e = PrimarySample(XE, AE, rng.normal(size=(n_e, s)), rng.normal(size=n_e))
    u = AuxiliarySample(XU, AU, rng.normal(size=(n_u, s)))
    return e, u


HO = Config(mode="HO")
HE = Config(mode="HE")
