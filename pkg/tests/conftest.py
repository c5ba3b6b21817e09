"""Shared test helpers: the bit-level binary16 oracle and gradient checking."""

import math

import numpy as np
import pytest

from ca3d import tensor as tc


def _binary16_table():
    """All finite binary16 values plus the overflow pseudo-values +-2^16.

    Built purely from the 65536 bit patterns; used for exhaustive
    nearest-representable search independent of any conversion routine.
    """
    codes = np.arange(65536, dtype=np.uint16)
    vals = codes.view(np.float16).astype(np.float64)
    keep = np.isfinite(vals)
    v = vals[keep]
    c = codes[keep].astype(np.int64)
    # pseudo-entries for IEEE overflow rounding: the next value past +-65504
    # would carry the code into the infinity encoding
    v = np.concatenate([v, [65536.0, -65536.0]])
    c = np.concatenate([c, [0x7C00, 0xFC00]])
    order = np.argsort(v, kind="stable")
    return v[order], c[order]


_TABLE_VALS, _TABLE_CODES = _binary16_table()


def oracle_f16_round(x):
    """Nearest binary16 value by exhaustive search, ties to even code."""
    x = float(x)
    if math.isnan(x):
        return math.nan
    if math.isinf(x):
        return x
    i = np.searchsorted(_TABLE_VALS, x)
    cands = []
    for j in (i - 1, i, i + 1):
        if 0 <= j < len(_TABLE_VALS):
            cands.append(j)
    dists = [abs(_TABLE_VALS[j] - x) for j in cands]
    dmin = min(dists)
    best = [j for j, d in zip(cands, dists) if d == dmin]
    if len(best) > 1:
        # distinct tied values: pick the even code (mantissa LSB 0)
        best = [j for j in best if _TABLE_CODES[j] % 2 == 0] or best[:1]
    val = _TABLE_VALS[best[0]]
    if abs(val) == 65536.0:
        return math.copysign(math.inf, val)
    return float(val)


def rel_err(got, want, floor=1e-4):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(got), np.abs(want)), floor)
    return np.max(np.abs(got - want) / scale)


def gradcheck(build, x0, params=None, eps=1e-3, tol=1e-2, max_coords=100, seed=0):
    """Compare autodiff gradients against central finite differences.

    `build(x_arr)` runs a full32 forward returning a scalar Tensor with the
    input wrapped inside; autodiff gradient of the input is compared against
    the finite-difference oracle at up to `max_coords` random coordinates.
    """
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=np.float64)

    holder = {}

    def wrapped(arr):
        t = tc.Tensor(arr, tc.NumericMode(tc.FULL32), requires_grad=True)
        holder["x"] = t
        return build(t)

    loss = wrapped(x0)
    loss.backward()
    auto = holder["x"].grad
    assert auto is not None, "no gradient reached the input"

    ncoords = min(max_coords, x0.size)
    coords = rng.choice(x0.size, size=ncoords, replace=False)
    fd = tc.finite_diff_grad(lambda arr: wrapped(arr).item(), x0, eps=eps, coords=coords)
    a = auto.reshape(-1)[coords]
    f = fd.reshape(-1)[coords]
    err = rel_err(a, f)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
