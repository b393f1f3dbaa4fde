"""Hot inner loops: batched argmax over hypothesis space, brute-force
enumeration, and the annealing sweep.

Each kernel has a numba implementation and a pure-numpy one with identical
results. The numba path is used when numba imports and the environment
variable ``FRUGALMAP_DISABLE_NUMBA`` is unset (or ``0``); every public
function also takes ``backend="numba" | "numpy"`` to force a path.

Tables are passed in a packed form: all factor tables concatenated into one
flat array (C order), plus CSR-style scope arrays holding variable ids and
C-order strides.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("FRUGALMAP_DISABLE_NUMBA", "0") in ("", "0")

# rows x |Omega(H)| cells evaluated per chunk in the numpy path
_NUMPY_CHUNK = 1 << 20

# Two log-scores closer than this are a tie; ties go to the lowest index.
# Exact ties in real arithmetic otherwise get split by summation order.
TIE_TOL = 1e-9


def first_max(scores, tol=TIE_TOL, axis=None, log=True):
    """Lowest index whose score is within ``tol`` (log scale) of the maximum."""
    scores = np.asarray(scores)
    if axis is None:
        scores = scores.ravel()
        axis = 0
    m = scores.max(axis=axis, keepdims=True)
    if log:
        cut = m - tol
    else:
        cut = m * np.exp(-tol)
    # rows whose maximum is zero / -inf: every entry ties
    return np.argmax(scores >= cut, axis=axis)


def _pick(backend):
    if backend is None:
        return "numba" if USE_NUMBA else "numpy"
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


@dataclass(frozen=True)
class Packed:
    """Factor tables flattened for the kernels."""

    values: np.ndarray   # float64, concatenated tables
    offsets: np.ndarray  # int64, start of each table in ``values``
    sptr: np.ndarray     # int64, scope k is svars[sptr[k]:sptr[k+1]]
    svars: np.ndarray    # int64, variable ids
    sstrides: np.ndarray  # int64, C-order stride of each scope variable

    @property
    def n_tables(self) -> int:
        return len(self.offsets)


def pack(scopes, tables, log=False) -> Packed:
    offsets, sptr, svars, strides, flat = [], [0], [], [], []
    pos = 0
    for scope, table in zip(scopes, tables):
        table = np.asarray(table, dtype=np.float64)
        offsets.append(pos)
        pos += table.size
        flat.append(table.ravel())
        st = 1
        local = []
        for c in reversed(table.shape):
            local.append(st)
            st *= c
        svars.extend(scope)
        strides.extend(reversed(local))
        sptr.append(len(svars))
    values = np.concatenate(flat) if flat else np.zeros(0)
    if log:
        with np.errstate(divide="ignore"):
            values = np.log(values)
    return Packed(
        values,
        np.asarray(offsets, dtype=np.int64),
        np.asarray(sptr, dtype=np.int64),
        np.asarray(svars, dtype=np.int64),
        np.asarray(strides, dtype=np.int64),
    )


# --------------------------------------------------------------------------
# argmax over Omega(H) with every other variable fixed
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _argmax_rows_nb(values, offsets, sptr, svars, sstrides, fids, rows, hvars, hcards, tol):
        n_rows = rows.shape[0]
        nh = hvars.shape[0]
        n_h = 1
        for k in range(nh):
            n_h *= hcards[k]
        out = np.empty(n_rows, dtype=np.int64)
        row = np.empty(rows.shape[1], dtype=np.int64)
        buf = np.empty(n_h)
        for r in range(n_rows):
            for j in range(rows.shape[1]):
                row[j] = rows[r, j]
            best_val = -np.inf
            for h in range(n_h):
                rem = h
                for k in range(nh - 1, -1, -1):
                    row[hvars[k]] = rem % hcards[k]
                    rem //= hcards[k]
                tot = 0.0
                for q in range(fids.shape[0]):
                    f = fids[q]
                    idx = 0
                    for p in range(sptr[f], sptr[f + 1]):
                        idx += row[svars[p]] * sstrides[p]
                    tot += values[offsets[f] + idx]
                buf[h] = tot
                if tot > best_val:
                    best_val = tot
            cut = best_val - tol
            best = 0
            for h in range(n_h):
                if buf[h] >= cut:
                    best = h
                    break
            out[r] = best
        return out


def _argmax_rows_np(values, offsets, sptr, svars, sstrides, fids, rows, hvars, hcards, tol):
    n_h = int(np.prod(hcards))
    grid = np.stack(np.unravel_index(np.arange(n_h), tuple(hcards)), axis=1) if len(hcards) else np.zeros((1, 0), np.int64)
    out = np.empty(rows.shape[0], dtype=np.int64)
    step = max(1, _NUMPY_CHUNK // max(n_h, 1))
    for start in range(0, rows.shape[0], step):
        block = rows[start:start + step]
        full = np.repeat(block, n_h, axis=0)
        full[:, hvars] = np.tile(grid, (block.shape[0], 1))
        tot = np.zeros(full.shape[0])
        for f in fids:
            sl = slice(sptr[f], sptr[f + 1])
            idx = full[:, svars[sl]] @ sstrides[sl]
            tot += values[offsets[f] + idx]
        out[start:start + step] = first_max(tot.reshape(block.shape[0], n_h), tol, axis=1)
    return out


def argmax_rows(packed: Packed, fids, rows, hvars, hcards, backend=None) -> np.ndarray:
    """Linear index (first H variable most significant) of the best h per row.

    ``packed`` must hold log-values; ``rows`` are full assignments whose H
    entries are ignored. Only tables listed in ``fids`` are scored, which
    is exact for the argmax as long as every table touching H is listed.
    Scores within ``TIE_TOL`` of the row maximum tie; ties go to the
    lowest index.
    """
    args = (
        packed.values, packed.offsets, packed.sptr, packed.svars, packed.sstrides,
        np.asarray(fids, dtype=np.int64),
        np.ascontiguousarray(rows, dtype=np.int64),
        np.asarray(hvars, dtype=np.int64),
        np.asarray(hcards, dtype=np.int64),
        float(TIE_TOL),
    )
    if _pick(backend) == "numba":
        return _argmax_rows_nb(*args)
    return _argmax_rows_np(*args)


# --------------------------------------------------------------------------
# brute-force joint by enumeration (chain rule)
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _enumerate_nb(values, offsets, sptr, svars, sstrides, base, free, fcards, retain, rcards):
        n_out = 1
        for k in range(retain.shape[0]):
            n_out *= rcards[k]
        out = np.zeros(n_out)
        total = 1
        for k in range(free.shape[0]):
            total *= fcards[k]
        row = base.copy()
        nf = free.shape[0]
        for k in range(nf):
            row[free[k]] = 0
        for _ in range(total):
            p = 1.0
            for f in range(offsets.shape[0]):
                idx = 0
                for q in range(sptr[f], sptr[f + 1]):
                    idx += row[svars[q]] * sstrides[q]
                p *= values[offsets[f] + idx]
            o = 0
            for k in range(retain.shape[0]):
                o = o * rcards[k] + row[retain[k]]
            out[o] += p
            # mixed-radix increment, last free variable fastest
            k = nf - 1
            while k >= 0:
                row[free[k]] += 1
                if row[free[k]] < fcards[k]:
                    break
                row[free[k]] = 0
                k -= 1
        return out


def _enumerate_np(values, offsets, sptr, svars, sstrides, base, free, fcards, retain, rcards):
    n_out = int(np.prod(rcards)) if len(rcards) else 1
    out = np.zeros(n_out)
    total = int(np.prod(fcards)) if len(fcards) else 1
    for start in range(0, total, _NUMPY_CHUNK):
        lin = np.arange(start, min(total, start + _NUMPY_CHUNK))
        rows = np.tile(base, (lin.size, 1))
        if len(free):
            rows[:, free] = np.stack(np.unravel_index(lin, tuple(fcards)), axis=1)
        p = np.ones(lin.size)
        for f in range(len(offsets)):
            sl = slice(sptr[f], sptr[f + 1])
            p *= values[offsets[f] + rows[:, svars[sl]] @ sstrides[sl]]
        if len(retain):
            o = np.ravel_multi_index(tuple(rows[:, retain].T), tuple(rcards))
        else:
            o = np.zeros(lin.size, dtype=np.int64)
        out += np.bincount(o, weights=p, minlength=n_out)
    return out


def enumerate_joint(packed: Packed, base, free, fcards, retain, rcards, backend=None) -> np.ndarray:
    """Sum of table products over every assignment of ``free``, binned by ``retain``.

    ``base`` fixes the non-free variables; ``retain`` must be a subset of
    ``free``. Result is flat in C order over ``retain``.
    """
    args = (
        packed.values, packed.offsets, packed.sptr, packed.svars, packed.sstrides,
        np.asarray(base, dtype=np.int64),
        np.asarray(free, dtype=np.int64),
        np.asarray(fcards, dtype=np.int64),
        np.asarray(retain, dtype=np.int64),
        np.asarray(rcards, dtype=np.int64),
    )
    if _pick(backend) == "numba":
        return _enumerate_nb(*args)
    return _enumerate_np(*args)


# --------------------------------------------------------------------------
# annealing sweep over one temperature level
# --------------------------------------------------------------------------
#
# The objective is memoised in a dense array over Omega(H) (NaN = unknown).
# A sweep runs until it finishes the level or meets an unscored candidate;
# the caller scores that candidate and resumes at the same step.
#
# state layout (int64): [step, cur, best, proposals, accepted, need]
# values layout (float64): [cur_val, best_val]


def _anneal_sweep_py(scores, state, values, ks, offs, us, temperature, strides, cards):
    step, cur, best, proposals, accepted = state[0], state[1], state[2], state[3], state[4]
    cur_val, best_val = values[0], values[1]
    state[5] = -1
    n = ks.shape[0]
    while step < n:
        k = ks[step]
        old = (cur // strides[k]) % cards[k]
        new = (old + offs[step]) % cards[k]
        cand = cur + (new - old) * strides[k]
        cand_val = scores[cand]
        if cand_val != cand_val:
            state[5] = cand
            break
        proposals += 1
        take = cand_val >= cur_val
        if not take and cand_val > -np.inf:
            take = us[step] < np.exp((cand_val - cur_val) / temperature)
        if take:
            cur, cur_val = cand, cand_val
            accepted += 1
            if cur_val > best_val:
                best, best_val = cur, cur_val
        step += 1
    state[0], state[1], state[2], state[3], state[4] = step, cur, best, proposals, accepted
    values[0], values[1] = cur_val, best_val


if HAVE_NUMBA:
    _anneal_sweep_nb = njit(cache=True, nogil=True)(_anneal_sweep_py)


def anneal_sweep(scores, state, values, ks, offs, us, temperature, strides, cards, backend=None):
    """Advance one temperature level in place; ``state[5]`` is the unscored candidate or -1."""
    fn = _anneal_sweep_nb if _pick(backend) == "numba" else _anneal_sweep_py
    fn(scores, state, values, ks, offs, us, float(temperature), strides, cards)


def warmup():
    """Compile the numba kernels on tiny inputs so timings exclude JIT cost."""
    if not USE_NUMBA:
        return
    p = pack([(0,), (0, 1)], [np.array([0.5, 0.5]), np.full((2, 2), 0.5)], log=True)
    argmax_rows(p, [0, 1], np.zeros((1, 2), np.int64), [0], [2])
    q = pack([(0,), (0, 1)], [np.array([0.5, 0.5]), np.full((2, 2), 0.5)])
    enumerate_joint(q, np.zeros(2, np.int64), [0, 1], [2, 2], [1], [2])
    anneal_sweep(np.zeros(2), np.zeros(6, np.int64), np.zeros(2), np.zeros(1, np.int64),
                 np.ones(1, np.int64), np.zeros(1), 1.0, np.ones(1, np.int64), np.full(1, 2, np.int64))
