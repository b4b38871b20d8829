"""Compiled sliding-window kernels over a frequency grid.

All kernels take the DFT transposed, ``XT[k, m] = xi_m(k/N)`` (C-contiguous
``(N, M)``), a span ``B`` and a strictly increasing array of grid indices.
``S`` below is the *unnormalized* window sum ``sum_b xi xi^*``; the coherence
matrix does not depend on the ``1/(B+1)`` factor.

Status codes returned per frame: 0 ok, 1 degenerate diagonal, 2 coherence
matrix not positive definite (only checked where a Cholesky is needed).
"""

import numpy as np
from numba import njit

DIAG_FLOOR = 1e-14

OK = 0
DEGENERATE = 1
NOT_PD = 2


@njit(cache=True)
def _window_sum(XT, center, h, S):
    N, M = XT.shape
    S[:, :] = 0.0
    for b in range(-h, h + 1):
        x = XT[(center + b) % N]
        for i in range(M):
            a = x[i]
            for j in range(i, M):
                S[i, j] += a * np.conj(x[j])


@njit(cache=True)
def _step(XT, S, prev, cur, h):
    """Slide the window from centre ``prev`` to ``cur`` one column at a time."""
    N, M = XT.shape
    for t in range(prev + 1, cur + 1):
        xa = XT[(t + h) % N]
        xr = XT[(t - h - 1) % N]
        for i in range(M):
            a = xa[i]
            r = xr[i]
            for j in range(i, M):
                S[i, j] += a * np.conj(xa[j]) - r * np.conj(xr[j])


@njit(cache=True)
def _add_range(XT, S, lo, hi, h):
    N, M = XT.shape
    for t in range(lo + 1, hi + 1):
        x = XT[(t + h) % N]
        for i in range(M):
            a = x[i]
            for j in range(i, M):
                S[i, j] += a * np.conj(x[j])


@njit(cache=True)
def _remove_range(XT, S, lo, hi, h):
    N, M = XT.shape
    for t in range(lo + 1, hi + 1):
        x = XT[(t - h - 1) % N]
        for i in range(M):
            a = x[i]
            for j in range(i, M):
                S[i, j] -= a * np.conj(x[j])


@njit(cache=True)
def _move(XT, S, prev, cur, h, since, refresh):
    """Bring ``S`` from centre ``prev`` to ``cur``; returns updated step count."""
    delta = cur - prev
    if delta > 2 * h or since + delta >= refresh:
        _window_sum(XT, cur, h, S)
        return 0
    _step(XT, S, prev, cur, h)
    return since + delta


@njit(cache=True)
def _diag(S, d):
    M = S.shape[0]
    total = 0.0
    for i in range(M):
        d[i] = S[i, i].real
        total += d[i]
    floor = DIAG_FLOOR * total / M
    for i in range(M):
        if not d[i] > floor:
            return False
    return True


@njit(cache=True)
def _coherence(S, d, C):
    M = S.shape[0]
    for i in range(M):
        C[i, i] = 1.0
        si = 1.0 / np.sqrt(d[i])
        for j in range(i + 1, M):
            c = S[i, j] * si / np.sqrt(d[j])
            C[i, j] = c
            C[j, i] = np.conj(c)


@njit(cache=True)
def sliding_frames(XT, B, idx, refresh):
    """Smoothed periodogram ``S/(B+1)`` at every grid index, full Hermitian."""
    N, M = XT.shape
    h = B // 2
    n = idx.size
    out = np.empty((n, M, M), dtype=np.complex128)
    S = np.zeros((M, M), dtype=np.complex128)
    since = 0
    scale = 1.0 / (B + 1)
    for f in range(n):
        if f == 0:
            _window_sum(XT, idx[0], h, S)
        else:
            since = _move(XT, S, idx[f - 1], idx[f], h, since, refresh)
        for i in range(M):
            out[f, i, i] = S[i, i].real * scale
            for j in range(i + 1, M):
                v = S[i, j] * scale
                out[f, i, j] = v
                out[f, j, i] = np.conj(v)
    return out


@njit(cache=True)
def frame_eigenvalues(XT, B, idx, refresh, kmax):
    """Top ``kmax`` coherence eigenvalues per grid index, descending."""
    N, M = XT.shape
    h = B // 2
    n = idx.size
    out = np.zeros((n, kmax))
    status = np.zeros(n, dtype=np.int8)
    S = np.zeros((M, M), dtype=np.complex128)
    C = np.empty((M, M), dtype=np.complex128)
    d = np.empty(M)
    since = 0
    for f in range(n):
        if f == 0:
            _window_sum(XT, idx[0], h, S)
        else:
            since = _move(XT, S, idx[f - 1], idx[f], h, since, refresh)
        if not _diag(S, d):
            status[f] = DEGENERATE
            continue
        _coherence(S, d, C)
        w = np.linalg.eigvalsh(C)
        for k in range(kmax):
            out[f, k] = w[M - 1 - k]
    return out, status


@njit(cache=True)
def frame_statistics(XT, B, idx, refresh, want_logdet, power_iters):
    """Eigensolve-free per-frame quantities of the coherence matrix.

    Returns ``(proxy, frob, logdet, mcc, status)`` where ``proxy`` is a
    warm-started power-iteration Rayleigh quotient (a lower bound on the largest
    eigenvalue), ``frob = ||C - I||_F^2 / M``, ``logdet = log det C / M`` and
    ``mcc`` is the largest off-diagonal modulus.
    """
    N, M = XT.shape
    h = B // 2
    n = idx.size
    proxy = np.zeros(n)
    frob = np.zeros(n)
    logdet = np.zeros(n)
    mcc = np.zeros(n)
    status = np.zeros(n, dtype=np.int8)
    S = np.zeros((M, M), dtype=np.complex128)
    C = np.empty((M, M), dtype=np.complex128)
    d = np.empty(M)
    v = np.ones(M, dtype=np.complex128) / np.sqrt(M)
    since = 0
    for f in range(n):
        if f == 0:
            _window_sum(XT, idx[0], h, S)
        else:
            since = _move(XT, S, idx[f - 1], idx[f], h, since, refresh)
        if not _diag(S, d):
            status[f] = DEGENERATE
            continue
        _coherence(S, d, C)
        fro = 0.0
        big = 0.0
        for i in range(M):
            for j in range(i + 1, M):
                c = C[i, j]
                a = c.real * c.real + c.imag * c.imag
                fro += a
                if a > big:
                    big = a
        frob[f] = 2.0 * fro / M
        mcc[f] = np.sqrt(big)
        best = 0.0
        for _ in range(power_iters):
            w = np.dot(C, v)
            rq = np.vdot(v, w).real
            if rq > best:
                best = rq
            nw = np.linalg.norm(w)
            if nw > 0.0:
                v = w / nw
        proxy[f] = best
        if want_logdet:
            ok = True
            try:
                R = np.linalg.cholesky(C)
            except Exception:
                ok = False
            if ok:
                acc = 0.0
                for i in range(M):
                    acc += np.log(R[i, i].real)
                logdet[f] = 2.0 * acc / M
            else:
                status[f] = NOT_PD
    return proxy, frob, logdet, mcc, status


@njit(cache=True)
def _dominated(T):
    try:
        np.linalg.cholesky(T)
    except Exception:
        return False
    return True


@njit(cache=True)
def _fill_test(S, d, L, T):
    """``T = L * diag(d) - S`` as a full Hermitian matrix."""
    M = S.shape[0]
    for i in range(M):
        T[i, i] = L * d[i] - S[i, i].real
        for j in range(i + 1, M):
            T[i, j] = -S[i, j]
            T[j, i] = -np.conj(S[i, j])


@njit(cache=True)
def certify_max_eigenvalue(XT, B, idx, refresh, L, block):
    """Exact ``max_f lambda_1(C_f)`` given a lower bound ``L`` on it.

    A frame (or a run of ``block`` consecutive frames) is skipped when a
    Cholesky factorization shows ``L * D_f - S_f`` is positive definite, which
    certifies ``lambda_1(C_f) < L``. For a run, ``S_f`` is dominated by ``S``
    at the first frame plus every column entering during the run, and ``D_f``
    dominates the entrywise minimum of the run's diagonals. Frames that fail
    the test get a full eigensolve and may raise ``L``.

    Returns ``(L, n_exact, arg)`` where ``arg`` is the grid position that set
    ``L`` (``-1`` if the supplied bound was never exceeded).
    """
    N, M = XT.shape
    h = B // 2
    n = idx.size
    S = np.zeros((M, M), dtype=np.complex128)
    U = np.empty((M, M), dtype=np.complex128)
    T = np.empty((M, M), dtype=np.complex128)
    C = np.empty((M, M), dtype=np.complex128)
    d = np.empty(M)
    dcur = np.empty(M)
    dmin = np.empty(M)
    n_exact = 0
    arg = -1
    since = 0
    _window_sum(XT, idx[0], h, S)
    f = 0
    while f < n:
        g = min(f + block, n)
        if g - f > 1 and idx[g - 1] - idx[f] <= 2 * h:
            # diagonal minimum over the run and the dominating matrix U
            for i in range(M):
                dcur[i] = S[i, i].real
                dmin[i] = dcur[i]
                for j in range(i, M):
                    U[i, j] = S[i, j]
            for t in range(idx[f] + 1, idx[g - 1] + 1):
                xa = XT[(t + h) % N]
                xr = XT[(t - h - 1) % N]
                for i in range(M):
                    a = xa[i]
                    r = xr[i]
                    dcur[i] += (a.real * a.real + a.imag * a.imag) - (
                        r.real * r.real + r.imag * r.imag
                    )
                    for j in range(i, M):
                        U[i, j] += a * np.conj(xa[j])
                # a diagonal only counts at grid positions
                on_grid = False
                for q in range(f + 1, g):
                    if idx[q] == t:
                        on_grid = True
                        break
                if on_grid:
                    for i in range(M):
                        if dcur[i] < dmin[i]:
                            dmin[i] = dcur[i]
            _fill_test(U, dmin, L, T)
            if _dominated(T):
                if g < n:
                    delta = idx[g] - idx[f]
                    if delta > 2 * h or since + delta >= refresh:
                        _window_sum(XT, idx[g], h, S)
                        since = 0
                    else:
                        # U already holds every column entering up to idx[g-1]
                        S[:, :] = U
                        _add_range(XT, S, idx[g - 1], idx[g], h)
                        _remove_range(XT, S, idx[f], idx[g], h)
                        since += delta
                f = g
                continue
        for t in range(f, g):
            if not _diag(S, d):
                return np.nan, n_exact, t
            _fill_test(S, d, L, T)
            if not _dominated(T):
                _coherence(S, d, C)
                w = np.linalg.eigvalsh(C)
                n_exact += 1
                if w[M - 1] > L:
                    L = w[M - 1]
                    arg = t
            if t + 1 < n:
                since = _move(XT, S, idx[t], idx[t + 1], h, since, refresh)
        f = g
    return L, n_exact, arg
