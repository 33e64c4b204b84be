"""Compiled inner loops for Monte Carlo runs.

The detectors in :mod:`slopecpd.detectors` are the reference implementation.  The
loops here reproduce them on blocks of standardized residuals at a much higher
rate: every step the per-candidate profile is first evaluated with a
vectorizable polynomial ``exp`` and one ``log`` per chunk of sensors.  Whenever
that fast value comes within ``margin`` of the level that matters (the stopping
threshold, or the running maximum when a ladder is recorded) the step is
recomputed with ``math.exp``/``math.log1p`` in the same form as
:func:`slopecpd.local_stats.mixture_log`, and only the exact value is used for
decisions.  The weighted-sum recursion itself is done without fast-math, so
``W`` is bit-identical to :class:`slopecpd.local_stats.WindowState`.

A ladder is the list of ``(t, value, k_hat)`` at every new running maximum of
the exact statistic.  The first alarm time of any threshold ``b`` below the
largest recorded value is the first ladder time with ``value >= b``.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

KIND_CODES = {"glr": 0, "meanshift": 1, "adaptive": 2, "cusum": 3, "multichart": 4}

GLR, MEANSHIFT, ADAPTIVE, CUSUM, MULTICHART = range(5)

# return codes of run_block
CONTINUE, ALARM, LADDER_FULL = 0, 1, 2

# exp(-q) is evaluated as (Taylor_7(-q / 2048))**2048; q is clipped to QCAP_MAX
_SQUARINGS_SCALE = 1.0 / 2048.0
QCAP_MAX = 80.0


@nb.njit(cache=True, fastmath=True, inline="always")
def _exp_neg(q):
    x = -q * _SQUARINGS_SCALE
    p = 1.0 + x * (1.0 + x * (0.5 + x * (1.0 / 6.0 + x * (1.0 / 24.0 + x * (
        1.0 / 120.0 + x * (1.0 / 720.0 + x * (1.0 / 5040.0)))))))
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    return p


@nb.njit(cache=True, inline="always")
def _mix_exact(q, p, logp, log1mp):
    # log(1 - p + p e^q); same branches as local_stats.mixture_log
    if q > 500.0:
        return q + math.log(p + (1.0 - p) * math.exp(-q))
    shift = p * math.expm1(q)
    if shift > -0.5:
        return math.log1p(shift)
    a = log1mp
    b = logp + q
    if a == -math.inf:
        return b
    hi = max(a, b)
    return hi + math.log1p(math.exp(-abs(a - b)))


@nb.njit(cache=True, fastmath=True)
def _fast_mix_sq(V, scale, p, omp, chunk, qcap):
    # sum_n log(1 - p_n + p_n exp(q_n)), q_n = V_n^2 * scale >= 0
    n_tot = V.size
    acc = 0.0
    for c0 in range(0, n_tot, chunk):
        c1 = min(c0 + chunk, n_tot)
        pr = 1.0
        for n in range(c0, c1):
            q = V[n] * V[n] * scale
            acc += q
            pr *= p[n] + omp[n] * _exp_neg(min(q, qcap))
        acc += math.log(pr)
    return acc


@nb.njit(cache=True, fastmath=True)
def _fast_mix_ell(Wj, rates, hr2, a, p, omp, chunk, qcap):
    # sum_n log(1 - p_n + p_n exp(l_n)) for l_n of either sign
    n_tot = Wj.size
    acc = 0.0
    for c0 in range(0, n_tot, chunk):
        c1 = min(c0 + chunk, n_tot)
        pr = 1.0
        for n in range(c0, c1):
            ell = rates[n] * Wj[n] - hr2[n] * a
            e = _exp_neg(min(abs(ell), qcap))
            acc += max(ell, 0.0)
            pr *= (p[n] + omp[n] * e) if ell > 0.0 else (omp[n] + p[n] * e)
        acc += math.log(pr)
    return acc


@nb.njit(cache=True, fastmath=True)
def _fast_sq_one(V, scale, p, omp, qcap):
    # single product; used when all N factors fit without underflow
    acc = 0.0
    pr = 1.0
    for n in range(V.size):
        q = V[n] * V[n] * scale
        acc += q
        pr *= p[n] + omp[n] * _exp_neg(min(q, qcap))
    return acc + math.log(pr)


@nb.njit(cache=True, fastmath=True)
def _fast_ell_one(Wj, rates, hr2, a, p, omp, qcap):
    acc = 0.0
    pr = 1.0
    for n in range(Wj.size):
        ell = rates[n] * Wj[n] - hr2[n] * a
        e = _exp_neg(min(abs(ell), qcap))
        acc += max(ell, 0.0)
        pr *= (p[n] + omp[n] * e) if ell > 0.0 else (omp[n] + p[n] * e)
    return acc + math.log(pr)


@nb.njit(cache=True)
def _fast_max(kind, W, S, t, w, first, m, a_table, inv2a, inv2tau, p, omp, rates, hr2, qcap, chunk, prof):
    """Largest fast-path profile value; branches sit outside the candidate loop
    so the per-sensor loops stay vectorized.  ``prof`` (length >= m) receives
    every value."""
    single = chunk >= W.shape[1]
    if kind == MEANSHIFT:
        if single:
            for i in range(m):
                k = first + i
                prof[i] = _fast_sq_one(S[k % w], inv2tau[t - k], p, omp, qcap)
        else:
            for i in range(m):
                k = first + i
                prof[i] = _fast_mix_sq(S[k % w], inv2tau[t - k], p, omp, chunk, qcap)
    elif kind == CUSUM:
        if single:
            for i in range(m):
                k = first + i
                prof[i] = _fast_ell_one(W[k % w], rates, hr2, a_table[t - k], p, omp, qcap)
        else:
            for i in range(m):
                k = first + i
                prof[i] = _fast_mix_ell(W[k % w], rates, hr2, a_table[t - k], p, omp, chunk, qcap)
    else:
        if single:
            for i in range(m):
                k = first + i
                prof[i] = _fast_sq_one(W[k % w], inv2a[t - k], p, omp, qcap)
        else:
            for i in range(m):
                k = first + i
                prof[i] = _fast_mix_sq(W[k % w], inv2a[t - k], p, omp, chunk, qcap)
    best = -math.inf
    for i in range(m):
        if prof[i] > best:
            best = prof[i]
    return best


@nb.njit(cache=True)
def _update(W, S, kslot, t, z, track_w, track_s):
    # W_{k,t} = W_{k,t-1} + (t - k) z_t for every live candidate; no fast-math
    w = kslot.size
    n_tot = z.size
    for j in range(w):
        k = kslot[j]
        if k < 0:
            continue
        if track_w:
            tau = float(t - k)
            for n in range(n_tot):
                W[j, n] = W[j, n] + tau * z[n]
        if track_s:
            for n in range(n_tot):
                S[j, n] = S[j, n] + z[n]


@nb.njit(cache=True)
def _exact_value(kind, j, tau, W, S, sqrt_a, a_table, p, logp, log1mp, rates):
    n_tot = W.shape[1]
    acc = 0.0
    if kind == GLR or kind == ADAPTIVE:
        d = sqrt_a[tau]
        for n in range(n_tot):
            u = W[j, n] / d
            acc += _mix_exact(0.5 * u * u, p[n], logp[n], log1mp[n])
    elif kind == MEANSHIFT:
        d = math.sqrt(float(tau))
        for n in range(n_tot):
            u = S[j, n] / d
            acc += _mix_exact(0.5 * u * u, p[n], logp[n], log1mp[n])
    else:
        a = a_table[tau]
        for n in range(n_tot):
            r = rates[n]
            ell = r * W[j, n] - 0.5 * r * r * a
            acc += _mix_exact(ell, p[n], logp[n], log1mp[n])
    return acc


@nb.njit(cache=True)
def _multichart(t, W, kslot, a_table, rates, thresholds, equal_h, per_sensor):
    """Per-sensor max over k of the slope CUSUM; returns (statistic, n_star)."""
    w = kslot.size
    n_tot = W.shape[1]
    for n in range(n_tot):
        per_sensor[n] = -math.inf
    for j in range(w):
        k = kslot[j]
        if k < 0:
            continue
        a = a_table[t - k]
        for n in range(n_tot):
            r = rates[n]
            ell = r * W[j, n] - 0.5 * r * r * a
            if ell > per_sensor[n]:
                per_sensor[n] = ell
    best = -math.inf
    n_star = 0
    for n in range(n_tot):
        v = per_sensor[n] if equal_h else per_sensor[n] - thresholds[n]
        if v > best:
            best = v
            n_star = n
    return best, n_star


@nb.njit(cache=True)
def run_block(kind, Z, W, S, kslot, a_table, sqrt_a, inv2a, inv2tau,
              p, omp, logp, log1mp, adapt, rates, hr2, thresholds, equal_h,
              b_stop, margin, fast_ok, qcap, chunk,
              ladder_on, lad_t, lad_v, lad_k, st, fst, out, per_sensor, prof):
    """Consume rows of ``Z`` until an alarm, a full ladder or the end of the block.

    ``st = [t, n_ladder]`` and ``fst = [ladder_max, last_statistic]`` carry the
    scalar state between calls.  On return ``out = [rows_consumed, k_hat]``.
    """
    w = kslot.size
    n_tot = Z.shape[1]
    track_w = kind != MEANSHIFT
    track_s = kind == MEANSHIFT
    for r in range(Z.shape[0]):
        t = st[0]
        slot = t % w
        kslot[slot] = t
        for n in range(n_tot):
            if track_w:
                W[slot, n] = 0.0
            if track_s:
                S[slot, n] = 0.0
        t += 1
        st[0] = t
        _update(W, S, kslot, t, Z[r], track_w, track_s)
        m = min(t, w)
        first = t - m
        out[0] = r + 1

        if kind == MULTICHART:
            best, n_star = _multichart(t, W, kslot, a_table, rates, thresholds, equal_h, per_sensor)
            fst[1] = best
            hit = best >= b_stop
            record = ladder_on and best > fst[0]
            if hit or record:
                # earliest k maximizing the winning sensor's CUSUM
                kbest = first
                vbest = -math.inf
                rr = rates[n_star]
                for i in range(m):
                    k = first + i
                    ell = rr * W[k % w, n_star] - 0.5 * rr * rr * a_table[t - k]
                    if ell > vbest:
                        vbest = ell
                        kbest = k
                if record:
                    nl = st[1]
                    lad_t[nl] = t
                    lad_v[nl] = best
                    lad_k[nl] = kbest
                    st[1] = nl + 1
                    fst[0] = best
                out[1] = kbest
                if hit:
                    return ALARM
                if st[1] == lad_t.size:
                    return LADDER_FULL
            continue

        if kind == ADAPTIVE:
            # s_n = 1{max_k U_{n,k,t} > a}, rho_n = (s_n + alpha) / (alpha + beta + 1)
            for n in range(n_tot):
                per_sensor[n] = -math.inf
            for i in range(m):
                k = first + i
                d = sqrt_a[t - k]
                j = k % w
                for n in range(n_tot):
                    u = W[j, n] / d
                    if u > per_sensor[n]:
                        per_sensor[n] = u
            for n in range(n_tot):
                s = 1.0 if per_sensor[n] > adapt[2] else 0.0
                rho = (s + adapt[0]) / (adapt[0] + adapt[1] + 1.0)
                p[n] = rho
                omp[n] = 1.0 - rho
                logp[n] = math.log(rho)
                log1mp[n] = math.log1p(-rho)

        level = b_stop
        if ladder_on and fst[0] < level:
            level = fst[0]
        exact = True
        if fast_ok:
            fmax = _fast_max(kind, W, S, t, w, first, m, a_table, inv2a, inv2tau, p, omp, rates, hr2,
                             qcap, chunk, prof)
            fst[1] = fmax
            exact = fmax >= level - margin
        if not exact:
            continue

        best = -math.inf
        kbest = first
        for i in range(m):
            k = first + i
            v = _exact_value(kind, k % w, t - k, W, S, sqrt_a, a_table, p, logp, log1mp, rates)
            if v > best:
                best = v
                kbest = k
        fst[1] = best
        out[1] = kbest
        if ladder_on and best > fst[0]:
            nl = st[1]
            lad_t[nl] = t
            lad_v[nl] = best
            lad_k[nl] = kbest
            st[1] = nl + 1
            fst[0] = best
        if best >= b_stop:
            return ALARM
        if ladder_on and st[1] == lad_t.size:
            return LADDER_FULL
    return CONTINUE


@nb.njit(cache=True)
def fast_profile(kind, W, S, kslot, t, a_table, inv2a, inv2tau, p, omp, rates, hr2, qcap, chunk):
    """Fast-path profile over retained candidates in increasing ``k`` (testing aid)."""
    w = kslot.size
    m = min(t, w)
    prof = np.empty(m)
    _fast_max(kind, W, S, t, w, t - m, m, a_table, inv2a, inv2tau, p, omp, rates, hr2, qcap, chunk, prof)
    return prof


def fast_path_settings(kind: int, p0_floor: float, omp_floor: float) -> tuple[bool, float, int]:
    """Whether the polynomial path is safe, its clip level for ``q`` and chunk size.

    ``p0_floor`` and ``omp_floor`` bound the mixing weights from below (``omp`` is
    ``1 - p``; it only matters for the CUSUM profile, where ``l`` can be negative).
    Clipping ``q`` at ``qcap`` perturbs each factor by at most ``e^-40`` relative;
    chunks are short enough that a product of factors cannot underflow.
    """
    floor = p0_floor if kind != CUSUM else min(p0_floor, omp_floor)
    if floor <= 0.0:
        return False, QCAP_MAX, 1
    qcap = 40.0 - math.log(floor)
    if qcap > QCAP_MAX:
        return False, QCAP_MAX, 1
    chunk = int(max(1, min(512, 600.0 / max(-math.log(floor), 1e-3))))
    return True, qcap, chunk
