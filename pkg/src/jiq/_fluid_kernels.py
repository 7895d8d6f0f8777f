"""Compiled inner loops for the fluid model.

All four equation families share one rate kernel. ``qv`` holds either the
exact I-queue length fractions q_i or, when ``tail`` is set, the tail
fractions q_hat_i. Entries past the truncation read as zero.
"""

import numpy as np
from numba import njit

# Entries below this are flushed to zero after each step to keep the loop
# out of subnormal arithmetic.
UNDERFLOW = 1e-300


@njit(cache=True)
def rates(qv, s, sn, lam, r, z, lcfs, d, tail, dq, ds, dsn):
    imax = qv.shape[0] - 1
    cmax = sn.shape[0] - 1

    # flux of unenqueued servers that join an I-queue on their next completion
    join_flux = 0.0
    for k in range(1, min(z + 1, cmax) + 1):
        join_flux += sn[k]

    # where a joining server lands (FCFS position j = current length + 1)
    land = np.zeros(imax + 1)
    if tail:
        q0 = 1.0 - qv[1] if imax >= 1 else 0.0
        for j in range(1, imax + 1):
            hi = qv[j - 1] ** d
            lo = qv[j] ** d if j < imax else 0.0
            land[j] = hi - lo
    else:
        q0 = qv[0]
        for j in range(1, imax + 1):
            land[j] = qv[j - 1]

    zero_row = np.zeros(imax + 1)
    a = lam * q0       # random-arrival rate seen by each server
    b = lam * r        # arrival rate per I-queue
    rj = r * join_flux  # join rate per I-queue

    if tail:
        dq[0] = 0.0
        for i in range(1, imax + 1):
            nxt = qv[i + 1] if i < imax else 0.0
            dq[i] = -b * (qv[i] - nxt) + r * (qv[i - 1] ** d - qv[i] ** d) * join_flux
    else:
        if imax >= 1:
            dq[0] = b * qv[1] - r * qv[0] * join_flux
        else:
            dq[0] = 0.0
        for i in range(1, imax + 1):
            nxt = qv[i + 1] if i < imax else 0.0
            dq[i] = b * (nxt - qv[i]) - r * (qv[i] - qv[i - 1]) * join_flux

    for i in range(cmax + 1):
        row = s[i]
        out = ds[i]
        has_up = i < cmax
        up = s[i + 1] if has_up else zero_row
        dn = s[i - 1] if i >= 1 else zero_row
        # completion outflow only for busy servers
        leave = a + b + (1.0 if i >= 1 else 0.0)
        joiners = sn[i + 1] if (i <= z and has_up) else 0.0
        if lcfs:
            leave += rj
            # joiners enter at the front; everyone else is pushed one slot back
            out[1] = up[1] + a * dn[1] - leave * row[1] + joiners
            if imax >= 2:
                out[1] += b * row[2]
            for j in range(2, imax):
                out[j] = up[j] + a * dn[j] - leave * row[j] + b * row[j + 1] + rj * row[j - 1]
            if imax >= 2:
                out[imax] = up[imax] + a * dn[imax] - leave * row[imax] + rj * row[imax - 1]
        else:
            for j in range(1, imax):
                out[j] = up[j] + a * dn[j] - leave * row[j] + b * row[j + 1] + joiners * land[j]
            out[imax] = up[imax] + a * dn[imax] - leave * row[imax] + joiners * land[imax]
        out[0] = 0.0

    dsn[0] = 0.0
    for i in range(1, cmax + 1):
        acc = -(1.0 + a) * sn[i] + b * s[i - 1, 1]
        if i >= z + 1 and i < cmax:
            acc += sn[i + 1]
        if i >= 2:
            acc += a * sn[i - 1]
        dsn[i] = acc


@njit(cache=True)
def _advance(x, dx, h):
    """x += h*dx in place with clamping; returns (clamped mass, finite flag)."""
    clamped = 0.0
    total = 0.0
    xf = x.ravel()
    df = dx.ravel()
    for k in range(xf.size):
        v = xf[k] + h * df[k]
        if v < UNDERFLOW:
            if v < 0.0:
                clamped -= v
            v = 0.0
        xf[k] = v
        total += v
    return clamped, np.isfinite(total)


@njit(cache=True)
def advance(qv, s, sn, dq, ds, dsn, h, tail):
    c1, f1 = _advance(qv, dq, h)
    c2, f2 = _advance(s, ds, h)
    c3, f3 = _advance(sn, dsn, h)
    if tail:
        qv[0] = 1.0
    return c1 + c2 + c3, f1 and f2 and f3


@njit(cache=True)
def observe(qv, s, sn, lam, r, tail, out):
    """Write (q0, mean_load, mean_time, resid_q, resid_s, resid_link) into out."""
    imax = qv.shape[0] - 1
    cmax = sn.shape[0] - 1
    qsum = 0.0
    qlen = 0.0
    for i in range(imax + 1):
        if tail:
            qi = qv[i] - (qv[i + 1] if i < imax else 0.0)
        else:
            qi = qv[i]
        qsum += qi
        qlen += i * qi
    ssum = 0.0
    enq = 0.0
    load = 0.0
    for i in range(cmax + 1):
        row = 0.0
        for j in range(1, imax + 1):
            row += s[i, j]
        enq += row
        ssum += row + sn[i]
        load += i * (row + sn[i])
    q0 = 1.0 - qv[1] if tail else qv[0]
    out[0] = q0
    out[1] = load
    out[2] = load / lam
    out[3] = abs(qsum - 1.0)
    out[4] = abs(ssum - 1.0)
    out[5] = abs(qlen - r * enq)


@njit(cache=True)
def integrate(qv, s, sn, lam, r, z, lcfs, d, tail, h, nsteps, every, record):
    """Forward Euler for nsteps; returns (steps done, clamped mass, failed step).

    Every ``every`` steps (and at step 0) one row of ``observe`` output goes
    into ``record``. ``failed step`` is -1 unless a non-finite value showed up.
    """
    dq = np.zeros_like(qv)
    ds = np.zeros_like(s)
    dsn = np.zeros_like(sn)
    clamped = 0.0
    row = 0
    if record.shape[0] > 0:
        observe(qv, s, sn, lam, r, tail, record[0, 1:])
        record[0, 0] = 0.0
        row = 1
    for step in range(nsteps):
        rates(qv, s, sn, lam, r, z, lcfs, d, tail, dq, ds, dsn)
        c, ok = advance(qv, s, sn, dq, ds, dsn, h, tail)
        clamped += c
        if not ok:
            return step, clamped, step
        if every > 0 and (step + 1) % every == 0 and row < record.shape[0]:
            record[row, 0] = (step + 1) * h
            observe(qv, s, sn, lam, r, tail, record[row, 1:])
            row += 1
    return nsteps, clamped, -1
