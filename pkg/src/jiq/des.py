"""Discrete-event simulation of a finite JIQ system and the supermarket baseline.

The event loop and every state transition are compiled with numba. State is
held in flat arrays (see ``SimState``) so the same compiled transitions serve
the event loop and direct calls from Python.

Event calendar: events are ordered by (time, insertion sequence). Arrivals
form one global Poisson stream of rate n * lam whose dispatcher is drawn
uniformly, which is the same as m independent streams of rate n * lam / m.
Only one arrival is ever pending, so it sits in a dedicated slot; service
completions (one pending per busy server) live in a binary heap. Both share
the sequence counter, so ties still resolve in insertion order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .model import AssignmentPolicy, ConfigError, IQueueDiscipline, SystemConfig, validate_config

# job assignment tags
FROM_IQUEUE = 0
RANDOM_FALLBACK = 1
SUPERMARKET_CHOICE = 2
TAG_NAMES = ("iqueue", "random", "supermarket")

# columns of SimState.srv
JOBS, ENQ, NXT, PRV, RHEAD = range(5)
# columns of SimState.dsp
HEAD, TAIL, QLEN, ARRIVED = range(4)
# ictr slots
HSIZE, SEQ, ARRIVALS, COMPLETIONS, RECLEN, ARR_SEQ, ARR_DISP = range(7)
# fctr slots
CLOCK, WSTART, WEND, WCOUNT, WMEAN, WM2, WRANDOM, ARR_TIME = range(8)
# par slots
P_POLICY, P_LCFS, P_Z, P_D, P_RECORD = range(5)
POLICY_CODES = {AssignmentPolicy.JIQ_RANDOM: 0, AssignmentPolicy.JIQ_SQD: 1, AssignmentPolicy.SUPERMARKET: 2}

# kernel exit codes
DONE, GROW_RING, GROW_RECORDS = range(3)


class SimulationError(RuntimeError):
    pass


class EmptyWindowError(SimulationError):
    """No job completed inside the measurement window."""


# ---------------------------------------------------------------------------
# compiled transitions


@njit(cache=True, inline="always")
def _push_event(heap, size, t, seq, key):
    """Insert (t, seq, key) into a heap currently holding ``size`` entries."""
    if size >= heap.shape[0]:
        raise RuntimeError("event calendar overflow")
    i = size
    while i > 0:
        p = (i - 1) >> 1
        tp = heap[p, 0]
        if tp < t or (tp == t and heap[p, 1] < seq):
            break
        heap[i, 0] = tp
        heap[i, 1] = heap[p, 1]
        heap[i, 2] = heap[p, 2]
        i = p
    heap[i, 0] = t
    heap[i, 1] = seq
    heap[i, 2] = key


@njit(cache=True, inline="always")
def _pop_event(heap, size):
    """Remove the earliest of ``size`` entries; returns (time, key)."""
    t0 = heap[0, 0]
    k0 = int(heap[0, 2])
    size -= 1
    if size > 0:
        # walk the hole down the smaller-child path to a leaf (one branchless
        # comparison per level), then sift the last entry up from there
        i = 0
        while True:
            c = 2 * i + 1
            if c + 1 < size:
                a = heap[c, 0]
                b = heap[c + 1, 0]
                c += (b < a) | ((b == a) & (heap[c + 1, 1] < heap[c, 1]))
            elif c >= size:
                break
            heap[i, 0] = heap[c, 0]
            heap[i, 1] = heap[c, 1]
            heap[i, 2] = heap[c, 2]
            i = c
        t = heap[size, 0]
        s = heap[size, 1]
        k = heap[size, 2]
        while i > 0:
            p = (i - 1) >> 1
            tp = heap[p, 0]
            if tp < t or (tp == t and heap[p, 1] < s):
                break
            heap[i, 0] = tp
            heap[i, 1] = heap[p, 1]
            heap[i, 2] = heap[p, 2]
            i = p
        heap[i, 0] = t
        heap[i, 1] = s
        heap[i, 2] = k
    return t0, k0


@njit(cache=True, inline="always")
def _uniform_int(rng, n):
    """Uniform integer in [0, n); bias is below n / 2**53."""
    k = int(rng.random() * n)
    return k if k < n else n - 1


@njit(cache=True, inline="always")
def _join_iqueue(srv, dsp, server, k):
    """Append ``server`` to the back of dispatcher k's I-queue."""
    if srv[server, ENQ] >= 0:
        raise RuntimeError("server is already on an I-queue")
    last = dsp[k, TAIL]
    srv[server, ENQ] = k
    srv[server, NXT] = -1
    srv[server, PRV] = last
    if last >= 0:
        srv[last, NXT] = server
    else:
        dsp[k, HEAD] = server
    dsp[k, TAIL] = server
    dsp[k, QLEN] += 1


@njit(cache=True, inline="always")
def _pop_server(srv, dsp, k, lcfs):
    """Remove and return the earliest (FCFS) or latest (LCFS) joined server."""
    if dsp[k, QLEN] == 0:
        raise RuntimeError("pop from an empty I-queue")
    if lcfs:
        server = dsp[k, TAIL]
        prev = srv[server, PRV]
        dsp[k, TAIL] = prev
        if prev >= 0:
            srv[prev, NXT] = -1
        else:
            dsp[k, HEAD] = -1
    else:
        server = dsp[k, HEAD]
        nxt = srv[server, NXT]
        dsp[k, HEAD] = nxt
        if nxt >= 0:
            srv[nxt, PRV] = -1
        else:
            dsp[k, TAIL] = -1
    dsp[k, QLEN] -= 1
    srv[server, ENQ] = -1
    srv[server, NXT] = -1
    srv[server, PRV] = -1
    return server


@njit(cache=True, inline="always")
def _select_iqueue(dsp, policy, d, rng, work):
    m = dsp.shape[0]
    if policy == 0 or d == 1:
        return _uniform_int(rng, m)
    # work[:d] holds the probes, work[d:] the distinct minimal ones
    best = -1
    for t in range(d):
        k = _uniform_int(rng, m)
        work[t] = k
        if best < 0 or dsp[k, QLEN] < best:
            best = dsp[k, QLEN]
    nt = 0
    for t in range(d):
        k = work[t]
        if dsp[k, QLEN] != best:
            continue
        seen = False
        for u in range(nt):
            if work[d + u] == k:
                seen = True
                break
        if not seen:
            work[d + nt] = k
            nt += 1
    return work[d + _uniform_int(rng, nt)]


@njit(cache=True, inline="always")
def _supermarket_choice(srv, d, rng, work):
    """Least loaded of d distinct uniform servers; ties uniform."""
    n = srv.shape[0]
    best = -1
    server = -1
    ties = 0
    for t in range(d):
        while True:
            c = _uniform_int(rng, n)
            dup = False
            for u in range(t):
                if work[u] == c:
                    dup = True
                    break
            if not dup:
                break
        work[t] = c
        load = srv[c, JOBS]
        if server < 0 or load < best:
            best = load
            server = c
            ties = 1
        elif load == best:
            # reservoir sampling keeps each tied server with equal probability
            ties += 1
            if _uniform_int(rng, ties) == 0:
                server = c
    return server


@njit(cache=True, inline="always")
def _assign(srv, dsp, ring_t, ring_tag, policy, lcfs, d, work, rng, k, now):
    """Give a job arriving at dispatcher k to a server.

    Returns (server, tag, jobs the server had before).
    """
    if policy == 2:
        server = _supermarket_choice(srv, d, rng, work)
        tag = SUPERMARKET_CHOICE
    elif dsp[k, QLEN] > 0:
        server = _pop_server(srv, dsp, k, lcfs)
        tag = FROM_IQUEUE
    else:
        # uniform over all servers; enqueue status is left alone
        server = _uniform_int(rng, srv.shape[0])
        tag = RANDOM_FALLBACK
    jobs = srv[server, JOBS]
    slot = (srv[server, RHEAD] + jobs) & (ring_t.shape[1] - 1)
    ring_t[server, slot] = now
    ring_tag[server, slot] = tag
    srv[server, JOBS] = jobs + 1
    return server, tag, jobs


@njit(cache=True, inline="always")
def _arrival_event(srv, dsp, ring_t, ring_tag, heap, policy, lcfs, d, work, rate, rng, k, now, hsize, seq):
    """Arrival at dispatcher k: assign the job, then draw the next arrival.

    Returns (server, tag, hsize, seq, next arrival time, its sequence number,
    its dispatcher).
    """
    server, tag, before = _assign(srv, dsp, ring_t, ring_tag, policy, lcfs, d, work, rng, k, now)
    dsp[k, ARRIVED] += 1
    if before == 0:
        _push_event(heap, hsize, now + rng.exponential(1.0), seq, server)
        hsize += 1
        seq += 1
    nxt_k = _uniform_int(rng, dsp.shape[0])
    ta = now + rng.exponential(1.0 / rate)
    return server, tag, hsize, seq + 1, ta, seq, nxt_k


@njit(cache=True, inline="always")
def _completion_event(srv, dsp, ring_t, ring_tag, heap, policy, z, d, work, rng, server, now, hsize, seq):
    """Service completion at ``server``: finish its front job, then possibly join an I-queue.

    Returns (arrival time of the finished job, its tag, hsize, seq).
    """
    jobs = srv[server, JOBS]
    if jobs < 1:
        raise RuntimeError("completion event for an idle server")
    head = srv[server, RHEAD]
    arrived = ring_t[server, head]
    tag = ring_tag[server, head]
    srv[server, RHEAD] = (head + 1) & (ring_t.shape[1] - 1)
    left = jobs - 1
    srv[server, JOBS] = left
    if left >= 1:
        _push_event(heap, hsize, now + rng.exponential(1.0), seq, server)
        hsize += 1
        seq += 1
    if policy != 2 and left <= z and srv[server, ENQ] < 0:
        _join_iqueue(srv, dsp, server, _select_iqueue(dsp, policy, d, rng, work))
    return arrived, tag, hsize, seq


@njit(cache=True, inline="always")
def _welford(count, mean, m2, x):
    count += 1.0
    delta = x - mean
    mean += delta / count
    return count, mean, m2 + delta * (x - mean)


@njit(cache=True)
def _run_kernel(srv, dsp, ring_t, ring_tag, heap, ictr, fctr, rec_f, rec_i, par, work, lam, rng, horizon):
    """Process events up to ``horizon``; returns an exit code.

    Counters live in locals for speed and are written back to ``ictr`` and
    ``fctr`` on exit. The kernel pauses (GROW_RING / GROW_RECORDS) right
    after the event that filled a buffer, so the caller can enlarge it and
    resume without disturbing the random stream.
    """
    policy = par[P_POLICY]
    lcfs = par[P_LCFS] != 0
    z = par[P_Z]
    d = par[P_D]
    recording = par[P_RECORD] != 0
    rate = srv.shape[0] * lam
    cap = ring_t.shape[1]
    rec_cap = rec_f.shape[0]
    wstart = fctr[WSTART]
    wend = fctr[WEND]

    hsize = ictr[HSIZE]
    seq = ictr[SEQ]
    arrivals = ictr[ARRIVALS]
    completions = ictr[COMPLETIONS]
    reclen = ictr[RECLEN]
    aseq = ictr[ARR_SEQ]
    adisp = ictr[ARR_DISP]
    ta = fctr[ARR_TIME]
    clock = fctr[CLOCK]
    wcount = fctr[WCOUNT]
    wmean = fctr[WMEAN]
    wm2 = fctr[WM2]
    wrandom = fctr[WRANDOM]

    code = DONE
    while True:
        if hsize > 0 and (heap[0, 0] < ta or (heap[0, 0] == ta and heap[0, 1] < aseq)):
            if heap[0, 0] > horizon:
                break
            clock, server = _pop_event(heap, hsize)
            hsize -= 1
            arrived, tag, hsize, seq = _completion_event(
                srv, dsp, ring_t, ring_tag, heap, policy, z, d, work, rng, server, clock, hsize, seq)
            completions += 1
            if wstart < clock <= wend:
                wcount, wmean, wm2 = _welford(wcount, wmean, wm2, clock - arrived)
                if tag == RANDOM_FALLBACK:
                    wrandom += 1.0
            if recording:
                rec_f[reclen, 0] = arrived
                rec_f[reclen, 1] = clock
                rec_i[reclen, 0] = server
                rec_i[reclen, 1] = tag
                reclen += 1
                if reclen == rec_cap:
                    code = GROW_RECORDS
                    break
        else:
            if ta > horizon:
                break
            clock = ta
            server, tag, hsize, seq, ta, aseq, adisp = _arrival_event(
                srv, dsp, ring_t, ring_tag, heap, policy, lcfs, d, work, rate, rng, adisp, clock, hsize, seq)
            arrivals += 1
            if srv[server, JOBS] == cap:
                code = GROW_RING
                break
    if code == DONE:
        clock = horizon

    ictr[HSIZE] = hsize
    ictr[SEQ] = seq
    ictr[ARRIVALS] = arrivals
    ictr[COMPLETIONS] = completions
    ictr[RECLEN] = reclen
    ictr[ARR_SEQ] = aseq
    ictr[ARR_DISP] = adisp
    fctr[ARR_TIME] = ta
    fctr[CLOCK] = clock
    fctr[WCOUNT] = wcount
    fctr[WMEAN] = wmean
    fctr[WM2] = wm2
    fctr[WRANDOM] = wrandom
    return code


@njit(cache=True)
def _arrival_step(srv, dsp, ring_t, ring_tag, heap, ictr, fctr, par, work, lam, rng, k):
    """One arrival at dispatcher k at the current clock, with state kept in ictr/fctr."""
    server, tag, hsize, seq, ta, aseq, adisp = _arrival_event(
        srv, dsp, ring_t, ring_tag, heap, par[P_POLICY], par[P_LCFS] != 0, par[P_D], work,
        srv.shape[0] * lam, rng, k, fctr[CLOCK], ictr[HSIZE], ictr[SEQ])
    ictr[HSIZE] = hsize
    ictr[SEQ] = seq
    ictr[ARR_SEQ] = aseq
    ictr[ARR_DISP] = adisp
    fctr[ARR_TIME] = ta
    ictr[ARRIVALS] += 1
    return server


@njit(cache=True)
def _completion_step(srv, dsp, ring_t, ring_tag, heap, ictr, fctr, rec_f, rec_i, par, work, rng, server):
    """One completion at ``server`` at the current clock; returns the sojourn."""
    now = fctr[CLOCK]
    arrived, tag, hsize, seq = _completion_event(
        srv, dsp, ring_t, ring_tag, heap, par[P_POLICY], par[P_Z], par[P_D], work, rng, server, now,
        ictr[HSIZE], ictr[SEQ])
    ictr[HSIZE] = hsize
    ictr[SEQ] = seq
    ictr[COMPLETIONS] += 1
    if fctr[WSTART] < now <= fctr[WEND]:
        fctr[WCOUNT], fctr[WMEAN], fctr[WM2] = _welford(fctr[WCOUNT], fctr[WMEAN], fctr[WM2], now - arrived)
        if tag == RANDOM_FALLBACK:
            fctr[WRANDOM] += 1.0
    if par[P_RECORD] != 0:
        j = ictr[RECLEN]
        rec_f[j, 0] = arrived
        rec_f[j, 1] = now
        rec_i[j, 0] = server
        rec_i[j, 1] = tag
        ictr[RECLEN] = j + 1
    return now - arrived


# ---------------------------------------------------------------------------
# Python-facing state and protocol


@dataclass
class SimStats:
    mean_time: float
    var_time: float
    count: int
    max_load_at_end: int
    load_histogram: dict[int, float]
    fraction_random_assigned: float


@dataclass
class SimState:
    """Complete simulator state.

    ``srv`` has one row per server: job count, I-queue membership (-1 if
    none), next/previous server in that I-queue, ring head. ``dsp`` has one
    row per dispatcher: I-queue head, tail, length, arrivals so far. ``ring_t``/``ring_tag``
    hold each server's waiting jobs (arrival time and assignment tag) as a
    circular buffer whose capacity is a power of two. ``work`` is scratch
    space for the probe loops.
    """

    cfg: SystemConfig
    seed: int
    srv: np.ndarray
    dsp: np.ndarray
    ring_t: np.ndarray
    ring_tag: np.ndarray
    heap: np.ndarray
    ictr: np.ndarray
    fctr: np.ndarray
    par: np.ndarray
    work: np.ndarray
    rng: np.random.Generator
    rec_f: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))
    rec_i: np.ndarray = field(default_factory=lambda: np.zeros((1, 2), np.int64))

    @property
    def n(self) -> int:
        return self.srv.shape[0]

    @property
    def m(self) -> int:
        return self.dsp.shape[0]

    @property
    def clock(self) -> float:
        return float(self.fctr[CLOCK])

    @property
    def jobs(self) -> np.ndarray:
        return self.srv[:, JOBS]

    @property
    def enqueued_at(self) -> np.ndarray:
        return self.srv[:, ENQ]

    def iqueue(self, k: int) -> list[int]:
        """Servers on dispatcher k's I-queue in join order."""
        out = []
        s = self.dsp[k, HEAD]
        while s >= 0:
            out.append(int(s))
            s = self.srv[s, NXT]
        return out

    def jobs_in_system(self) -> int:
        return int(self.srv[:, JOBS].sum())

    def records(self):
        """(arrival, completion, server, tag) arrays of completed jobs, if recording."""
        k = int(self.ictr[RECLEN])
        return self.rec_f[:k, 0], self.rec_f[:k, 1], self.rec_i[:k, 0], self.rec_i[:k, 1]

    def check_invariants(self) -> None:
        """Raise SimulationError if I-queue bookkeeping or job conservation is broken."""
        enq = self.srv[:, ENQ]
        seen = np.zeros(self.n, bool)
        for k in range(self.m):
            members = self.iqueue(k)
            if len(members) != self.dsp[k, QLEN]:
                raise SimulationError(f"dispatcher {k}: length {self.dsp[k, QLEN]} but {len(members)} linked")
            for s in members:
                if seen[s]:
                    raise SimulationError(f"server {s} appears twice across I-queues")
                seen[s] = True
                if enq[s] != k:
                    raise SimulationError(f"server {s} is on I-queue {k} but marked {enq[s]}")
        if int((enq >= 0).sum()) != int(self.dsp[:, QLEN].sum()):
            raise SimulationError("enqueued servers and I-queue lengths disagree")
        if self.ictr[ARRIVALS] != self.ictr[COMPLETIONS] + self.jobs_in_system():
            raise SimulationError("jobs are not conserved")


def trial_seed(master, trial: int) -> np.random.SeedSequence:
    """Independent seed for one trial, derived from (master seed, trial index).

    ``master`` is an int or a sequence of ints.
    """
    return np.random.SeedSequence(master, spawn_key=(trial,))


def new_simulation(cfg: SystemConfig, seed, *, record: bool = False, ring: int = 16,
                   record_capacity: int = 1 << 16) -> SimState:
    """All servers idle and on no I-queue, first arrival scheduled.

    ``seed`` is an int or a ``SeedSequence``.
    """
    cfg = validate_config(cfg)
    if cfg.n is None:
        raise ConfigError("missing-size", "simulation needs the server count n and dispatcher count m")
    if cfg.policy is AssignmentPolicy.SUPERMARKET and cfg.d > cfg.n:
        raise ConfigError("bad-choice-count", f"supermarket probes d={cfg.d} distinct servers but n={cfg.n}")
    n, m = cfg.n, cfg.m
    if ring < 1 or ring & (ring - 1):
        raise ValueError(f"ring capacity must be a power of two, got {ring}")
    srv = np.zeros((n, 5), np.int64)
    srv[:, ENQ:PRV + 1] = -1
    dsp = np.zeros((m, 4), np.int64)
    dsp[:, HEAD:TAIL + 1] = -1
    # one pending completion per busy server
    heap_cap = n
    par = np.array([POLICY_CODES[cfg.policy], cfg.discipline is IQueueDiscipline.LCFS,
                    cfg.z, cfg.d, int(record)], np.int64)
    sim = SimState(
        cfg=cfg, seed=seed, srv=srv, dsp=dsp,
        ring_t=np.zeros((n, ring)), ring_tag=np.zeros((n, ring), np.int8),
        heap=np.zeros((heap_cap, 3)),
        ictr=np.zeros(7, np.int64), fctr=np.zeros(8), par=par, work=np.zeros(2 * cfg.d, np.int64),
        rng=np.random.default_rng(seed),
    )
    sim.fctr[WSTART] = -math.inf
    sim.fctr[WEND] = math.inf
    if record:
        sim.rec_f = np.zeros((record_capacity, 2))
        sim.rec_i = np.zeros((record_capacity, 2), np.int64)
    first = sim.rng.exponential(1.0 / (n * cfg.lam))
    sim.fctr[ARR_TIME] = first
    sim.ictr[ARR_DISP] = int(sim.rng.integers(0, m))
    sim.ictr[ARR_SEQ] = 0
    sim.ictr[SEQ] = 1
    return sim


def _grow_ring(sim: SimState) -> None:
    n, cap = sim.ring_t.shape
    new_t = np.zeros((n, 2 * cap))
    new_tag = np.zeros((n, 2 * cap), np.int8)
    order = (sim.srv[:, RHEAD][:, None] + np.arange(cap)[None, :]) % cap
    rows = np.arange(n)[:, None]
    new_t[:, :cap] = sim.ring_t[rows, order]
    new_tag[:, :cap] = sim.ring_tag[rows, order]
    sim.ring_t, sim.ring_tag = new_t, new_tag
    sim.srv[:, RHEAD] = 0


def _grow_records(sim: SimState) -> None:
    sim.rec_f = np.concatenate([sim.rec_f, np.zeros_like(sim.rec_f)])
    sim.rec_i = np.concatenate([sim.rec_i, np.zeros_like(sim.rec_i)])


def advance(sim: SimState, until: float) -> None:
    """Process every event with time <= ``until``."""
    while True:
        code = _run_kernel(sim.srv, sim.dsp, sim.ring_t, sim.ring_tag, sim.heap, sim.ictr,
                           sim.fctr, sim.rec_f, sim.rec_i, sim.par, sim.work, sim.cfg.lam, sim.rng, float(until))
        if code == DONE:
            return
        if code == GROW_RING:
            _grow_ring(sim)
        else:
            _grow_records(sim)


def _load_summary(final_loads):
    loads = np.asarray(final_loads, dtype=np.int64)
    counts = np.bincount(loads)
    hist = {int(k): float(c) / loads.size for k, c in enumerate(counts) if c}
    return int(loads.max()), hist


def run(sim: SimState, horizon: float = 10000.0, warmup: float = 5000.0) -> SimStats:
    """Run to ``horizon`` and report on jobs completing in (warmup, horizon]."""
    if not (horizon > warmup):
        raise ValueError(f"horizon {horizon} must exceed the warm-up boundary {warmup}")
    if sim.clock > warmup:
        raise ValueError(f"simulation clock {sim.clock} is already past the warm-up boundary {warmup}")
    sim.fctr[WSTART] = warmup
    sim.fctr[WEND] = horizon
    sim.fctr[WCOUNT:WRANDOM + 1] = 0.0
    advance(sim, horizon)
    count = int(sim.fctr[WCOUNT])
    if count == 0:
        raise EmptyWindowError(f"no job completed in ({warmup}, {horizon}]")
    max_load, hist = _load_summary(sim.srv[:, JOBS])
    return SimStats(
        mean_time=float(sim.fctr[WMEAN]), var_time=float(sim.fctr[WM2]) / count, count=count,
        max_load_at_end=max_load, load_histogram=hist,
        fraction_random_assigned=float(sim.fctr[WRANDOM]) / count,
    )


def collect_stats(records, window_start: float, window_end: float, final_loads) -> SimStats:
    """Statistics of recorded jobs completing in (window_start, window_end].

    ``records`` is a tuple of arrays (arrival, completion, server, tag) as
    returned by ``SimState.records``. Variance is the population variance.
    """
    if not (window_start < window_end):
        raise ValueError("window_start must precede window_end")
    arrival, completion, _, tag = (np.asarray(a) for a in records)
    inside = (completion > window_start) & (completion <= window_end)
    if not inside.any():
        raise EmptyWindowError(f"no job completed in ({window_start}, {window_end}]")
    sojourn = completion[inside] - arrival[inside]
    max_load, hist = _load_summary(final_loads)
    return SimStats(
        mean_time=float(sojourn.mean()), var_time=float(sojourn.var()), count=int(sojourn.size),
        max_load_at_end=max_load, load_histogram=hist,
        fraction_random_assigned=float(np.mean(tag[inside] == RANDOM_FALLBACK)),
    )


def write_records(sim: SimState, path) -> None:
    """Dump completed-job records as CSV ``arrival,completion,server,assignment``."""
    arrival, completion, server, tag = sim.records()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arrival", "completion", "server", "assignment"])
        for a, c, s, t in zip(arrival, completion, server, tag):
            w.writerow([repr(float(a)), repr(float(c)), int(s), TAG_NAMES[t]])


# thin wrappers over the compiled transitions, mainly for tests and inspection

def handle_arrival(sim: SimState, dispatcher: int) -> int:
    """Apply one arrival at ``dispatcher`` at the current clock; returns the server used."""
    if not 0 <= dispatcher < sim.m:
        raise IndexError(f"dispatcher {dispatcher} out of range")
    server = int(_arrival_step(sim.srv, sim.dsp, sim.ring_t, sim.ring_tag, sim.heap, sim.ictr,
                               sim.fctr, sim.par, sim.work, sim.cfg.lam, sim.rng, dispatcher))
    if sim.srv[server, JOBS] == sim.ring_t.shape[1]:
        _grow_ring(sim)
    return server


def handle_completion(sim: SimState, server: int) -> float:
    """Complete the front job of ``server`` at the current clock; returns its sojourn.

    The server's pending completion is taken off the calendar first, as the
    event loop would have popped it.
    """
    if sim.srv[server, JOBS] < 1:
        raise SimulationError(f"completion event for idle server {server}")
    _cancel_completion(sim, server)
    if sim.par[P_RECORD] and sim.ictr[RECLEN] == sim.rec_f.shape[0]:
        _grow_records(sim)
    return float(_completion_step(sim.srv, sim.dsp, sim.ring_t, sim.ring_tag, sim.heap,
                                  sim.ictr, sim.fctr, sim.rec_f, sim.rec_i, sim.par, sim.work, sim.rng, server))


def _cancel_completion(sim: SimState, server: int) -> None:
    size = int(sim.ictr[HSIZE])
    events = sim.heap[:size]
    keep = events[events[:, 2] != server]
    if keep.shape[0] != size - 1:
        raise SimulationError(f"server {server} has {size - keep.shape[0]} pending completions, expected 1")
    # a (time, seq)-sorted array is a valid binary heap
    keep = keep[np.lexsort((keep[:, 1], keep[:, 0]))]
    sim.heap[: size - 1] = keep
    sim.ictr[HSIZE] = size - 1


def select_iqueue(sim: SimState) -> int:
    return int(_select_iqueue(sim.dsp, sim.par[P_POLICY], sim.par[P_D], sim.rng, sim.work))


def join_iqueue(sim: SimState, server: int, dispatcher: int) -> None:
    _join_iqueue(sim.srv, sim.dsp, server, dispatcher)


def pop_server(sim: SimState, dispatcher: int) -> int:
    if sim.dsp[dispatcher, QLEN] == 0:
        raise IndexError(f"I-queue of dispatcher {dispatcher} is empty")
    return int(_pop_server(sim.srv, sim.dsp, dispatcher, bool(sim.par[P_LCFS])))


# ---------------------------------------------------------------------------
# multi-trial protocol


@dataclass
class TrialSummary:
    """Aggregate over independent trials; dispersion is the standard error across trials."""

    cfg: SystemConfig
    trials: list[SimStats]

    @property
    def mean_time(self) -> float:
        return float(np.mean([t.mean_time for t in self.trials]))

    @property
    def mean_time_se(self) -> float:
        return _stderr([t.mean_time for t in self.trials])

    @property
    def var_time(self) -> float:
        return float(np.mean([t.var_time for t in self.trials]))

    @property
    def var_time_se(self) -> float:
        return _stderr([t.var_time for t in self.trials])

    @property
    def max_load(self) -> int:
        return max(t.max_load_at_end for t in self.trials)

    @property
    def fraction_random(self) -> float:
        return float(np.mean([t.fraction_random_assigned for t in self.trials]))


def _stderr(values) -> float:
    v = np.asarray(values, float)
    if v.size < 2:
        return float("nan")
    return float(v.std(ddof=1) / math.sqrt(v.size))


def simulate(cfg: SystemConfig, seed=0, trials: int = 1, horizon: float = 10000.0,
             warmup: float = 5000.0, record_path=None) -> TrialSummary:
    """Run ``trials`` independent simulations seeded from (seed, trial index).

    With ``record_path`` the job records of trial 0 are written there as CSV.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    cfg = validate_config(cfg)
    out = []
    for k in range(trials):
        sim = new_simulation(cfg, trial_seed(seed, k), record=record_path is not None and k == 0)
        out.append(run(sim, horizon, warmup))
        if record_path is not None and k == 0:
            write_records(sim, record_path)
    return TrialSummary(cfg, out)
