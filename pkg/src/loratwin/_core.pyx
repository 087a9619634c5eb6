# distutils: language = c++
"""Compiled serving loop.  Same semantics and floating-point evaluation order
as the pure-Python backend in engine.py."""

from libcpp.vector cimport vector
from libcpp.queue cimport priority_queue
from libcpp.algorithm cimport sort

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef enum:
    PENDING = 0
    WAITING = 1
    RUNNING = 2
    FINISHED = 3
    REJECTED = 4

ctypedef long long i64
ctypedef signed char i8
ctypedef priority_queue[i64] Heap


cdef inline i64 heap_top(Heap* q, signed char* status, i64* qkey, i64 n) nogil:
    """Index of the earliest valid entry, popping stale ones; -1 if none."""
    cdef i64 key, rid
    while not q.empty():
        key = -q.top()
        rid = key if key < n else key - n
        if status[rid] == WAITING and qkey[rid] == key:
            return rid
        q.pop()
    return -1


def run_core(const double[::1] arrival, const i64[::1] adapter, const i64[::1] in_len,
             const i64[::1] out_len, const double[::1] load_s, i64 capacity, int slots,
             double ratio, const double[::1] k, double duration, bint drain, i64 max_iter,
             bint priority, bint record_tokens, bint record_iterations):
    cdef i64 n = arrival.shape[0]
    cdef int n_ad = load_s.shape[0]
    cdef double k1 = k[0], k2 = k[1], k3 = k[2], k4 = k[3], k5 = k[4], k6 = k[5], k7 = k[6]

    first_a = np.full(n, np.nan)
    comp_a = np.full(n, np.nan)
    gen_a = np.zeros(n, dtype=np.int64)
    pre_a = np.zeros(n, dtype=np.int64)
    status_a = np.zeros(n, dtype=np.int8)
    cdef double[::1] first = first_a
    cdef double[::1] comp = comp_a
    cdef i64[::1] gen = gen_a
    cdef i64[::1] pre = pre_a
    cdef signed char[::1] status = status_a

    cdef vector[i64] held = vector[i64](n, 0)
    cdef vector[i64] qkey = vector[i64](n, -1)
    cdef vector[double] last_emit = vector[double](n, 0.0)

    offsets_a = np.zeros(n + 1, dtype=np.int64)
    if n:
        np.cumsum(out_len, out=offsets_a[1:])
    cdef i64[::1] offsets = offsets_a
    emit_a = np.empty(offsets_a[n] if record_tokens else 0, dtype=np.float64)
    cdef double[::1] emit = emit_a

    cdef vector[i64] counts = vector[i64](n_ad, 0)
    cdef vector[int] bpos = vector[int](n_ad, -1)
    cdef vector[int] bmembers
    cdef vector[i8] resident = vector[i8](n_ad, 0)
    cdef vector[double] last_used = vector[double](n_ad, 0.0)
    cdef int n_resident = 0
    cdef vector[int] to_load

    cdef Heap gq
    cdef vector[Heap] aq
    aq.resize(n_ad)
    cdef i64 waiting_count = 0

    cdef vector[i64] running
    cdef vector[double] itl_v
    cdef vector[i64] itl_c
    cdef vector[double] ld_time
    cdef vector[i64] ld_adapter
    cdef vector[double] ld_lat
    cdef vector[double] tr_time, tr_lat
    cdef vector[i64] tr_iter, tr_rr, tr_rw, tr_a, tr_loads

    cdef double clock = 0.0, t, lat, sched, model, adap, load_sum, rr, rw
    cdef i64 nxt = 0, used = 0, iterations = 0, window_tokens = 0
    cdef i64 rid, a, b, c, j, key, need, v, cont, nload, last
    cdef int best, pos
    cdef bint truncated = False, drained = False
    cdef int err = 0
    cdef i64 err_rid = -1
    cdef signed char* st = &status[0] if n else NULL
    cdef i64* qk = qkey.data()

    while True:
        # arrivals
        while nxt < n and arrival[nxt] <= clock:
            if in_len[nxt] + 1 > capacity:
                status[nxt] = REJECTED
            else:
                key = nxt + n
                qkey[nxt] = key
                status[nxt] = WAITING
                gq.push(-key)
                aq[adapter[nxt]].push(-key)
                waiting_count += 1
            nxt += 1

        # completions
        j = 0
        for c in range(<i64>running.size()):
            rid = running[c]
            if gen[rid] == out_len[rid]:
                used -= held[rid]
                held[rid] = 0
                status[rid] = FINISHED
                a = adapter[rid]
                counts[a] -= 1
                if counts[a] == 0:
                    pos = bpos[a]
                    last = bmembers.back()
                    bmembers[pos] = <int>last
                    bpos[last] = pos
                    bmembers.pop_back()
                    bpos[a] = -1
            else:
                running[j] = rid
                j += 1
        running.resize(j)

        if running.size() == 0 and waiting_count == 0 and nxt >= n:
            drained = True
            break
        if not drain and clock >= duration:
            break
        if iterations >= max_iter:
            truncated = True
            break

        # next-token KV, LIFO preemption
        while running.size() > 0 and used + <i64>running.size() > capacity:
            if running.size() == 1:
                err = 1
                err_rid = running[0]
                break
            v = running.back()
            running.pop_back()
            used -= held[v]
            held[v] = 0
            a = adapter[v]
            counts[a] -= 1
            if counts[a] == 0:
                pos = bpos[a]
                last = bmembers.back()
                bmembers[pos] = <int>last
                bpos[last] = pos
                bmembers.pop_back()
                bpos[a] = -1
            pre[v] += 1
            qkey[v] = v
            status[v] = WAITING
            gq.push(-v)
            aq[a].push(-v)
            waiting_count += 1
        if err:
            break
        for c in range(<i64>running.size()):
            held[running[c]] += 1
        used += <i64>running.size()

        # admission
        while True:
            if <int>bmembers.size() < slots:
                rid = heap_top(&gq, st, qk, n)
            elif priority:
                rid = -1
                for c in range(<i64>bmembers.size()):
                    b = heap_top(&aq[bmembers[c]], st, qk, n)
                    if b >= 0 and (rid < 0 or qkey[b] < qkey[rid]):
                        rid = b
            else:
                rid = heap_top(&gq, st, qk, n)
                if rid >= 0 and counts[adapter[rid]] == 0:
                    break
            if rid < 0:
                break
            need = in_len[rid] + gen[rid] + 1
            if gen[rid] == 0 and need > capacity:
                qkey[rid] = -1
                waiting_count -= 1
                status[rid] = REJECTED
                continue
            if need > capacity - used:
                break
            qkey[rid] = -1
            waiting_count -= 1
            used += need
            held[rid] = need
            status[rid] = RUNNING
            running.push_back(rid)
            a = adapter[rid]
            if counts[a] == 0:
                bpos[a] = <int>bmembers.size()
                bmembers.push_back(<int>a)
            counts[a] += 1

        if running.size() == 0:
            if waiting_count > 0:
                err = 1
                err_rid = heap_top(&gq, st, qk, n)
                break
            clock = arrival[nxt]
            continue

        # adapter loads, ascending index, LRU idle eviction
        to_load.clear()
        for c in range(<i64>bmembers.size()):
            if not resident[bmembers[c]]:
                to_load.push_back(bmembers[c])
        sort(to_load.begin(), to_load.end())
        load_sum = 0.0
        nload = 0
        for c in range(<i64>to_load.size()):
            a = to_load[c]
            if n_resident >= slots:
                best = -1
                for b in range(n_ad):
                    if resident[b] and counts[b] == 0:
                        if best < 0 or last_used[b] < last_used[best]:
                            best = <int>b
                if best < 0:
                    err = 2
                    break
                resident[best] = 0
                n_resident -= 1
            resident[a] = 1
            n_resident += 1
            last_used[a] = clock
            load_sum += load_s[a]
            nload += 1
            ld_time.push_back(clock)
            ld_adapter.push_back(a)
            ld_lat.push_back(load_s[a])
        if err:
            break
        for c in range(<i64>bmembers.size()):
            last_used[bmembers[c]] = clock

        # step latency
        rr = <double>running.size()
        rw = <double>waiting_count
        sched = k1 * rr + k2 * rw + k3 * rw * ratio
        if sched < 0.0:
            sched = 0.0
        model = k4 * rr + k5
        if bmembers.size() == 0:
            adap = 1.0
        else:
            adap = k6 * <double>bmembers.size() + k7
        lat = sched + load_sum + model * adap
        if record_iterations:
            tr_time.push_back(clock)
            tr_iter.push_back(iterations)
            tr_rr.push_back(<i64>running.size())
            tr_rw.push_back(waiting_count)
            tr_a.push_back(<i64>bmembers.size())
            tr_lat.push_back(lat)
            tr_loads.push_back(nload)

        # emit one token per running request
        t = clock + lat
        cont = 0
        for c in range(<i64>running.size()):
            rid = running[c]
            if gen[rid] == 0:
                first[rid] = t
            elif last_emit[rid] == clock:
                cont += 1
            else:
                itl_v.push_back(t - last_emit[rid])
                itl_c.push_back(1)
            gen[rid] += 1
            last_emit[rid] = t
            if record_tokens:
                emit[offsets[rid] + gen[rid] - 1] = t
            if gen[rid] == out_len[rid]:
                comp[rid] = t
        if t <= duration:
            window_tokens += <i64>running.size()
        if cont:
            itl_v.push_back(t - clock)
            itl_c.push_back(cont)
        clock = t
        iterations += 1

    error = None
    if err == 1:
        error = ("single request exceeds KV capacity", err_rid)
    elif err == 2:
        error = ("no idle adapter to evict", -1)

    trace = None
    if record_iterations:
        trace = {
            "time": _f64(tr_time),
            "iteration": _i64(tr_iter),
            "r_running": _i64(tr_rr),
            "r_waiting": _i64(tr_rw),
            "a_running": _i64(tr_a),
            "lat_step": _f64(tr_lat),
            "loads": _i64(tr_loads),
        }
    return {
        "first_token": first_a,
        "completion": comp_a,
        "generated": gen_a,
        "preemptions": pre_a,
        "status": status_a,
        "emit_times": emit_a,
        "emit_offsets": offsets_a,
        "itl_values": _f64(itl_v),
        "itl_counts": _i64(itl_c),
        "window_tokens": window_tokens,
        "clock": clock,
        "iterations": iterations,
        "truncated": truncated,
        "drained": drained,
        "load_time": _f64(ld_time),
        "load_adapter": _i64(ld_adapter),
        "load_latency": _f64(ld_lat),
        "trace": trace,
        "error": error,
    }


cdef object _f64(vector[double]& v):
    out = np.empty(v.size(), dtype=np.float64)
    cdef double[::1] o = out
    cdef size_t i
    for i in range(v.size()):
        o[i] = v[i]
    return out


cdef object _i64(vector[i64]& v):
    out = np.empty(v.size(), dtype=np.int64)
    cdef i64[::1] o = out
    cdef size_t i
    for i in range(v.size()):
        o[i] = v[i]
    return out
