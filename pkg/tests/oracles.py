"""Independent oracles the implementation is checked against.

Everything here deliberately avoids the package's solver/agent code paths:
the power-flow oracle is a damped fixed-point iteration written over
dict-based tree recursion, the two-bus case has a closed-form quadratic,
factored-Q answers come from exhaustive enumeration, and gradients from
central finite differences.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def oracle_distflow(feeder, inj, pos, tol=1e-14, max_iter=100000, damping=0.5):
    """Damped fixed-point solution of the branch-flow equations on a tree.

    Returns (v_by_bus: dict, l_by_line: dict, iterations).  Independent of
    the package solver: flows are recomputed by subtree recursion each
    iteration and the voltage/current state is damped until the update is
    below tol.
    """
    children = {b.id: [] for b in feeder.buses}
    for idx, ln in enumerate(feeder.lines):
        children[ln.from_bus].append((idx, ln))

    v1 = 1.0
    ratio = {}
    for k, reg in enumerate(feeder.regulators):
        if reg.is_substation_reg:
            v1 = 1.0 + pos.taps[k] * reg.step
        else:
            key = tuple(reg.line_ref)
            idx = [i for i, ln in enumerate(feeder.lines) if (ln.from_bus, ln.to_bus) == key][0]
            ratio[idx] = 1.0 + pos.taps[k] * reg.step

    caps_at = {}
    for k, cap in enumerate(feeder.capacitors):
        caps_at.setdefault(cap.bus_ref, []).append((cap, pos.cap_status[k]))

    v = {b.id: v1 for b in feeder.buses}
    l = {idx: 0.0 for idx in range(len(feeder.lines))}

    def q_cap(bus):
        return sum(cap.m_cap * v[bus] ** 2 for cap, on in caps_at.get(bus, []) if on)

    for it in range(1, max_iter + 1):
        def flows(bus):
            """Sending-end (p, q) of every line below `bus`, via recursion."""
            out = {}
            for idx, ln in children[bus]:
                sub = flows(ln.to_bus)
                out.update(sub)
                p = inj.p[ln.to_bus - 1] + ln.r * l[idx]
                q = inj.q[ln.to_bus - 1] - q_cap(ln.to_bus) + ln.x * l[idx]
                for cidx, cln in children[ln.to_bus]:
                    p += out[cidx][0]
                    q += out[cidx][1]
                out[idx] = (p, q)
            return out

        flow = flows(1)
        v_new = {1: v1}
        l_new = {}

        def descend(bus):
            for idx, ln in children[bus]:
                p, q = flow[idx]
                li = (p * p + q * q) / v_new[bus] ** 2
                vsq = v_new[bus] ** 2 - 2 * (ln.r * p + ln.x * q) + (ln.r**2 + ln.x**2) * li
                u = ratio.get(idx, 1.0)
                v_new[ln.to_bus] = u * math.sqrt(max(vsq, 1e-9))
                l_new[idx] = li
                descend(ln.to_bus)

        descend(1)
        delta = max(
            [abs(v_new[b] - v[b]) for b in v] + [abs(l_new[i] - l[i]) for i in l] + [0.0]
        )
        for b in v:
            v[b] = damping * v_new[b] + (1 - damping) * v[b]
        for i in l:
            l[i] = damping * l_new[i] + (1 - damping) * l[i]
        if delta < tol:
            return v, l, it
    return v, l, max_iter


def two_bus_closed_form(r, x, p_load, q_load, v1=1.0, m_cap=0.0, cap_on=False, iters=200):
    """Closed-form receiving-end voltage for a single line.

    The squared current solves a quadratic; the capacitor coupling (q
    injection proportional to the solved voltage squared) is folded in by
    re-solving until stationary.
    """
    v2 = v1
    for _ in range(iters):
        q_net = q_load - (m_cap * v2**2 if cap_on else 0.0)
        a = r * r + x * x
        b = 2 * (r * p_load + x * q_net) - v1 * v1
        c = p_load * p_load + q_net * q_net
        if a == 0:
            l = -c / b
        else:
            disc = b * b - 4 * a * c
            l = (-b - math.sqrt(disc)) / (2 * a)
        p_send = p_load + r * l
        q_send = q_net + x * l
        v2_new = math.sqrt(v1 * v1 - 2 * (r * p_send + x * q_send) + a * l)
        if abs(v2_new - v2) < 1e-15:
            return v2_new
        v2 = v2_new
    return v2


def exhaustive_factored_max(head_values):
    """(argmax action, max value) by brute force over the product space."""
    best = None
    for combo in itertools.product(*[range(len(h)) for h in head_values]):
        val = sum(h[i] for h, i in zip(head_values, combo))
        if best is None or val > best[1] + 1e-18:
            best = (combo, val)
    return best


def finite_difference_grads(loss_fn, flat_params, step=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    grads = np.zeros_like(flat_params)
    for i in range(len(flat_params)):
        up = flat_params.copy()
        up[i] += step
        down = flat_params.copy()
        down[i] -= step
        grads[i] = (loss_fn(up) - loss_fn(down)) / (2 * step)
    return grads
