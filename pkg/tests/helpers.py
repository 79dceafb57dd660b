"""Shared test machinery: finite differences and independent loop oracles.

Everything here is deliberately naive (nested loops, dense scans) and never
calls back into the vectorized implementation paths it is used to check.
"""

from __future__ import annotations

import numpy as np


def rel_err(a: np.ndarray, n: np.ndarray) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, 1)."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def fd_gradient(f, arr: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar-valued f() w.r.t. every entry of arr.

    f reads arr by reference; entries are perturbed in place and restored.
    """
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def fd_gradient_sampled(f, arr: np.ndarray, indices, eps: float = 1e-3) -> np.ndarray:
    """Central differences at a subset of flat indices; other entries stay 0."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in indices:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def loop_conv(x, w, b, stride, dilation, padding):
    """Direct nested-loop N-d convolution oracle (rank inferred from x)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    rank = x.ndim - 2
    B, C = x.shape[:2]
    Co = w.shape[0]
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    outs = []
    for e, k, s, d, p in zip(x.shape[2:], w.shape[2:], stride, dilation, padding):
        outs.append((e + 2 * p - d * (k - 1) - 1) // s + 1)
    out = np.zeros((B, Co, *outs))
    for bi in range(B):
        for oc in range(Co):
            for opos in np.ndindex(*outs):
                acc = 0.0
                for ic in range(C):
                    for kpos in np.ndindex(*w.shape[2:]):
                        ipos = tuple(o * s + k * d for o, k, s, d in
                                     zip(opos, kpos, stride, dilation))
                        acc += xp[(bi, ic, *ipos)] * w[(oc, ic, *kpos)]
                out[(bi, oc, *opos)] = acc
            if b is not None:
                out[bi, oc] += b[oc]
    return out


def loop_transpose_conv(x, w, stride):
    """Loop oracle for the stride-s transposed conv: stamp kernels additively."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B = x.shape[0]
    Co, Ci = w.shape[0], w.shape[1]
    outs = tuple(s * e for s, e in zip(stride, x.shape[2:]))
    out = np.zeros((B, Ci, *outs))
    for bi in range(B):
        for oc in range(Co):
            for ipos in np.ndindex(*x.shape[2:]):
                v = x[(bi, oc, *ipos)]
                for ic in range(Ci):
                    for kpos in np.ndindex(*w.shape[2:]):
                        tpos = tuple(i * s + k for i, k, s in zip(ipos, kpos, stride))
                        if all(t < o for t, o in zip(tpos, outs)):
                            out[(bi, ic, *tpos)] += v * w[(oc, ic, *kpos)]
    return out


def loop_pool(x, kind, window, stride):
    """Nested-loop pooling oracle."""
    x = np.asarray(x, dtype=np.float64)
    B, C = x.shape[:2]
    outs = [(e - k) // s + 1 for e, k, s in zip(x.shape[2:], window, stride)]
    out = np.zeros((B, C, *outs))
    for bi in range(B):
        for c in range(C):
            for opos in np.ndindex(*outs):
                vals = []
                for kpos in np.ndindex(*window):
                    ipos = tuple(o * s + k for o, k, s in zip(opos, kpos, stride))
                    vals.append(x[(bi, c, *ipos)])
                out[(bi, c, *opos)] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def loop_upsample2_axis(x, axis):
    """Corner-aligned 2x linear upsample along one axis, looped."""
    x = np.asarray(x, dtype=np.float64)
    x = np.moveaxis(x, axis, -1)
    S = x.shape[-1]
    out = np.zeros(x.shape[:-1] + (2 * S,))
    for i in range(2 * S):
        if S == 1:
            out[..., i] = x[..., 0]
            continue
        c = i * (S - 1) / (2 * S - 1)
        lo = int(np.floor(c))
        t = c - lo
        hi = min(lo + 1, S - 1)
        out[..., i] = (1 - t) * x[..., lo] + t * x[..., hi]
    return np.moveaxis(out, -1, axis)


def loop_downsample2_axis(x, axis):
    """Pairwise-mean 2x downsample along one axis, looped."""
    x = np.asarray(x, dtype=np.float64)
    x = np.moveaxis(x, axis, -1)
    S = x.shape[-1]
    out = np.zeros(x.shape[:-1] + (S // 2,))
    for i in range(S // 2):
        out[..., i] = 0.5 * (x[..., 2 * i] + x[..., 2 * i + 1])
    return np.moveaxis(out, -1, axis)


def scalar_adam_sequence(p0, grads, lr, beta1, beta2, eps, weight_decay=0.0):
    """Reference scalar Adam recurrence with decoupled weight decay."""
    p, m, v = float(p0), 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        p = p - lr * weight_decay * p - lr * mh / (np.sqrt(vh) + eps)
    return p


def counting_dice(pred, truth, cls):
    """Dice by explicit voxel counting; empty/empty convention 1.0."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    inter = p_count = t_count = 0
    for a, b in zip(pred, truth):
        pa = a == cls
        tb = b == cls
        inter += pa and tb
        p_count += pa
        t_count += tb
    if p_count + t_count == 0:
        return 1.0
    return 2.0 * inter / (p_count + t_count)


def unrolled_three_level_forward(net, x_arr):
    """Hand-unrolled aggregation expression for a levels=3 supernet.

    Writes out the gated sum over connections node by node, with scalar
    gate multiplies and explicit per-edge alignment (resample then 1x1
    projection); only the block and primitive ops are shared with the
    implementation under test, the aggregation wiring is spelled out here.
    """
    from aggsearch.ops import ConvSpec, conv, instance_norm, interpolate, relu
    from aggsearch.tensor import Tensor

    assert net.geometry.levels == 3 and net.mssa
    P = {k: Tensor(v) for k, v in net.store.params.items()}

    # Canonical connection order, recomputed from its documented definition:
    # destinations by (stage, level), sources by (stage, level).
    nodes = [(i, j) for i in range(3) for j in range(3 - i)]
    edges = []
    for dst in nodes:
        i, j = dst
        srcs = [(0, k) for k in range(j)] if i == 0 else \
               [(i - 1, k) for k in range(3 - (i - 1))]
        edges.extend((s, dst) for s in srcs)
    beta = net.store.params["beta"]
    gate = {e: 1.0 / (1.0 + np.exp(-beta[i])) for i, e in enumerate(edges)}

    def T(h, e, dst_level):
        sj = e[0][1]
        for _ in range(sj - dst_level):
            h = interpolate(h, 2.0)
        for _ in range(dst_level - sj):
            h = interpolate(h, 0.5)
        if sj != dst_level:
            name = f"edge_{e[0][0]}.{e[0][1]}-{e[1][0]}.{e[1][1]}"
            spec = ConvSpec.same(net.rank, net.width(sj), net.width(dst_level), 1)
            h = conv(h, P[f"{name}/proj/w"], P[f"{name}/proj/b"], spec)
        return h

    x = Tensor(x_arr)
    n00 = relu(instance_norm(conv(x, P["stem/w"], None, net.stem_spec)))
    b = net.blocks
    n01 = b[(0, 1)].forward(gate[((0, 0), (0, 1))] * T(n00, ((0, 0), (0, 1)), 0), P)
    agg02 = (gate[((0, 0), (0, 2))] * T(n00, ((0, 0), (0, 2)), 1)
             + gate[((0, 1), (0, 2))] * T(n01, ((0, 1), (0, 2)), 1))
    n02 = b[(0, 2)].forward(agg02, P)
    feats0 = {0: n00, 1: n01, 2: n02}
    agg10 = None
    agg11 = None
    for k in range(3):
        t0 = gate[((0, k), (1, 0))] * T(feats0[k], ((0, k), (1, 0)), 0)
        t1 = gate[((0, k), (1, 1))] * T(feats0[k], ((0, k), (1, 1)), 1)
        agg10 = t0 if agg10 is None else agg10 + t0
        agg11 = t1 if agg11 is None else agg11 + t1
    n10 = b[(1, 0)].forward(agg10, P)
    n11 = b[(1, 1)].forward(agg11, P)
    agg20 = (gate[((1, 0), (2, 0))] * T(n10, ((1, 0), (2, 0)), 0)
             + gate[((1, 1), (2, 0))] * T(n11, ((1, 1), (2, 0)), 0))
    n20 = b[(2, 0)].forward(agg20, P)
    return conv(n20, P["head/w"], P["head/b"], net.head_spec).data


def brute_prune(levels, gates, tau, fallback, rng):
    """Independent threshold + dead-node fixpoint + repair oracle.

    Deletes violating nodes one at a time in randomized order (exercising
    order independence of the fixpoint) with full rescans. Returns the kept
    edge set.
    """
    output = (levels - 1, 0)
    stem = (0, 0)
    nodes = [(i, j) for i in range(levels) for j in range(levels - i)]
    kept = {e for e in gates if gates[e] >= tau}
    alive = set(nodes)
    while True:
        violating = [n for n in alive
                     if n != output
                     and not any(s == n and d[0] == n[0] + 1 for (s, d) in kept)]
        if not violating:
            break
        n = violating[rng.integers(0, len(violating))]
        alive.discard(n)
        kept = {e for e in kept if n not in e}

    def reach(edges):
        seen = {stem}
        changed = True
        while changed:
            changed = False
            for (s, d) in edges:
                if s in seen and d not in seen:
                    seen.add(d)
                    changed = True
        return seen

    if fallback:
        while output not in reach(kept):
            r = reach(kept)
            dead_ends = [n for n in sorted(r)
                         if n != output and not any(s == n for (s, d) in kept)]
            added = False
            for n in dead_ends:
                outs = [e for e in gates if e[0] == n]
                if not outs:
                    continue
                outs.sort(key=lambda e: (-gates[e],
                                         e[1][0], e[1][1], e[0][0], e[0][1]))
                kept.add(outs[0])
                added = True
            if not added:
                break
    return kept


def parse_dot(text: str):
    """Minimal strict DOT parser: returns (graph name, node ids, edge pairs).

    Accepts the digraph subset this package emits; raises ValueError on
    malformed input. Used because no graphviz tooling exists in this
    environment.
    """
    import re

    text = text.strip()
    m = re.match(r'digraph\s+("?[\w./-]+"?)\s*\{(.*)\}\s*$', text, re.S)
    if not m:
        raise ValueError("not a digraph")
    name, body = m.group(1), m.group(2)
    nodes, edges = [], []
    depth = 0
    for raw in body.split(";"):
        stmt = raw.strip()
        if not stmt:
            continue
        depth += stmt.count("{") - stmt.count("}")
        if depth < 0:
            raise ValueError("unbalanced braces")
        em = re.match(r'("?[\w.,-]+"?)\s*->\s*("?[\w.,-]+"?)(\s*\[[^\]]*\])?$', stmt)
        nm = re.match(r'("?[\w.,-]+"?)(\s*\[[^\]]*\])?$', stmt)
        if em:
            edges.append((em.group(1).strip('"'), em.group(2).strip('"')))
        elif nm and "=" not in nm.group(1):
            nodes.append(nm.group(1).strip('"'))
        elif "=" in stmt and "[" not in stmt:
            continue
        else:
            raise ValueError(f"unparseable statement: {stmt!r}")
    if depth != 0:
        raise ValueError("unbalanced braces")
    return name.strip('"'), nodes, edges
