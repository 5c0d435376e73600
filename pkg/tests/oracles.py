"""Independent brute-force reference implementations used across the tests.

Everything here is deliberately naive: subset enumeration, full-energy
evaluation, central finite differences.  The library must agree with these on
small inputs; none of this code is imported by the package itself.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np

from flipmatch.graph import UndirectedGraph


def _connected(vertices: list[int], has_edge) -> bool:
    if not vertices:
        return True
    seen = {vertices[0]}
    stack = [vertices[0]]
    while stack:
        v = stack.pop()
        for w in vertices:
            if w not in seen and has_edge(v, w):
                seen.add(w)
                stack.append(w)
    return len(seen) == len(vertices)


def chordal_brute_force(g: UndirectedGraph) -> bool:
    """Chordality by exhaustive induced-cycle search.

    A graph is non-chordal iff some vertex subset induces a connected
    2-regular subgraph (a chordless cycle) of length >= 4.
    """
    n = g.num_vars
    for mask in range(1 << n):
        if mask.bit_count() < 4:
            continue
        verts = [v for v in range(n) if (mask >> v) & 1]
        degs = [sum(1 for w in verts if w != v and g.has_edge(v, w)) for v in verts]
        if any(d != 2 for d in degs):
            continue
        if _connected(verts, g.has_edge):
            return False
    return True


def maximal_cliques_brute_force(g: UndirectedGraph) -> set[frozenset[int]]:
    """All maximal cliques by subset enumeration (small graphs only)."""
    n = g.num_vars
    cliques = []
    for size in range(1, n + 1):
        for combo in combinations(range(n), size):
            if all(g.has_edge(a, b) for a, b in combinations(combo, 2)):
                cliques.append(frozenset(combo))
    return {
        c for c in cliques if not any(c < other for other in cliques)
    }


def all_states(num_vars: int) -> np.ndarray:
    """Every +-1 configuration, shape (2**num_vars, num_vars), bit v of the row index."""
    idx = np.arange(1 << num_vars)
    return ((idx[:, None] >> np.arange(num_vars)[None, :]) & 1).astype(np.int8) * 2 - 1


def central_diff(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a flat vector."""
    g = np.zeros_like(x, dtype=np.float64)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def fit_sampler_exactly(mae, imaps, table) -> float:
    """Solve the output head so the network's conditionals are exact.

    For every I-map in ``imaps`` and every variable v, the rows the sampler
    would feed the trunk (inputs masked to v's parents) are collected, and the
    columns of the output head are solved by least squares so the produced
    logits equal the true conditional logits of ``table``.  Root conditionals
    go into the marginal-logit vector.  Works whenever the constraint count
    per variable stays below the trunk width; returns the worst residual.

    This sidesteps training: it manufactures a sampler that IS the target
    distribution under each given I-map, which is what loss-zero and
    order-consistency checks need as a reference point.
    """
    num_vars = mae.cfg.num_vars
    rows_per_var: dict[int, list[np.ndarray]] = {v: [] for v in range(num_vars)}
    targets_per_var: dict[int, list[float]] = {v: [] for v in range(num_vars)}
    for imap in imaps:
        for v in imap.vertices:
            ps = sorted(imap.parents[v])
            if not ps:
                x = np.zeros(num_vars, dtype=np.int8)
                mae.marginals.data[v] = table.conditional_logit(v, x)
                continue
            for c in range(1 << len(ps)):
                row = np.zeros(num_vars)
                x = np.zeros(num_vars, dtype=np.int8)
                for k, p in enumerate(ps):
                    val = 1 if (c >> k) & 1 else -1
                    row[p] = val
                    x[p] = val
                rows_per_var[v].append(row)
                targets_per_var[v].append(table.conditional_logit(v, x))
    worst = 0.0
    for v in range(num_vars):
        if not rows_per_var[v]:
            continue
        inputs = np.unique(np.array(rows_per_var[v]), axis=0)
        # recompute targets aligned with the deduplicated rows
        t = np.empty(len(inputs))
        for i, row in enumerate(inputs):
            t[i] = table.conditional_logit(v, row.astype(np.int8))
        h = mae.trunk_np(inputs)
        design = np.hstack([h, np.ones((len(h), 1))])
        sol, *_ = np.linalg.lstsq(design, t, rcond=None)
        mae.w_out.data[:, v] = sol[:-1]
        mae.b_out.data[v] = sol[-1]
        worst = max(worst, float(np.abs(design @ sol - t).max()))
    return worst


def fit_tables_by_flip_matching(m, imap, max_iter: int = 60):
    """Solve the flip-matching equations for tabular conditionals from scratch.

    Parameterizes one logit per (variable, parent configuration) and drives the
    residual ``[log R(x') - log R(x)] - sum of conditional log-ratios`` to zero
    over every state / flip-site pair with Gauss-Newton (the Jacobian is
    analytic: d log sigma(s*z)/dz = s*sigma(-s*z)).  Nothing about the target's
    conditionals is consulted, so recovering them demonstrates that the zero
    set of the flip residuals pins down the distribution.

    Returns (TabularSampler, worst |residual| at the last evaluation, iterations
    used); callers that need a guarantee should re-score the returned sampler.
    """
    from flipmatch.energy import all_states
    from flipmatch.sampler import TabularSampler

    def sigmoid(t: np.ndarray) -> np.ndarray:
        return 0.5 * (1.0 + np.tanh(0.5 * t))

    num_vars = m.num_vars
    X = all_states(num_vars).astype(np.float64)
    n_states = len(X)
    parents = {v: sorted(imap.parents[v]) for v in imap.vertices}
    sizes = {v: 1 << len(parents[v]) for v in imap.vertices}
    offset, n_params = {}, 0
    for v in imap.vertices:
        offset[v] = n_params
        n_params += sizes[v]

    def column_of(v: int, vals: np.ndarray) -> np.ndarray:
        idx = np.zeros(len(vals), dtype=np.int64)
        for k, p in enumerate(parents[v]):
            idx |= (vals[:, p] > 0).astype(np.int64) << k
        return idx + offset[v]

    log_r = m.log_reward_batch(X.astype(np.int8))
    per_site = []
    for u in imap.vertices:
        flipped = X.copy()
        flipped[:, u] = -X[:, u]
        target = m.log_reward_batch(flipped.astype(np.int8)) - log_r
        terms = [
            (column_of(v, X), column_of(v, flipped), X[:, v].copy(), flipped[:, v].copy())
            for v in [u, *imap.children[u]]
        ]
        per_site.append((target, terms))

    z = np.zeros(n_params)
    worst = np.inf
    for it in range(max_iter):
        resid = np.zeros(n_states * len(per_site))
        jac = np.zeros((n_states * len(per_site), n_params))
        rows = np.arange(n_states)
        for k, (target, terms) in enumerate(per_site):
            block = slice(k * n_states, (k + 1) * n_states)
            ratio = np.zeros(n_states)
            for c_old, c_new, x_old, x_new in terms:
                ratio += np.log(sigmoid(x_new * z[c_new])) - np.log(sigmoid(x_old * z[c_old]))
                np.add.at(jac[block], (rows, c_new), x_new * sigmoid(-x_new * z[c_new]))
                np.add.at(jac[block], (rows, c_old), -x_old * sigmoid(-x_old * z[c_old]))
            resid[block] = target - ratio
        worst = float(np.abs(resid).max())
        if worst < 1e-7:
            break
        step, *_ = np.linalg.lstsq(jac, resid, rcond=None)
        z += step
    tables = {v: sigmoid(z[offset[v] : offset[v] + sizes[v]]) for v in imap.vertices}
    return TabularSampler(imap, tables), worst, it + 1


def exact_em(p, latent, data, rounds: int = 60, m_steps: int = 60, m_lr: float = 0.3):
    """EM with the exact posterior: enumerate latent completions, reweight, ascend.

    The E-step is exact (posterior weights by enumeration over latent
    configurations), so this is the idealized version of amortized EM and a
    quality ceiling for it under the same initialization.
    """
    from flipmatch.energy import logsumexp

    hidden = sorted(latent)
    configs = all_states(len(hidden))
    data = np.asarray(data, dtype=np.int8)
    for _ in range(rounds):
        blocks, weights = [], []
        for row in data:
            rs = np.repeat(row[None, :], len(configs), axis=0)
            rs[:, hidden] = configs
            lw = p.log_reward_batch(rs)
            blocks.append(rs)
            weights.append(np.exp(lw - logsumexp(lw)))
        R = np.concatenate(blocks)
        W = np.concatenate(weights)
        W /= W.sum()
        for _ in range(m_steps):
            p.set_params(p.get_params() + m_lr * p.log_reward_grad_mean(R, weights=W))
    return p
