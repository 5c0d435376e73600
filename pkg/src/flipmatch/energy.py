"""Factorized unnormalized densities over binary (+1/-1) variables.

A model is a list of factors, each owning a small variable scope and returning
a log-value; the unnormalized log-density ("log reward") of a full assignment
is the sum over factors, and the energy is its negation.  Three concrete
families: Ising models (pairwise bilinear + unary factors), factor graphs of
tiny MLPs, and tabular Bayesian networks (normalized by construction, used as
the learnable model in latent-variable training).

Flip ratios — the difference in log reward when one variable changes value —
touch only the factors containing that variable, which is what keeps local
losses local.  For small models ``enumerate_exact`` tabulates the whole
distribution and serves as the ground-truth oracle everywhere.

Values are +1/-1 with 0 reserved for "masked / not instantiated" throughout.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from flipmatch.errors import (
    EmptyBatch,
    PartialAssignment,
    SameValue,
    ShapeMismatch,
    TooLarge,
)
from flipmatch.graph import Dag, UndirectedGraph

__all__ = [
    "Assignment",
    "Factor",
    "LinearFactor",
    "BilinearFactor",
    "MlpFactor",
    "ConditionalFactor",
    "EnergyModel",
    "IsingModel",
    "FactorGraphModel",
    "TabularBayesNetModel",
    "ExactTable",
    "COMPLETED_FACTORS",
    "ZERO_MASKED",
    "enumerate_exact",
    "exact_sample",
    "ebm_param_grad",
    "all_states",
    "random_ising",
    "random_factor_lattice",
    "write_model",
    "read_model",
]

COMPLETED_FACTORS = "completed-factors"
ZERO_MASKED = "zero-masked"

_SIDECAR_MAGIC = b"DPGM"
_SIDECAR_VERSION = 1


def logsumexp(a: np.ndarray) -> float:
    m = float(np.max(a))
    return m + float(np.log(np.sum(np.exp(a - m))))


def all_states(num_vars: int) -> np.ndarray:
    """All 2**num_vars sign configurations; bit v of the row index gives x_v."""
    if num_vars > 20:
        raise TooLarge(f"refusing to enumerate 2^{num_vars} states")
    idx = np.arange(1 << num_vars, dtype=np.int64)
    return ((idx[:, None] >> np.arange(num_vars)[None, :]) & 1).astype(np.int8) * 2 - 1


def state_index(x: np.ndarray) -> int:
    """Inverse of all_states row construction."""
    bits = (np.asarray(x) > 0).astype(np.int64)
    return int(bits @ (1 << np.arange(len(bits), dtype=np.int64)))


@dataclass
class Assignment:
    """A full or partial configuration; 0 marks uninstantiated variables."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.int8)
        if self.values.ndim != 1:
            raise ShapeMismatch("assignment values must be a vector")
        bad = np.setdiff1d(np.unique(self.values), [-1, 0, 1])
        if bad.size:
            raise ValueError(f"assignment entries must be -1, 0, or +1, got {bad}")

    @classmethod
    def empty(cls, num_vars: int) -> "Assignment":
        return cls(np.zeros(num_vars, dtype=np.int8))

    @property
    def num_vars(self) -> int:
        return len(self.values)

    @property
    def mask(self) -> np.ndarray:
        return self.values != 0

    @property
    def is_full(self) -> bool:
        return bool(np.all(self.values != 0))

    def instantiated(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.flatnonzero(self.values))

    def with_value(self, v: int, value: int) -> "Assignment":
        out = self.values.copy()
        out[v] = value
        return Assignment(out)


def _values_of(x) -> np.ndarray:
    if isinstance(x, Assignment):
        return x.values
    return np.asarray(x, dtype=np.int8)


def _batch_values(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        arr = batch
    else:
        rows = [_values_of(x) for x in batch]
        if not rows:
            raise EmptyBatch("no assignments in batch")
        arr = np.stack(rows)
    if arr.ndim != 2:
        raise ShapeMismatch("batch must be 2-d (rows of assignments)")
    if arr.shape[0] == 0:
        raise EmptyBatch("no assignments in batch")
    return arr


# ---------------------------------------------------------------------------
# factors


class Factor:
    """One term of the factorization: a scope and a batched log-value."""

    scope: tuple[int, ...]

    def log_value(self, vals: np.ndarray) -> np.ndarray:
        """Log factor value for rows of scope-values, shape (N, |scope|) -> (N,)."""
        raise NotImplementedError

    def num_params(self) -> int:
        return 0

    def get_params(self) -> np.ndarray:
        return np.zeros(0)

    def set_params(self, flat: np.ndarray) -> None:
        if flat.size:
            raise ShapeMismatch("factor has no parameters")

    def log_value_grad(self, vals: np.ndarray) -> np.ndarray:
        """Per-row parameter gradient of log_value, shape (N, num_params)."""
        return np.zeros((vals.shape[0], 0))


@dataclass
class LinearFactor(Factor):
    """log phi = weight * x_v."""

    var: int
    weight: float

    @property
    def scope(self) -> tuple[int, ...]:
        return (self.var,)

    def log_value(self, vals: np.ndarray) -> np.ndarray:
        return self.weight * vals[:, 0].astype(np.float64)


@dataclass
class BilinearFactor(Factor):
    """log phi = weight * x_u * x_v."""

    u: int
    v: int
    weight: float

    @property
    def scope(self) -> tuple[int, ...]:
        return (self.u, self.v)

    def log_value(self, vals: np.ndarray) -> np.ndarray:
        return self.weight * (vals[:, 0] * vals[:, 1]).astype(np.float64)


class MlpFactor(Factor):
    """A one-hidden-layer perceptron producing a scalar log factor value.

    Hidden width 10, tanh activation; masked inputs evaluate literally at 0.
    """

    HIDDEN = 10

    def __init__(self, scope: Sequence[int], w1, b1, w2, b2) -> None:
        if len(scope) > 4:
            raise ValueError("factor scopes are limited to 4 variables")
        self.scope = tuple(scope)
        self.w1 = np.asarray(w1, dtype=np.float64)  # (HIDDEN, arity)
        self.b1 = np.asarray(b1, dtype=np.float64)  # (HIDDEN,)
        self.w2 = np.asarray(w2, dtype=np.float64)  # (HIDDEN,)
        self.b2 = float(b2)
        if self.w1.shape != (self.HIDDEN, len(self.scope)):
            raise ShapeMismatch("w1 shape does not match scope arity")

    @classmethod
    def random(cls, scope: Sequence[int], rng: np.random.Generator, std: float = 0.5) -> "MlpFactor":
        a = len(scope)
        return cls(
            scope,
            rng.normal(0.0, std, size=(cls.HIDDEN, a)),
            rng.normal(0.0, std, size=cls.HIDDEN),
            rng.normal(0.0, std, size=cls.HIDDEN),
            rng.normal(0.0, std),
        )

    def log_value(self, vals: np.ndarray) -> np.ndarray:
        h = np.tanh(vals.astype(np.float64) @ self.w1.T + self.b1)
        return h @ self.w2 + self.b2

    def num_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + 1

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    def set_params(self, flat: np.ndarray) -> None:
        if flat.size != self.num_params():
            raise ShapeMismatch("parameter vector size mismatch")
        k = self.w1.size
        self.w1 = flat[:k].reshape(self.w1.shape).copy()
        self.b1 = flat[k : k + self.HIDDEN].copy()
        self.w2 = flat[k + self.HIDDEN : k + 2 * self.HIDDEN].copy()
        self.b2 = float(flat[-1])

    def log_value_grad(self, vals: np.ndarray) -> np.ndarray:
        z = vals.astype(np.float64)
        t = np.tanh(z @ self.w1.T + self.b1)  # (N, H)
        dt = (1.0 - t * t) * self.w2  # (N, H): d out / d preactivation
        dw1 = dt[:, :, None] * z[:, None, :]  # (N, H, arity)
        n = vals.shape[0]
        return np.concatenate(
            [dw1.reshape(n, -1), dt, t, np.ones((n, 1))], axis=1
        )


class ConditionalFactor(Factor):
    """log phi = log q(x_child | x_parents) via a logit table over parent configs.

    Scope order is (*parents, child).  On masked (zero) inputs the log-value is
    the multilinear extension of its +-1 table, i.e. the average over uniform
    completions of the masked scope variables.
    """

    def __init__(self, child: int, parents: Sequence[int], logits: np.ndarray) -> None:
        self.child = child
        self.parents = tuple(parents)
        self.scope = self.parents + (child,)
        self.logits = np.asarray(logits, dtype=np.float64)
        if self.logits.shape != (1 << len(self.parents),):
            raise ShapeMismatch("logit table must have one entry per parent config")

    @staticmethod
    def _log_sigmoid(z: np.ndarray) -> np.ndarray:
        return np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))

    def _config_index(self, parent_vals: np.ndarray) -> np.ndarray:
        if not self.parents:
            return np.zeros(parent_vals.shape[0], dtype=np.int64)
        bits = (parent_vals > 0).astype(np.int64)
        return bits @ (1 << np.arange(len(self.parents), dtype=np.int64))

    def log_value(self, vals: np.ndarray) -> np.ndarray:
        vals = np.asarray(vals)
        if np.all(vals != 0):
            z = self.logits[self._config_index(vals[:, :-1])]
            return self._log_sigmoid(vals[:, -1].astype(np.float64) * z)
        return self._multilinear(vals.astype(np.float64))

    def _multilinear(self, vals: np.ndarray) -> np.ndarray:
        # exact interpolation of the +-1 table, evaluated at rows with zeros
        a = len(self.scope)
        corners = all_states(a).astype(np.float64)  # (2^a, a)
        table = self.log_value(corners.astype(np.int8))  # recurse: corners are full
        out = np.zeros(vals.shape[0])
        for s, val in zip(corners, table):
            # indicator polynomial of corner s: prod (1 + s_i x_i) / 2
            out += val * np.prod((1.0 + s * vals) / 2.0, axis=1)
        return out

    def num_params(self) -> int:
        return self.logits.size

    def get_params(self) -> np.ndarray:
        return self.logits.copy()

    def set_params(self, flat: np.ndarray) -> None:
        if flat.size != self.logits.size:
            raise ShapeMismatch("parameter vector size mismatch")
        self.logits = flat.astype(np.float64).copy()

    def log_value_grad(self, vals: np.ndarray) -> np.ndarray:
        vals = np.asarray(vals)
        idx = self._config_index(vals[:, :-1])
        s = vals[:, -1].astype(np.float64)
        z = self.logits[idx]
        # d log sigma(s z) / d z = s * sigma(-s z)
        dz = s / (1.0 + np.exp(s * z))
        out = np.zeros((vals.shape[0], self.logits.size))
        out[np.arange(vals.shape[0]), idx] = dz
        return out


# ---------------------------------------------------------------------------
# models


class EnergyModel:
    """A factorized unnormalized density: log R(x) = sum_k log phi_k(x_{S_k})."""

    kind = "factor_graph"

    def __init__(self, num_vars: int, factors: Sequence[Factor]) -> None:
        self.num_vars = num_vars
        self.factors = list(factors)
        touching: list[list[int]] = [[] for _ in range(num_vars)]
        edges = set()
        for k, f in enumerate(self.factors):
            for v in f.scope:
                if not 0 <= v < num_vars:
                    raise ValueError(f"factor scope vertex {v} out of range")
                touching[v].append(k)
            for i, a in enumerate(f.scope):
                for b in f.scope[i + 1 :]:
                    if a != b:
                        edges.add((min(a, b), max(a, b)))
        self._touching = tuple(tuple(t) for t in touching)
        self.graph = UndirectedGraph(num_vars, frozenset(edges))

    # -- evaluation ---------------------------------------------------------

    def log_reward(self, x) -> float:
        vals = _values_of(x)
        if np.any(vals == 0):
            raise PartialAssignment("log reward needs a fully instantiated assignment")
        return float(self.log_reward_batch(vals[None, :])[0])

    def log_reward_batch(self, X) -> np.ndarray:
        X = _batch_values(X)
        out = np.zeros(X.shape[0])
        for f in self.factors:
            out += f.log_value(X[:, f.scope])
        return out

    def energy(self, x) -> float:
        return -self.log_reward(x)

    def factors_touching(self, u: int) -> tuple[int, ...]:
        return self._touching[u]

    def delta_log_reward(self, x, u: int, xu_new: int) -> float:
        """log p(x) - log p(x') where x' is x with x_u set to xu_new.

        Touches only the factors containing u, so the cost is local.
        """
        vals = _values_of(x)
        if vals[u] == xu_new:
            raise SameValue(f"variable {u} already has value {xu_new}")
        return float(self.delta_log_reward_batch(vals[None, :], np.array([u]), np.array([xu_new]))[0])

    def delta_log_reward_batch(self, X, us, new_vals) -> np.ndarray:
        X = _batch_values(X)
        us = np.asarray(us)
        new_vals = np.asarray(new_vals, dtype=np.int8)
        out = np.zeros(X.shape[0])
        for u in np.unique(us):
            rows = np.flatnonzero(us == u)
            old_block = X[rows]
            new_block = old_block.copy()
            new_block[:, u] = new_vals[rows]
            for k in self._touching[u]:
                f = self.factors[k]
                out[rows] += f.log_value(old_block[:, f.scope]) - f.log_value(new_block[:, f.scope])
        return out

    def local_flip_logits(self, u: int, X: np.ndarray) -> np.ndarray:
        """log R(x with x_u=+1) - log R(x with x_u=-1) per row; the Gibbs logit."""
        X = _batch_values(X)
        plus = X.copy()
        plus[:, u] = 1
        minus = X.copy()
        minus[:, u] = -1
        out = np.zeros(X.shape[0])
        for k in self._touching[u]:
            f = self.factors[k]
            out += f.log_value(plus[:, f.scope]) - f.log_value(minus[:, f.scope])
        return out

    def partial_reward(self, x, mode: str = ZERO_MASKED) -> float:
        return float(self.partial_reward_batch(_values_of(x)[None, :], mode)[0])

    def partial_reward_batch(self, X, mode: str = ZERO_MASKED) -> np.ndarray:
        """Log reward of partial assignments.

        completed-factors: sum only factors whose whole scope is instantiated.
        zero-masked: evaluate every factor with 0 plugged in for masked inputs.
        Both agree with the full log reward on full assignments.
        """
        X = _batch_values(X)
        out = np.zeros(X.shape[0])
        if mode == ZERO_MASKED:
            for f in self.factors:
                out += f.log_value(X[:, f.scope])
            return out
        if mode == COMPLETED_FACTORS:
            for f in self.factors:
                sel = np.flatnonzero(np.all(X[:, f.scope] != 0, axis=1))
                if sel.size:
                    out[sel] += f.log_value(X[np.ix_(sel, f.scope)])
            return out
        raise ValueError(f"unknown partial-reward mode: {mode!r}")

    # -- parameter learning --------------------------------------------------

    def num_params(self) -> int:
        return sum(f.num_params() for f in self.factors)

    def get_params(self) -> np.ndarray:
        parts = [f.get_params() for f in self.factors]
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params():
            raise ShapeMismatch("parameter vector size mismatch")
        k = 0
        for f in self.factors:
            n = f.num_params()
            f.set_params(flat[k : k + n])
            k += n

    def log_reward_grad_mean(self, X, weights=None) -> np.ndarray:
        """Weighted mean over rows of the parameter gradient of log R."""
        X = _batch_values(X)
        if weights is None:
            weights = np.full(X.shape[0], 1.0 / X.shape[0])
        else:
            weights = np.asarray(weights, dtype=np.float64)
        parts = []
        for f in self.factors:
            if f.num_params() == 0:
                continue
            g = f.log_value_grad(X[:, f.scope])  # (N, P_k)
            parts.append(weights @ g)
        return np.concatenate(parts) if parts else np.zeros(0)


class IsingModel(EnergyModel):
    """E(x) = sigma * (-x^T J x - x^T b), J symmetric with zero diagonal.

    Factorized as one bilinear factor of weight 2*sigma*J_uv per edge plus one
    unary factor of weight sigma*b_v per variable, so log R = -E exactly.
    """

    kind = "ising"

    def __init__(self, J: np.ndarray, b: np.ndarray, sigma: float = 0.2) -> None:
        J = np.asarray(J, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        n = len(b)
        if J.shape != (n, n):
            raise ShapeMismatch("J must be square and match b")
        if not np.allclose(J, J.T):
            raise ValueError("J must be symmetric")
        if np.any(np.diag(J) != 0):
            raise ValueError("J must have zero diagonal")
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.J = J
        self.b = b
        self.sigma = float(sigma)
        self.edges = tuple(
            (i, j) for i in range(n) for j in range(i + 1, n) if J[i, j] != 0.0
        )
        factors: list[Factor] = [
            BilinearFactor(u, v, 2.0 * sigma * J[u, v]) for u, v in self.edges
        ]
        factors += [LinearFactor(v, sigma * b[v]) for v in range(n)]
        super().__init__(n, factors)

    def _rebuild_factor_weights(self) -> None:
        k = 0
        for u, v in self.edges:
            self.factors[k].weight = 2.0 * self.sigma * self.J[u, v]
            k += 1
        for v in range(self.num_vars):
            self.factors[k].weight = self.sigma * self.b[v]
            k += 1

    def log_reward_batch(self, X) -> np.ndarray:
        X = _batch_values(X).astype(np.float64)
        return self.sigma * (np.einsum("ni,ni->n", X @ self.J, X) + X @ self.b)

    def local_flip_logits(self, u: int, X: np.ndarray) -> np.ndarray:
        X = _batch_values(X).astype(np.float64)
        field = X @ self.J[u] - self.J[u, u] * X[:, u]  # J_uu = 0 anyway
        return self.sigma * (4.0 * field + 2.0 * self.b[u])

    def delta_log_reward_batch(self, X, us, new_vals) -> np.ndarray:
        X = _batch_values(X)
        us = np.asarray(us)
        Xf = X.astype(np.float64)
        field = np.einsum("nj,nj->n", Xf, self.J[us])
        diff = (X[np.arange(X.shape[0]), us] - np.asarray(new_vals)).astype(np.float64)
        return self.sigma * diff * (2.0 * field + self.b[us])

    # learnable view: couplings on the edge support, then biases
    def num_params(self) -> int:
        return len(self.edges) + self.num_vars

    def get_params(self) -> np.ndarray:
        coup = np.array([self.J[u, v] for u, v in self.edges])
        return np.concatenate([coup, self.b])

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params():
            raise ShapeMismatch("parameter vector size mismatch")
        for k, (u, v) in enumerate(self.edges):
            self.J[u, v] = self.J[v, u] = flat[k]
        self.b = flat[len(self.edges) :].copy()
        self._rebuild_factor_weights()

    def log_reward_grad_mean(self, X, weights=None) -> np.ndarray:
        X = _batch_values(X).astype(np.float64)
        if weights is None:
            weights = np.full(X.shape[0], 1.0 / X.shape[0])
        else:
            weights = np.asarray(weights, dtype=np.float64)
        out = np.empty(self.num_params())
        for k, (u, v) in enumerate(self.edges):
            out[k] = 2.0 * self.sigma * (weights @ (X[:, u] * X[:, v]))
        out[len(self.edges) :] = self.sigma * (weights @ X)
        return out


class FactorGraphModel(EnergyModel):
    """Energy model whose factors are tiny MLPs over small scopes."""

    kind = "factor_graph"


class TabularBayesNetModel(EnergyModel):
    """A Bayesian network with one logit table per variable.

    Normalized by construction: log R(x) = log p(x), log Z = 0.  Serves as the
    learnable model for latent-variable training, where its per-variable
    conditional gradients are exact.
    """

    kind = "bayesnet"

    def __init__(self, dag: Dag, tables: dict[int, np.ndarray] | None = None) -> None:
        self.dag = dag
        n = dag.num_vars
        if sorted(dag.topo_order) != list(range(n)):
            raise ValueError("the network must cover every variable")
        factors = []
        for v in dag.topo_order:
            parents = dag.parent_map[v]
            logits = (
                np.asarray(tables[v], dtype=np.float64)
                if tables is not None
                else np.zeros(1 << len(parents))
            )
            factors.append(ConditionalFactor(v, parents, logits))
        factors.sort(key=lambda f: f.child)
        super().__init__(n, factors)

    def factor_for(self, v: int) -> ConditionalFactor:
        return self.factors[v]  # sorted by child at construction

    def sample(self, n: int, seed) -> np.ndarray:
        """Exact ancestral samples (the network is normalized)."""
        rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
        X = np.zeros((n, self.num_vars), dtype=np.int8)
        for v in self.dag.topo_order:
            f = self.factor_for(v)
            z = f.logits[f._config_index(X[:, f.parents])]
            p_plus = 1.0 / (1.0 + np.exp(-z))
            X[:, v] = np.where(rng.random(n) < p_plus, 1, -1).astype(np.int8)
        return X


def random_ising(
    g: UndirectedGraph, sigma: float = 0.2, seed: int | np.random.Generator = 0
) -> IsingModel:
    """Ising model on a graph with couplings and biases drawn from {-1, +1}."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = g.num_vars
    J = np.zeros((n, n))
    for u, v in sorted(g.edges):
        J[u, v] = J[v, u] = rng.choice([-1.0, 1.0])
    b = rng.choice([-1.0, 1.0], size=n)
    return IsingModel(J, b, sigma)


def random_factor_lattice(
    rows: int, cols: int, seed: int | np.random.Generator = 0, init_std: float = 0.5
) -> FactorGraphModel:
    """MLP factors over every 2x2 plaquette of a rows x cols grid."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    factors = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            v = r * cols + c
            scope = (v, v + 1, v + cols, v + cols + 1)
            factors.append(MlpFactor.random(scope, rng, init_std))
    return FactorGraphModel(rows * cols, factors)


# ---------------------------------------------------------------------------
# exact oracle


@dataclass
class ExactTable:
    """Exhaustive enumeration of a small model: log Z, marginals, conditionals."""

    num_vars: int
    log_z: float
    full_probs: np.ndarray  # indexed by state_index
    marginals: np.ndarray  # P(x_v = +1)

    def states(self) -> np.ndarray:
        return all_states(self.num_vars)

    def state_prob(self, x) -> float:
        return float(self.full_probs[state_index(_values_of(x))])

    def entropy(self) -> float:
        p = self.full_probs[self.full_probs > 0]
        return float(-np.sum(p * np.log(p)))

    def conditional(self, v: int, x) -> float:
        """P(x_v = +1 | instantiated variables of x other than v)."""
        vals = _values_of(x)
        states = self.states()
        cond = np.ones(len(states), dtype=bool)
        for w in np.flatnonzero(vals):
            if w != v:
                cond &= states[:, w] == vals[w]
        total = float(self.full_probs[cond].sum())
        plus = float(self.full_probs[cond & (states[:, v] == 1)].sum())
        return plus / total

    def conditional_logit(self, v: int, x) -> float:
        p = self.conditional(v, x)
        return float(np.log(p) - np.log1p(-p))

    def sample_matrix(self, n: int, seed) -> np.ndarray:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        idx = rng.choice(len(self.full_probs), size=n, p=self.full_probs)
        states = self.states()
        return states[idx]

    def tv_distance(self, other_probs: np.ndarray) -> float:
        return 0.5 * float(np.abs(self.full_probs - other_probs).sum())


def enumerate_exact(m: EnergyModel) -> ExactTable:
    """Tabulate the distribution by summing over all 2^|V| states."""
    if m.num_vars > 20:
        raise TooLarge(f"enumeration capped at 20 variables, model has {m.num_vars}")
    states = all_states(m.num_vars)
    logw = m.log_reward_batch(states)
    log_z = logsumexp(logw)
    probs = np.exp(logw - log_z)
    marginals = probs @ (states == 1)
    return ExactTable(m.num_vars, log_z, probs, marginals)


def exact_sample(t: ExactTable, n: int, seed) -> list[Assignment]:
    """I.i.d. exact samples as Assignment objects (empty list for n = 0)."""
    if n == 0:
        return []
    return [Assignment(row) for row in t.sample_matrix(n, seed)]


def ebm_param_grad(m: EnergyModel, data, model_samples, model_weights=None) -> np.ndarray:
    """Positive phase minus negative phase: the log-likelihood gradient estimate.

    ``model_weights`` lets the negative phase be an exact expectation (pass all
    states with their probabilities) instead of a Monte-Carlo batch.
    """
    pos = _batch_values(data)
    neg = _batch_values(model_samples)
    if np.any(pos == 0) or np.any(neg == 0):
        raise PartialAssignment("EBM gradients need fully instantiated batches")
    return m.log_reward_grad_mean(pos) - m.log_reward_grad_mean(neg, model_weights)


# ---------------------------------------------------------------------------
# model files: JSON description + binary sidecar for MLP weights


def _write_sidecar(path: str, flat: np.ndarray) -> None:
    arr = np.asarray(flat, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQ", _SIDECAR_MAGIC, _SIDECAR_VERSION, arr.size))
        fh.write(arr.tobytes())


def _read_sidecar(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        magic, version, count = struct.unpack("<4sIQ", header)
        if magic != _SIDECAR_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != _SIDECAR_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        data = np.frombuffer(fh.read(count * 4), dtype="<f4")
        if data.size != count:
            raise ValueError(f"{path}: truncated payload")
    return data.astype(np.float64)


def write_model(m: EnergyModel, path: str) -> None:
    """Write the JSON description; MLP weights go to a '<path>.bin' sidecar."""
    if isinstance(m, IsingModel):
        doc = {
            "kind": "ising",
            "num_vars": m.num_vars,
            "sigma": m.sigma,
            "edges": [[int(u), int(v), float(m.J[u, v])] for u, v in m.edges],
            "bias": [float(x) for x in m.b],
        }
    elif isinstance(m, TabularBayesNetModel):
        doc = {
            "kind": "bayesnet",
            "num_vars": m.num_vars,
            "topo_order": [int(v) for v in m.dag.topo_order],
            "arcs": [[int(a), int(b)] for a, b in sorted(m.dag.arcs)],
            "tables": {str(v): [float(z) for z in m.factor_for(v).logits] for v in range(m.num_vars)},
        }
    elif isinstance(m, FactorGraphModel):
        sidecar = os.path.basename(path) + ".bin"
        doc = {
            "kind": "factor_graph",
            "num_vars": m.num_vars,
            "scopes": [[int(v) for v in f.scope] for f in m.factors],
            "hidden": MlpFactor.HIDDEN,
            "weights_file": sidecar,
        }
        _write_sidecar(os.path.join(os.path.dirname(path) or ".", sidecar), m.get_params())
    else:
        raise ValueError(f"cannot serialize model kind {type(m).__name__}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_model(path: str) -> EnergyModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    kind = doc.get("kind")
    if kind == "ising":
        n = doc["num_vars"]
        J = np.zeros((n, n))
        for u, v, w in doc["edges"]:
            J[u, v] = J[v, u] = w
        return IsingModel(J, np.asarray(doc["bias"], dtype=np.float64), doc["sigma"])
    if kind == "bayesnet":
        arcs = frozenset((a, b) for a, b in doc["arcs"])
        dag = Dag(doc["num_vars"], arcs, tuple(doc["topo_order"]))
        tables = {int(v): np.asarray(t, dtype=np.float64) for v, t in doc["tables"].items()}
        return TabularBayesNetModel(dag, tables)
    if kind == "factor_graph":
        factors = []
        h = doc["hidden"]
        if h != MlpFactor.HIDDEN:
            raise ValueError(f"unsupported hidden width {h}")
        for scope in doc["scopes"]:
            a = len(scope)
            factors.append(
                MlpFactor(scope, np.zeros((h, a)), np.zeros(h), np.zeros(h), 0.0)
            )
        m = FactorGraphModel(doc["num_vars"], factors)
        weights = _read_sidecar(os.path.join(os.path.dirname(path) or ".", doc["weights_file"]))
        m.set_params(weights)
        return m
    raise ValueError(f"{path}: unknown model kind {kind!r}")
