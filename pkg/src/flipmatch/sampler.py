"""Ancestral samplers over directed orientations of a graphical model.

The amortized sampler evaluates and draws one variable at a time along the
topological order of an I-map, feeding the network an input masked down to
exactly the variable's parents.  Because the mask is the only thing that
encodes the order, a single set of weights can serve every I-map of the same
graph, including the small local maps used for partial sampling.

Also here: exploration policies (tempered and epsilon-uniform), a tabular
sampler with explicit conditional tables (handy as an exact reference), and a
systematic-scan Gibbs chain with optional annealing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flipmatch.energy import Assignment, EnergyModel, ExactTable, _values_of
from flipmatch.errors import (
    ConfigError,
    MissingParent,
    PartialAssignment,
    ShapeMismatch,
)
from flipmatch.graph import Imap
from flipmatch.nn import tape
from flipmatch.nn.mae import MaeParams
from flipmatch.nn.tape import Tensor

__all__ = [
    "Policy",
    "AmortizedSampler",
    "TabularSampler",
    "AnnealSchedule",
    "gibbs_chain",
    "masked_parent_rows",
]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class Policy:
    """How a step's sampling distribution is derived from the model's logits.

    ``on-policy`` draws from the model itself; ``tempered`` divides logits by
    a temperature; ``eps-uniform`` mixes the on-policy step distribution with
    a uniform coin, p = (1-eps) * p_on + eps * p_uniform.  Policies only shape
    what gets drawn — log-probabilities are always reported under the
    unmodified model.
    """

    kind: str = "on-policy"
    temperature: float = 1.0
    eps: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("on-policy", "tempered", "eps-uniform"):
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.eps <= 1.0:
            raise ConfigError("eps must lie in [0, 1]")

    @classmethod
    def on_policy(cls) -> "Policy":
        return cls()

    @classmethod
    def tempered(cls, temperature: float) -> "Policy":
        return cls(kind="tempered", temperature=temperature)

    @classmethod
    def eps_uniform(cls, eps: float) -> "Policy":
        return cls(kind="eps-uniform", eps=eps)

    def plus_probability(self, logits: np.ndarray) -> np.ndarray:
        """Probability of drawing +1 at a step with the given model logits."""
        if self.kind == "tempered":
            return _sigmoid(np.asarray(logits) / self.temperature)
        p_on = _sigmoid(logits)
        if self.kind == "eps-uniform":
            return (1.0 - self.eps) * p_on + self.eps * 0.5
        return p_on


def masked_parent_rows(imap: Imap, X: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Rows of X reduced to the parent sets of the given variables.

    Row i keeps X[i, p] for p in parents(vs[i]) and zeroes everything else —
    the network-input encoding of "condition exactly on the parents".
    """
    X = np.asarray(X, dtype=np.float64)
    vs = np.asarray(vs)
    out = np.zeros_like(X)
    for v in np.unique(vs):
        ps = list(imap.parents[int(v)])
        if ps:
            rows = vs == v
            out[np.ix_(rows, ps)] = X[np.ix_(rows, ps)]
    return out


class AmortizedSampler:
    """A network-backed sampler usable under any I-map of its graph."""

    def __init__(self, params: MaeParams) -> None:
        self.params = params

    @property
    def num_vars(self) -> int:
        return self.params.cfg.num_vars

    @property
    def root_marginals(self) -> Tensor:
        """The learnable logits used when a variable has no parents."""
        return self.params.marginals

    # -- input plumbing -------------------------------------------------------

    def _attach_condition(self, rows: np.ndarray, cond) -> np.ndarray:
        n_cond = len(self.params.cfg.cond_vars)
        if n_cond == 0:
            if cond is not None:
                raise ShapeMismatch("this sampler has no conditioning block")
            return rows
        if cond is None:
            raise ShapeMismatch(f"{n_cond} conditioning values required")
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (rows.shape[0], n_cond))
        if cond.shape != (rows.shape[0], n_cond):
            raise ShapeMismatch(
                f"conditioning block must be ({rows.shape[0]}, {n_cond}), got {cond.shape}"
            )
        return np.hstack([rows, cond])

    # -- conditional evaluation ----------------------------------------------

    def logq_rows(self, inputs: np.ndarray, vs, signs) -> Tensor:
        """Taped log q(sign_i at var vs_i | masked row i) for a batch of rows."""
        logits = self.params.masked_logits(inputs)
        picked = tape.gather_cols(logits, np.asarray(vs, dtype=np.int64))
        return tape.log_sigmoid(tape.mul(picked, np.asarray(signs, dtype=np.float64)))

    def logq_rows_np(self, inputs: np.ndarray, vs, signs) -> np.ndarray:
        """Gradient-free twin of logq_rows."""
        logits = self.params.masked_logits_np(inputs)
        vs = np.asarray(vs, dtype=np.int64)
        picked = logits[np.arange(len(vs)), vs]
        return _log_sigmoid(np.asarray(signs, dtype=np.float64) * picked)

    def conditional_logprob(self, imap: Imap, v: int, x, cond=None) -> float:
        """log q(x_v | x_parents(v)) under the given I-map."""
        vals = _values_of(x)
        missing = [p for p in imap.parents[v] if vals[p] == 0]
        if missing:
            raise MissingParent(f"variable {v} needs parents {missing} instantiated")
        if vals[v] == 0:
            raise PartialAssignment(f"variable {v} itself carries no value")
        row = masked_parent_rows(imap, vals[None, :].astype(np.float64), np.array([v]))
        inputs = self._attach_condition(row, cond)
        return float(self.logq_rows_np(inputs, [v], [vals[v]])[0])

    # -- sampling --------------------------------------------------------------

    def _run_order(
        self,
        imap: Imap,
        policy: Policy,
        n: int,
        rng: np.random.Generator,
        cond,
    ) -> tuple[np.ndarray, np.ndarray]:
        X = np.zeros((n, self.num_vars), dtype=np.float64)
        logq = np.zeros(n)
        for v in imap.topo_order:
            ps = list(imap.parents[v])
            row = np.zeros_like(X)
            if ps:
                row[:, ps] = X[:, ps]
            inputs = self._attach_condition(row, cond)
            logits = self.params.masked_logits_np(inputs)[:, v]
            draws = np.where(rng.random(n) < policy.plus_probability(logits), 1.0, -1.0)
            X[:, v] = draws
            logq += _log_sigmoid(draws * logits)
        return X.astype(np.int8), logq

    def ancestral_sample(
        self, imap: Imap, policy: Policy, n: int, seed, cond=None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Draw n full samples; returns (states, model log q of each draw)."""
        if len(imap.vertices) != self.num_vars:
            raise ConfigError(
                "ancestral sampling needs an I-map covering every variable; "
                "use partial_sample for local maps"
            )
        return self._run_order(imap, policy, n, _as_rng(seed), cond)

    def partial_sample(self, sub: Imap, policy: Policy, seed, cond=None) -> Assignment:
        """One draw instantiating exactly the variables the local map covers."""
        X, _ = self._run_order(sub, policy, 1, _as_rng(seed), cond)
        return Assignment(X[0])

    def partial_sample_batch(
        self, sub: Imap, policy: Policy, n: int, seed, cond=None
    ) -> np.ndarray:
        X, _ = self._run_order(sub, policy, n, _as_rng(seed), cond)
        return X

    # -- scoring ----------------------------------------------------------------

    def log_prob_batch(self, imap: Imap, X, cond=None) -> np.ndarray:
        """Sum of conditional log-probabilities along the order, per row."""
        vals = np.asarray(X, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[None, :]
        if np.any(vals[:, list(imap.vertices)] == 0):
            raise PartialAssignment("log_prob needs fully instantiated samples")
        n = vals.shape[0]
        logq = np.zeros(n)
        for v in imap.topo_order:
            row = np.zeros_like(vals)
            ps = list(imap.parents[v])
            if ps:
                row[:, ps] = vals[:, ps]
            inputs = self._attach_condition(row, cond)
            logits = self.params.masked_logits_np(inputs)[:, v]
            logq += _log_sigmoid(vals[:, v] * logits)
        return logq

    def log_prob(self, imap: Imap, x, cond=None) -> float:
        return float(self.log_prob_batch(imap, _values_of(x)[None, :], cond)[0])


class TabularSampler:
    """Explicit conditional tables over one I-map; exact and parameter-free.

    ``tables[v]`` holds P(x_v = +1 | parent configuration), indexed by the
    little-endian bit pattern of the (sorted) parent values, bit set for +1.
    """

    def __init__(self, imap: Imap, tables: dict[int, np.ndarray]) -> None:
        self.imap = imap
        self.tables = tables

    @classmethod
    def from_exact_table(cls, table: ExactTable, imap: Imap) -> "TabularSampler":
        """The conditionals of an exactly enumerated distribution under imap."""
        states = table.states()
        tables: dict[int, np.ndarray] = {}
        for v in imap.vertices:
            ps = sorted(imap.parents[v])
            t = np.zeros(1 << len(ps))
            for c in range(1 << len(ps)):
                match = np.ones(len(states), dtype=bool)
                for k, p in enumerate(ps):
                    want = 1 if (c >> k) & 1 else -1
                    match &= states[:, p] == want
                total = table.full_probs[match].sum()
                plus = table.full_probs[match & (states[:, v] == 1)].sum()
                t[c] = plus / total
            tables[v] = t
        return cls(imap, tables)

    def _config_indices(self, v: int, vals: np.ndarray) -> np.ndarray:
        ps = sorted(self.imap.parents[v])
        idx = np.zeros(vals.shape[0], dtype=np.int64)
        for k, p in enumerate(ps):
            idx |= (vals[:, p] > 0).astype(np.int64) << k
        return idx

    def logq_rows(self, inputs: np.ndarray, vs, signs) -> Tensor:
        return tape.const(self.logq_rows_np(inputs, vs, signs))

    def logq_rows_np(self, inputs: np.ndarray, vs, signs) -> np.ndarray:
        inputs = np.asarray(inputs, dtype=np.float64)
        vs = np.asarray(vs)
        signs = np.asarray(signs)
        out = np.zeros(len(vs))
        for v in np.unique(vs):
            rows = np.flatnonzero(vs == v)
            p_plus = self.tables[int(v)][self._config_indices(int(v), inputs[rows])]
            p = np.where(signs[rows] > 0, p_plus, 1.0 - p_plus)
            out[rows] = np.log(p)
        return out

    def conditional_logprob(self, v: int, x) -> float:
        vals = _values_of(x)
        missing = [p for p in self.imap.parents[v] if vals[p] == 0]
        if missing:
            raise MissingParent(f"variable {v} needs parents {missing} instantiated")
        if vals[v] == 0:
            raise PartialAssignment(f"variable {v} itself carries no value")
        row = vals[None, :].astype(np.float64)
        return float(self.logq_rows_np(row, [v], [vals[v]])[0])

    def log_prob_batch(self, X) -> np.ndarray:
        vals = np.asarray(X, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[None, :]
        if np.any(vals[:, list(self.imap.vertices)] == 0):
            raise PartialAssignment("log_prob needs fully instantiated samples")
        out = np.zeros(vals.shape[0])
        for v in self.imap.topo_order:
            p_plus = self.tables[v][self._config_indices(v, vals)]
            p = np.where(vals[:, v] > 0, p_plus, 1.0 - p_plus)
            out += np.log(p)
        return out

    def log_prob(self, x) -> float:
        return float(self.log_prob_batch(_values_of(x)[None, :])[0])

    def ancestral_sample(self, policy: Policy, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
        rng = _as_rng(seed)
        num_vars = self.imap.num_vars
        X = np.zeros((n, num_vars), dtype=np.float64)
        logq = np.zeros(n)
        for v in self.imap.topo_order:
            p_plus = self.tables[v][self._config_indices(v, X)]
            logits = np.log(p_plus) - np.log1p(-p_plus)
            draws = np.where(rng.random(n) < policy.plus_probability(logits), 1.0, -1.0)
            X[:, v] = draws
            logq += np.log(np.where(draws > 0, p_plus, 1.0 - p_plus))
        return X.astype(np.int8), logq


# ---------------------------------------------------------------------------
# Gibbs


@dataclass(frozen=True)
class AnnealSchedule:
    """Linear inverse-temperature ramp: 1/start_temperature up to 1.0.

    ``beta(t)`` gives the inverse temperature for sweep t (0-indexed); after
    ``ramp_sweeps`` sweeps the target energy is sampled unmodified.  A start
    temperature of 1 is exactly no annealing.
    """

    start_temperature: float = 1.0
    ramp_sweeps: int = 0

    def __post_init__(self) -> None:
        if not self.start_temperature > 0:
            raise ConfigError("start temperature must be positive")
        if self.ramp_sweeps < 0:
            raise ConfigError("ramp length cannot be negative")

    def beta(self, sweep: int) -> float:
        if self.ramp_sweeps == 0 or sweep >= self.ramp_sweeps:
            return 1.0
        b0 = 1.0 / self.start_temperature
        return b0 + (1.0 - b0) * (sweep / self.ramp_sweeps)


def gibbs_chain(
    m: EnergyModel,
    n_chains: int,
    n_steps: int,
    anneal_schedule: AnnealSchedule | None = None,
    seed=0,
) -> np.ndarray:
    """Systematic-scan Gibbs sampling, one step = one full sweep over variables.

    Each variable is redrawn from its exact local conditional, which only
    involves the factors touching it; the annealing schedule scales the
    conditional logits by the current inverse temperature.
    """
    rng = _as_rng(seed)
    schedule = anneal_schedule or AnnealSchedule()
    X = rng.choice(np.array([-1, 1], dtype=np.int8), size=(n_chains, m.num_vars))
    X = X.astype(np.float64)
    for sweep in range(n_steps):
        beta = schedule.beta(sweep)
        for u in range(m.num_vars):
            logits = m.local_flip_logits(u, X)
            p_plus = _sigmoid(beta * logits)
            X[:, u] = np.where(rng.random(n_chains) < p_plus, 1.0, -1.0)
    return X.astype(np.int8)
