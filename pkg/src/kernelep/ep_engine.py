"""Factor-graph expectation propagation with pluggable message sources.

The engine keeps one message per directed factor-to-variable edge and sweeps
factors sequentially in id order. Each factor's source consumes the current
incoming context (cavity per neighbor) and proposes new outgoing messages,
which are damped in natural parameters. Improper proposals are skipped and
counted rather than applied.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DomainError, EpSourceError, KernelEpError
from .expfam import (
    BetaDist,
    ExpFamDist,
    Gaussian1D,
    divide,
    from_natural,
    to_natural,
)
from .factors import IncomingTuple, oracle_to_x
from .operator import (
    MessageOperator,
    QueryOracle,
    UncertaintyPolicy,
    absorb,
    outgoing_message,
    decide,
    predict_q,
    warm_beta_cache,
)

GAUSSIAN = "gaussian"
BETA = "beta"

FACTOR_KINDS = ("gaussian_prior", "logistic", "linear_gaussian")


@dataclass(frozen=True)
class Variable:
    id: str
    family: str  # "gaussian" or "beta"


@dataclass(frozen=True)
class Factor:
    """One factor node.

    kind "gaussian_prior": neighbors (x,), params {"mean", "variance"}.
    kind "logistic": neighbors (x, z), no params; z = logistic(x).
    kind "linear_gaussian": neighbors (parent, child),
        params {"a", "b", "noise_variance"}; child = a*parent + b + noise.
    """

    id: str
    kind: str
    neighbors: tuple
    params: Mapping = field(default_factory=dict)


@dataclass(frozen=True)
class FactorGraph:
    variables: tuple
    factors: tuple
    observations: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "observations", dict(self.observations))
        fam = {}
        for v in self.variables:
            if v.id in fam:
                raise DomainError(f"duplicate variable id {v.id!r}")
            if v.family not in (GAUSSIAN, BETA):
                raise DomainError(f"unknown family {v.family!r} for {v.id!r}")
            fam[v.id] = v.family
        seen = set()
        for f in self.factors:
            if f.id in seen:
                raise DomainError(f"duplicate factor id {f.id!r}")
            seen.add(f.id)
            for vid in f.neighbors:
                if vid not in fam:
                    raise DomainError(
                        f"factor {f.id!r} references unknown variable {vid!r}"
                    )
            if f.kind == "gaussian_prior":
                if len(f.neighbors) != 1 or fam[f.neighbors[0]] != GAUSSIAN:
                    raise DomainError(
                        f"gaussian_prior {f.id!r} needs one gaussian neighbor"
                    )
                v = float(f.params["variance"])
                if not (v > 0 and math.isfinite(v)):
                    raise DomainError(f"prior {f.id!r} needs positive variance")
            elif f.kind == "logistic":
                if (
                    len(f.neighbors) != 2
                    or fam[f.neighbors[0]] != GAUSSIAN
                    or fam[f.neighbors[1]] != BETA
                ):
                    raise DomainError(
                        f"logistic {f.id!r} needs neighbors (gaussian, beta)"
                    )
            elif f.kind == "linear_gaussian":
                if len(f.neighbors) != 2 or any(
                    fam[n] != GAUSSIAN for n in f.neighbors
                ):
                    raise DomainError(
                        f"linear_gaussian {f.id!r} needs two gaussian neighbors"
                    )
                if float(f.params["a"]) == 0.0:
                    raise DomainError(f"linear_gaussian {f.id!r} needs a != 0")
                v = float(f.params["noise_variance"])
                if not (v > 0 and math.isfinite(v)):
                    raise DomainError(
                        f"linear_gaussian {f.id!r} needs positive noise variance"
                    )
            else:
                raise DomainError(f"unknown factor kind {f.kind!r}")
        for vid, obs in self.observations.items():
            if fam.get(vid) != BETA:
                raise DomainError(f"observation attached to non-beta {vid!r}")
            if obs.improper:
                raise DomainError(f"observation for {vid!r} must be proper")

    def variable(self, vid):
        for v in self.variables:
            if v.id == vid:
                return v
        raise DomainError(f"unknown variable {vid!r}")

    def factors_adjacent(self, vid):
        return [f for f in self.factors if vid in f.neighbors]


def _uniform_for(family: str) -> ExpFamDist:
    if family == GAUSSIAN:
        return Gaussian1D.uniform()
    return BetaDist(1.0, 1.0)


@dataclass(frozen=True)
class EpState:
    """Messages per directed (factor_id, variable_id) edge plus sweep stats."""

    messages: dict
    iteration: int = 0
    max_delta: float = math.inf
    skipped: int = 0


@dataclass(frozen=True)
class DampingConfig:
    delta: float = 0.5
    max_iters: int = 200
    tol: float = 1e-6

    def __post_init__(self):
        if not (0.0 < self.delta <= 1.0):
            raise DomainError("delta must be in (0, 1]")
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")
        if not (self.tol > 0):
            raise DomainError("tol must be positive")


def init_state(graph: FactorGraph) -> EpState:
    """All factor-to-variable messages start uniform (natural parameters 0)."""
    fam = {v.id: v.family for v in graph.variables}
    messages = {
        (f.id, vid): _uniform_for(fam[vid])
        for f in graph.factors
        for vid in f.neighbors
    }
    return EpState(messages=messages)


def cavity(graph: FactorGraph, state: EpState, factor_id: str, variable_id: str):
    """Product of every other message into the variable, in natural parameters.

    Observations attached to the variable participate as fixed messages. The
    result may be improper; callers decide how to react.
    """
    if (factor_id, variable_id) not in state.messages:
        raise DomainError(f"no edge ({factor_id!r}, {variable_id!r})")
    var = graph.variable(variable_id)
    eta = np.zeros(2)
    obs = graph.observations.get(variable_id)
    if obs is not None:
        eta += to_natural(obs)
    for f in graph.factors_adjacent(variable_id):
        if f.id == factor_id:
            continue
        eta += to_natural(state.messages[(f.id, variable_id)])
    return from_natural(var.family, eta)


def marginal(graph: FactorGraph, state: EpState, variable_id: str):
    """Product of all incoming messages (and any observation)."""
    var = graph.variable(variable_id)
    eta = np.zeros(2)
    obs = graph.observations.get(variable_id)
    if obs is not None:
        eta += to_natural(obs)
    for f in graph.factors_adjacent(variable_id):
        eta += to_natural(state.messages[(f.id, variable_id)])
    return from_natural(var.family, eta)


# ---------------------------------------------------------------------------
# Message sources


class PriorSource:
    """Constant message: the prior itself."""

    kind = "prior"

    def __call__(self, factor, incoming, rng):
        g = Gaussian1D(float(factor.params["mean"]), float(factor.params["variance"]))
        return {factor.neighbors[0]: g}


class LinearGaussianSource:
    """Exact Gaussian conditioning through child = a*parent + b + noise."""

    kind = "linear_gaussian"

    def __call__(self, factor, incoming, rng):
        parent, child = factor.neighbors
        a = float(factor.params["a"])
        b = float(factor.params["b"])
        v = float(factor.params["noise_variance"])
        out = {}
        mp = incoming[parent]
        if not mp.improper and math.isfinite(mp.variance):
            out[child] = Gaussian1D(a * mp.mean + b, a * a * mp.variance + v)
        mc = incoming[child]
        if not mc.improper and math.isfinite(mc.variance):
            out[parent] = Gaussian1D((mc.mean - b) / a, (mc.variance + v) / (a * a))
        return out


class OracleSource:
    """Importance-sampling projection of the logistic tilted distribution."""

    kind = "oracle"

    def __init__(self, n_importance: int = 10_000, retries: int = 3):
        if n_importance < 100:
            raise DomainError("n_importance must be >= 100")
        self.n_importance = int(n_importance)
        self.retries = int(retries)

    def __call__(self, factor, incoming, rng):
        x_id, z_id = factor.neighbors
        m_x, m_z = incoming[x_id], incoming[z_id]
        if m_x.improper or not math.isfinite(m_x.variance) or m_z.improper:
            return {}
        inc = IncomingTuple(m_x, m_z)
        last = None
        for sub in rng.spawn(self.retries):
            try:
                q, _ = oracle_to_x(inc, self.n_importance, sub)
            except KernelEpError as exc:
                last = exc
                continue
            return {x_id: divide(q, m_x)}
        raise last


class OperatorSource:
    """Learned message operator, no sampling at inference time."""

    kind = "operator"

    def __init__(self, op: MessageOperator):
        self.op = op

    def prepare(self, graph):
        warm_beta_cache(self.op, graph.observations.values())

    def __call__(self, factor, incoming, rng):
        x_id, z_id = factor.neighbors
        m_x, m_z = incoming[x_id], incoming[z_id]
        if m_x.improper or not math.isfinite(m_x.variance) or m_z.improper:
            return {}
        return {x_id: outgoing_message(self.op, IncomingTuple(m_x, m_z))}


@dataclass(frozen=True)
class QueryEvent:
    """One gating decision worth recording: an oracle query or a forced
    fallback to the prediction after the budget ran out."""

    action: str  # "query" or "fallback"
    factor_id: str
    variable_id: str
    iteration: int
    variance: float
    tau: float


class ActiveSource:
    """Operator gated by predictive variance, falling back to the oracle.

    Oracle answers are absorbed into the operator online; the query count is
    surfaced through run_ep diagnostics.  `log` records every query and every
    budget-exhausted fallback; the iteration index counts visits per factor,
    which matches the sweep number under the fixed schedule.
    """

    kind = "active"

    def __init__(
        self,
        op: MessageOperator,
        policy: UncertaintyPolicy,
        n_importance: int = 10_000,
    ):
        self.op = op
        self.tau = policy.tau
        self.budget = policy.budget
        self.n_importance = int(n_importance)
        self.queries = 0
        self.log: list[QueryEvent] = []
        self._visits: dict = {}

    def prepare(self, graph):
        warm_beta_cache(self.op, graph.observations.values())

    def __call__(self, factor, incoming, rng):
        x_id, z_id = factor.neighbors
        m_x, m_z = incoming[x_id], incoming[z_id]
        if m_x.improper or not math.isfinite(m_x.variance) or m_z.improper:
            return {}
        self._visits[factor.id] = self._visits.get(factor.id, 0) + 1
        visit = self._visits[factor.id]
        inc = IncomingTuple(m_x, m_z)
        policy = UncertaintyPolicy(tau=self.tau, budget=self.budget)
        action = decide(self.op, policy, inc)
        if isinstance(action, QueryOracle):
            q, _ = oracle_to_x(inc, self.n_importance, rng)
            self.op = absorb(
                self.op, inc, np.array([q.mean, math.log(q.variance)])
            )
            self.queries += 1
            self.budget -= 1
            self.log.append(
                QueryEvent("query", factor.id, x_id, visit, action.variance, self.tau)
            )
            return {x_id: divide(q, m_x)}
        if action.variance > self.tau:
            # over threshold but out of budget: the prediction is used anyway
            self.log.append(
                QueryEvent("fallback", factor.id, x_id, visit, action.variance, self.tau)
            )
        return {x_id: divide(predict_q(self.op, inc), m_x)}


def default_sources(logistic_source=None) -> dict:
    """Source per factor kind; logistic defaults to the sampling oracle."""
    return {
        "gaussian_prior": PriorSource(),
        "linear_gaussian": LinearGaussianSource(),
        "logistic": logistic_source if logistic_source is not None else OracleSource(),
    }


# ---------------------------------------------------------------------------
# Sweeps


def _damped(old, candidate, delta: float):
    eta = (1.0 - delta) * to_natural(old) + delta * to_natural(candidate)
    family = GAUSSIAN if isinstance(old, Gaussian1D) else BETA
    return from_natural(family, eta)


def _factor_seeds(graph: FactorGraph, rng) -> dict:
    """One reusable seed sequence per factor, in schedule order.

    Reusing the same sequence every sweep gives each stochastic source common
    random numbers across sweeps, so the sweep map becomes a deterministic
    function of the messages and EP can actually meet a convergence tolerance
    instead of rattling inside a sampling-noise ball.
    """
    ordered = sorted(graph.factors, key=lambda f: f.id)
    children = rng.bit_generator.seed_seq.spawn(len(ordered))
    return {f.id: s for f, s in zip(ordered, children)}


def ep_sweep(
    state: EpState,
    graph: FactorGraph,
    sources: Mapping,
    damping: DampingConfig,
    factor_seeds=None,
    timings=None,
) -> EpState:
    """One sequential pass over factors in id order.

    Updates are applied immediately, so later factors in the same sweep see
    them. Improper candidates are skipped and counted. Source exceptions are
    re-raised with the offending edge attached.
    """
    if factor_seeds is None:
        factor_seeds = _factor_seeds(graph, np.random.default_rng(0))
    messages = dict(state.messages)
    max_delta = 0.0
    skipped = state.skipped
    live = EpState(messages=messages, iteration=state.iteration, skipped=skipped)
    for factor in sorted(graph.factors, key=lambda f: f.id):
        source = sources[factor.kind]
        incoming = {
            vid: cavity(graph, live, factor.id, vid) for vid in factor.neighbors
        }
        base = factor_seeds[factor.id]
        # fresh spawn counter each sweep, so sources that spawn sub-streams
        # still see the exact same draws on every visit to this factor
        child_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=base.entropy, spawn_key=base.spawn_key)
        )
        t0 = time.perf_counter()
        try:
            proposals = source(factor, incoming, child_rng)
        except KernelEpError as exc:
            raise EpSourceError(
                f"source for factor {factor.id!r} failed: {exc}",
                factor_id=factor.id,
                variable_id=factor.neighbors[0],
            ) from exc
        dt = time.perf_counter() - t0
        if timings is not None:
            kind = getattr(source, "kind", factor.kind)
            bucket = timings.setdefault(kind, [0.0, 0])
            bucket[0] += dt
            bucket[1] += max(len(proposals), 1)
        for vid, candidate in proposals.items():
            if vid not in factor.neighbors:
                raise EpSourceError(
                    f"source for {factor.id!r} proposed message to non-neighbor",
                    factor_id=factor.id,
                    variable_id=vid,
                )
            old = messages[(factor.id, vid)]
            if candidate.improper:
                skipped += 1
                continue
            new = _damped(old, candidate, damping.delta)
            if new.improper:
                skipped += 1
                continue
            delta = float(np.max(np.abs(to_natural(new) - to_natural(old))))
            max_delta = max(max_delta, delta)
            messages[(factor.id, vid)] = new
    return EpState(
        messages=messages,
        iteration=state.iteration + 1,
        max_delta=max_delta,
        skipped=skipped,
    )


@dataclass(frozen=True)
class EpResult:
    marginals: dict
    state: EpState
    converged: bool
    iterations: int
    skipped: int
    queries: int
    timings: dict  # source kind -> (total_seconds, message_count)


def run_ep(
    graph: FactorGraph,
    sources: Mapping | None = None,
    damping: DampingConfig | None = None,
    rng=None,
) -> EpResult:
    """Sweep to convergence (max_delta < tol) or max_iters.

    Non-convergence is reported through the converged flag, not an exception.
    """
    if sources is None:
        sources = default_sources()
    if damping is None:
        damping = DampingConfig()
    if rng is None:
        rng = np.random.default_rng(0)
    state = init_state(graph)
    for source in {id(s): s for s in sources.values()}.values():
        hook = getattr(source, "prepare", None)
        if hook is not None:
            hook(graph)
    seeds = _factor_seeds(graph, rng)
    timings: dict = {}
    converged = False
    for _ in range(damping.max_iters):
        state = ep_sweep(state, graph, sources, damping, seeds, timings=timings)
        if state.max_delta < damping.tol:
            converged = True
            break
    marginals = {v.id: marginal(graph, state, v.id) for v in graph.variables}
    queries = sum(
        getattr(s, "queries", 0) for s in {id(s): s for s in sources.values()}.values()
    )
    return EpResult(
        marginals=marginals,
        state=state,
        converged=converged,
        iterations=state.iteration,
        skipped=state.skipped,
        queries=queries,
        timings={k: (v[0], v[1]) for k, v in timings.items()},
    )


def demo_graph(
    observations=((5.0, 2.0), (4.0, 3.0), (2.0, 5.0)),
    prior_mean: float = 0.0,
    prior_variance: float = 2.0,
) -> FactorGraph:
    """One latent x with a Gaussian prior and one logistic factor per Beta
    pseudo-observation."""
    variables = [Variable("x", GAUSSIAN)]
    factors = [
        Factor(
            "f0_prior",
            "gaussian_prior",
            ("x",),
            {"mean": prior_mean, "variance": prior_variance},
        )
    ]
    obs = {}
    for i, (a, b) in enumerate(observations, start=1):
        zid = f"z{i}"
        variables.append(Variable(zid, BETA))
        factors.append(Factor(f"f{i}_logistic", "logistic", ("x", zid)))
        obs[zid] = BetaDist(float(a), float(b))
    return FactorGraph(tuple(variables), tuple(factors), obs)
