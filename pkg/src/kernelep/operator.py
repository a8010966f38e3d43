"""Learned message operator: feature pipeline, ridge model, output transform.

An operator maps the incoming messages at a factor to the projected outgoing
approximation q for one recipient variable.  Predictions come out in
(E, log V) form and are inverted through exp, so a finite prediction always
yields a proper distribution.  The operator is policy-free about improper
downstream messages and about when to trust itself: `decide` merely compares
predictive variance against a threshold, and the inference engine owns the
oracle budget.

Incoming Beta observations repeat across an EP run, so the Beta side of the
feature map is memoized per (alpha, beta); the Gaussian side is closed form
and recomputed on every call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .errors import DomainError, PredictionError
from .expfam import BetaDist, ExpFamDist, Gaussian1D, beta_from_mean_var, divide
from .factors import IncomingTuple, TrainingPair
from .kernels import (
    RffSpec,
    beta_cf,
    draw_rff,
    expected_feature_beta,
    expected_feature_beta_batch,
    expected_feature_gaussian,
    expected_feature_gaussian_batch,
    gaussian_cf,
    joint_features_batch,
    median_heuristic,
    rescale,
)
from .regress import (
    CvReport,
    RidgeModel,
    cross_validate,
    default_grid,
    fit,
    predict,
    predictive_variance,
    update_online,
)

__all__ = [
    "MessageOperator",
    "UncertaintyPolicy",
    "UsePrediction",
    "QueryOracle",
    "featurize",
    "featurize_batch",
    "predict_q",
    "outgoing_message",
    "decide",
    "absorb",
    "default_tau",
    "train_operator",
]

_FEATURE_SCALE = lambda d: math.sqrt(2.0 / d)  # noqa: E731


@dataclass(frozen=True, eq=False)
class MessageOperator:
    """Immutable trained operator for one factor/recipient pair.

    spec is a single 2-dim RffSpec for the joint kind or an (x-side, z-side)
    pair of 1-dim specs for the product kind.  The output transform is fixed
    as (E, log V).  _beta_cache memoizes the z-side feature work per Beta
    parameters; it never affects results, only latency.
    """

    feature_kind: str
    spec: Union[RffSpec, tuple[RffSpec, RffSpec]]
    model: RidgeModel
    recipient: str = "x"
    _beta_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.feature_kind not in ("product", "joint"):
            raise DomainError(f"unknown feature kind {self.feature_kind!r}")
        if self.recipient not in ("x", "z"):
            raise DomainError(f"unknown recipient {self.recipient!r}")
        if self.feature_kind == "joint":
            if not isinstance(self.spec, RffSpec) or self.spec.input_dim != 2:
                raise DomainError("joint kind needs one 2-dim RffSpec")
            if self.spec.num_features != self.model.num_features:
                raise DomainError("spec feature count does not match model")
        else:
            sx, sz = self.spec
            if sx.input_dim != 1 or sz.input_dim != 1:
                raise DomainError("product kind needs two 1-dim RffSpecs")
            if sx.num_features * sz.num_features != self.model.num_features:
                raise DomainError("spec feature counts do not match model")


@dataclass(frozen=True)
class UncertaintyPolicy:
    """Threshold + budget governing oracle fallback during inference."""

    tau: float
    budget: int

    def __post_init__(self):
        if not self.tau > 0.0:
            raise DomainError(f"tau must be positive, got {self.tau}")
        if self.budget < 0:
            raise DomainError(f"budget must be >= 0, got {self.budget}")


@dataclass(frozen=True)
class UsePrediction:
    q: ExpFamDist
    variance: float


@dataclass(frozen=True)
class QueryOracle:
    variance: float


def _joint_phi(op: MessageOperator, inc: IncomingTuple) -> np.ndarray:
    spec = op.spec
    key = (inc.m_z.alpha, inc.m_z.beta)
    cf_z = op._beta_cache.get(key)
    if cf_z is None:
        cf_z = np.exp(1j * spec.phases) * beta_cf(spec.frequencies[:, 1], inc.m_z)
        op._beta_cache[key] = cf_z
    cf_x = gaussian_cf(spec.frequencies[:, 0], inc.m_x)
    return _FEATURE_SCALE(spec.num_features) * (cf_z * cf_x).real


def _product_phi(op: MessageOperator, inc: IncomingTuple) -> np.ndarray:
    spec_x, spec_z = op.spec
    key = (inc.m_z.alpha, inc.m_z.beta)
    f_z = op._beta_cache.get(key)
    if f_z is None:
        f_z = expected_feature_beta(spec_z, inc.m_z)
        op._beta_cache[key] = f_z
    f_x = expected_feature_gaussian(spec_x, inc.m_x)
    return np.kron(f_x, f_z)


def featurize(op: MessageOperator, inc: IncomingTuple) -> np.ndarray:
    """Feature vector of an incoming tuple under the operator's spec."""
    if not inc.proper:
        raise DomainError("cannot featurize improper incoming messages")
    return _joint_phi(op, inc) if op.feature_kind == "joint" else _product_phi(op, inc)


def warm_beta_cache(op: MessageOperator, betas) -> None:
    """Precompute the z-side feature factors for known Beta messages.

    The quadrature behind a never-seen (alpha, beta) pair costs tens of
    milliseconds; everything afterwards is a dictionary hit. Callers that
    know their observation set up front (an EP run over a fixed graph) warm
    the cache once so steady-state message latency stays flat.
    """
    probe = Gaussian1D(0.0, 1.0)
    for b in betas:
        featurize(op, IncomingTuple(probe, b))


def featurize_batch(op: MessageOperator, tuples) -> np.ndarray:
    """Feature matrix (D x N) for a list of tuples (training layout)."""
    if op.feature_kind == "joint":
        return joint_features_batch(op.spec, tuples).T
    spec_x, spec_z = op.spec
    fx = expected_feature_gaussian_batch(spec_x, [t.m_x for t in tuples])
    fz = expected_feature_beta_batch(spec_z, [t.m_z for t in tuples])
    return np.einsum("ni,nj->nij", fx, fz).reshape(len(tuples), -1).T


def _q_from_output(op: MessageOperator, y: np.ndarray) -> ExpFamDist:
    if not np.all(np.isfinite(y)):
        raise PredictionError(f"non-finite operator prediction {y}")
    mean, variance = float(y[0]), math.exp(float(y[1]))
    if op.recipient == "x":
        q = Gaussian1D(mean, variance)
        if q.improper:
            raise PredictionError(f"prediction maps to improper Gaussian {q}")
        return q
    return beta_from_mean_var(mean, variance)


def predict_q(op: MessageOperator, inc: IncomingTuple) -> ExpFamDist:
    """Predicted projected-tilted distribution for the recipient."""
    return _q_from_output(op, predict(op.model, featurize(op, inc)))


def outgoing_message(op: MessageOperator, inc: IncomingTuple) -> ExpFamDist:
    """q divided by the recipient's incoming message; may be improper-flagged."""
    q = predict_q(op, inc)
    cavity = inc.m_x if op.recipient == "x" else inc.m_z
    return divide(q, cavity)


def decide(
    op: MessageOperator, policy: UncertaintyPolicy, inc: IncomingTuple
) -> Union[UsePrediction, QueryOracle]:
    """Trust the prediction unless its variance exceeds tau and budget remains."""
    phi = featurize(op, inc)
    variance = predictive_variance(op.model, phi)
    if variance > policy.tau and policy.budget > 0:
        return QueryOracle(variance)
    return UsePrediction(_q_from_output(op, predict(op.model, phi)), variance)


def absorb(op: MessageOperator, inc: IncomingTuple, oracle_result) -> MessageOperator:
    """Fold one oracle answer (E, log V) into the model by a rank-1 update."""
    target = np.asarray(oracle_result, dtype=float)
    if target.shape != (op.model.W.shape[0],):
        raise DomainError(f"oracle result has shape {target.shape}")
    model = update_online(op.model, featurize(op, inc), target)
    # replace() carries the cache reference over: features are model-independent
    return replace(op, model=model)


def default_tau(model: RidgeModel, Phi: np.ndarray) -> float:
    """Calibrated threshold: 90th percentile of training predictive variances."""
    variances = [predictive_variance(model, Phi[:, i]) for i in range(Phi.shape[1])]
    return float(np.percentile(variances, 90.0))


def train_operator(
    pairs: list[TrainingPair],
    feature_kind: str,
    num_features: int,
    rng: np.random.Generator,
    grid=None,
    folds: int = 5,
) -> tuple[MessageOperator, CvReport, float]:
    """Full training pipeline on generated pairs.

    Bandwidths come from the median heuristic, scaled over the grid's
    multipliers by rescaling one frozen frequency draw; lambda and multiplier
    are chosen by K-fold cross-validation and the final model refits on all
    pairs.  num_features is the total feature count for the joint kind and
    the per-side count for the product kind.  Returns the operator, the CV
    report, and the calibrated tau.
    """
    if grid is None:
        grid = default_grid()
    tuples = [p.input for p in pairs]
    Y = np.array([p.target for p in pairs]).T
    gamma_x, gamma_z = median_heuristic(tuples)

    if feature_kind == "joint":
        base = draw_rff(2, num_features, (gamma_x, gamma_z), rng)
        specs = {m: rescale(base, m) for m in sorted({m for m, _ in grid})}
        feats = {m: joint_features_batch(s, tuples).T for m, s in specs.items()}
    elif feature_kind == "product":
        base_x = draw_rff(1, num_features, gamma_x, rng)
        base_z = draw_rff(1, num_features, gamma_z, rng)
        specs = {
            m: (rescale(base_x, m), rescale(base_z, m))
            for m in sorted({m for m, _ in grid})
        }
        feats = {}
        for m, (sx, sz) in specs.items():
            fx = expected_feature_gaussian_batch(sx, [t.m_x for t in tuples])
            fz = expected_feature_beta_batch(sz, [t.m_z for t in tuples])
            feats[m] = np.einsum("ni,nj->nij", fx, fz).reshape(len(tuples), -1).T
    else:
        raise DomainError(f"unknown feature kind {feature_kind!r}")

    cv_rng = rng.spawn(1)[0]
    report = cross_validate(feats, Y, grid=grid, folds=folds, rng=cv_rng)
    mult, lam = report.chosen_params
    model = fit(feats[mult], Y, lam)
    op = MessageOperator(feature_kind, specs[mult], model)
    tau = default_tau(model, feats[mult])
    return op, report, tau
