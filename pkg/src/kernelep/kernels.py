"""Random Fourier features on points and on distributions.

A drawn ``RffSpec`` fixes frequencies and phases once; everything downstream
is a pure function of it.  Point features approximate the Gaussian kernel
exp(-||x-x'||^2 / (2 gamma^2)).  Distribution features are expectations of
the point features: closed form for Gaussians, Gauss-Legendre quadrature on
(0, 1) for Betas (under an endpoint-flattening substitution so fractional
shape parameters keep their accuracy), and a characteristic-function product
for the joint (x, z) embedding of an incoming tuple (the two messages are
independent, so the joint characteristic function factorizes).

Exact-kernel oracles for validation live here too.  For factorized tuples
the expected product kernel and the joint-embedding kernel coincide: both
reduce to (Gaussian-side kernel) * (Beta-side kernel), so one evaluation
routine serves both kinds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import betaln

from .errors import DomainError, QuadratureError
from .expfam import BetaDist, Gaussian1D
from .factors import IncomingTuple

__all__ = [
    "RffSpec",
    "draw_rff",
    "rescale",
    "median_heuristic",
    "rff_point",
    "gaussian_cf",
    "beta_cf",
    "beta_cf_batch",
    "expected_feature_gaussian",
    "expected_feature_beta",
    "expected_feature_gaussian_batch",
    "expected_feature_beta_batch",
    "joint_features",
    "joint_features_batch",
    "product_features",
    "exact_gauss_kernel",
    "exact_beta_kernel",
    "exact_kernel",
]

QUAD_ORDER = 64
QUAD_ORDER_CAP = 4096
QUAD_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class RffSpec:
    """Immutable random-feature draw.

    frequencies: (num_features, input_dim), drawn N(0, 1/gamma_k^2) per dim.
    phases: (num_features,) in [0, 2pi).
    bandwidth: (input_dim,) positive reals (gamma, input units).
    """

    frequencies: np.ndarray
    phases: np.ndarray
    bandwidth: np.ndarray

    def __post_init__(self):
        self.frequencies.setflags(write=False)
        self.phases.setflags(write=False)
        self.bandwidth.setflags(write=False)

    @property
    def num_features(self) -> int:
        return self.frequencies.shape[0]

    @property
    def input_dim(self) -> int:
        return self.frequencies.shape[1]


def draw_rff(input_dim: int, num_features: int, bandwidth, rng: np.random.Generator) -> RffSpec:
    """Draw a feature spec; deterministic given the generator state.

    Frequencies are drawn first, then phases.
    """
    if num_features < 1 or input_dim < 1:
        raise DomainError("num_features and input_dim must be >= 1")
    gamma = np.broadcast_to(np.asarray(bandwidth, dtype=float), (input_dim,)).copy()
    if not np.all(gamma > 0.0) or not np.all(np.isfinite(gamma)):
        raise DomainError(f"bandwidth must be positive and finite, got {bandwidth!r}")
    freqs = rng.normal(0.0, 1.0, size=(num_features, input_dim)) / gamma
    phases = rng.uniform(0.0, 2.0 * math.pi, size=num_features)
    return RffSpec(freqs, phases, gamma)


def rescale(spec: RffSpec, multiplier) -> RffSpec:
    """Same draw at bandwidth gamma * multiplier, without redrawing.

    Frequencies scale by 1/multiplier per dimension, so the rescaled spec is
    exactly what draw_rff would have produced from the same normal variates.
    """
    mult = np.broadcast_to(np.asarray(multiplier, dtype=float), (spec.input_dim,))
    if not np.all(mult > 0.0):
        raise DomainError(f"bandwidth multiplier must be positive, got {multiplier!r}")
    return RffSpec(spec.frequencies / mult, spec.phases.copy(), spec.bandwidth * mult)


def median_heuristic(tuples) -> tuple[float, float]:
    """Per-coordinate bandwidths from pairwise distances of message means.

    The x coordinate uses the incoming Gaussian means, the z coordinate the
    incoming Beta means.  Degenerate collections (all means equal) fall back
    to the coordinate's mean standard deviation, floored at 1e-3.
    """
    if len(tuples) < 2:
        raise DomainError("median heuristic needs at least two tuples")

    def one_side(values, spreads):
        diff = np.abs(values[:, None] - values[None, :])
        pair = diff[np.triu_indices(len(values), k=1)]
        med = float(np.median(pair))
        if med <= 0.0:
            med = float(np.mean(spreads))
        return max(med, 1e-3)

    mx = np.array([t.m_x.mean for t in tuples])
    sx = np.array([math.sqrt(t.m_x.variance) for t in tuples])
    mz = np.array([t.m_z.mean for t in tuples])
    sz = np.array([math.sqrt(t.m_z.variance) for t in tuples])
    return one_side(mx, sx), one_side(mz, sz)


def _feature_scale(d: int) -> float:
    return math.sqrt(2.0 / d)


def rff_point(spec: RffSpec, x) -> np.ndarray:
    """Point features sqrt(2/d) cos(w.x + b); accepts (dim,) or (n, dim)."""
    pts = np.atleast_1d(np.asarray(x, dtype=float))
    if pts.ndim == 1:
        if pts.shape[0] != spec.input_dim:
            raise DomainError(
                f"point has dimension {pts.shape[0]}, spec expects {spec.input_dim}"
            )
        return _feature_scale(spec.num_features) * np.cos(
            spec.frequencies @ pts + spec.phases
        )
    if pts.ndim != 2 or pts.shape[1] != spec.input_dim:
        raise DomainError(f"bad point array shape {pts.shape}")
    return _feature_scale(spec.num_features) * np.cos(
        pts @ spec.frequencies.T + spec.phases
    )


def gaussian_cf(omega: np.ndarray, g: Gaussian1D) -> np.ndarray:
    """Characteristic function E[e^{i w x}] of a proper Gaussian."""
    if g.improper:
        raise DomainError("characteristic function of an improper Gaussian")
    # real exp + cos/sin is ~2x cheaper than one complex exp and this sits on
    # the per-message hot path
    amp = np.exp(-0.5 * omega**2 * g.variance)
    phase = omega * g.mean
    out = np.empty(np.shape(phase), dtype=complex)
    out.real = amp * np.cos(phase)
    out.imag = amp * np.sin(phase)
    return out


@lru_cache(maxsize=16)
def _unit_gl(order: int, flatten: float = 3.0):
    """Gauss-Legendre rule on (0, 1) after a double-exponential substitution.

    z(u) = sigmoid(pi sinh(c u)) maps (-1, 1) onto (0, 1) with all
    derivatives vanishing at the endpoints, so the rule converges
    superalgebraically even for the endpoint-singular densities z^(a-1)
    with fractional a that plain Gauss-Legendre handles only slowly.
    Returns (z, log z, log(1-z), transformed weights); the log columns stay
    finite where z itself rounds to 0 or 1.
    """
    u, v = np.polynomial.legendre.leggauss(order)
    t = 0.5 * math.pi * np.sinh(flatten * u)
    log_z = -np.logaddexp(0.0, -2.0 * t)
    log_1mz = -np.logaddexp(0.0, 2.0 * t)
    # dz/du = c*pi*cosh(c u)*z*(1-z)
    log_jac = (
        math.log(flatten * math.pi) + np.log(np.cosh(flatten * u)) + log_z + log_1mz
    )
    out = (np.exp(log_z), log_z, log_1mz, v * np.exp(log_jac))
    for arr in out:
        arr.setflags(write=False)
    return out


def _beta_cf_fixed(omega: np.ndarray, b: BetaDist, order: int) -> np.ndarray:
    z, log_z, log_1mz, w = _unit_gl(order)
    dens = np.exp(
        (b.alpha - 1.0) * log_z + (b.beta - 1.0) * log_1mz - betaln(b.alpha, b.beta)
    )
    return np.exp(1j * np.outer(omega, z)) @ (w * dens)


def beta_cf(omega: np.ndarray, b: BetaDist) -> np.ndarray:
    """Characteristic function E[e^{i w z}] of a Beta by adaptive quadrature.

    Starts at order 64 and doubles until successive orders agree to 1e-8
    everywhere; escalation past order 4096 raises QuadratureError.
    """
    if b.improper:
        raise DomainError("characteristic function of an improper Beta")
    omega = np.asarray(omega, dtype=float)
    prev = _beta_cf_fixed(omega, b, QUAD_ORDER)
    order = 2 * QUAD_ORDER
    while order <= QUAD_ORDER_CAP:
        cur = _beta_cf_fixed(omega, b, order)
        if np.max(np.abs(cur - prev)) <= QUAD_TOL:
            return cur
        prev, order = cur, 2 * order
    raise QuadratureError(
        f"Beta({b.alpha}, {b.beta}) quadrature did not converge by order {QUAD_ORDER_CAP}"
    )


def beta_cf_batch(omega: np.ndarray, betas) -> np.ndarray:
    """beta_cf for many Betas sharing one frequency vector; returns (n, len(omega)).

    The node-phase matrix e^{i w t} is shared across rows, so the whole batch
    is a single complex matrix product per quadrature order.  The convergence
    check applies to the batch maximum.
    """
    omega = np.asarray(omega, dtype=float)
    alphas = np.array([b.alpha for b in betas])
    bbetas = np.array([b.beta for b in betas])
    if np.any(alphas <= 0) or np.any(bbetas <= 0):
        raise DomainError("characteristic function of an improper Beta")

    def at_order(order):
        z, log_z, log_1mz, w = _unit_gl(order)
        log_pdf = (
            (alphas[:, None] - 1.0) * log_z
            + (bbetas[:, None] - 1.0) * log_1mz
            - betaln(alphas, bbetas)[:, None]
        )
        weighted = np.exp(log_pdf) * w
        return weighted @ np.exp(1j * np.outer(z, omega))

    prev = at_order(QUAD_ORDER)
    order = 2 * QUAD_ORDER
    while order <= QUAD_ORDER_CAP:
        cur = at_order(order)
        if np.max(np.abs(cur - prev)) <= QUAD_TOL:
            return cur
        prev, order = cur, 2 * order
    raise QuadratureError(f"batch Beta quadrature did not converge by order {QUAD_ORDER_CAP}")


def expected_feature_gaussian(spec: RffSpec, g: Gaussian1D) -> np.ndarray:
    """Closed-form expected features sqrt(2/d) cos(w mu + b) e^{-w^2 s^2/2}."""
    if spec.input_dim != 1:
        raise DomainError("expected_feature_gaussian needs a 1-dim spec")
    if g.improper:
        raise DomainError("expected features of an improper Gaussian")
    w = spec.frequencies[:, 0]
    return _feature_scale(spec.num_features) * np.cos(w * g.mean + spec.phases) * np.exp(
        -0.5 * w**2 * g.variance
    )


def expected_feature_beta(spec: RffSpec, b: BetaDist) -> np.ndarray:
    """Expected features sqrt(2/d) E[cos(w z + b)] via adaptive quadrature."""
    if spec.input_dim != 1:
        raise DomainError("expected_feature_beta needs a 1-dim spec")
    w = spec.frequencies[:, 0]
    cf = beta_cf(w, b)
    return _feature_scale(spec.num_features) * (np.exp(1j * spec.phases) * cf).real


def expected_feature_gaussian_batch(spec: RffSpec, gaussians) -> np.ndarray:
    """expected_feature_gaussian for many Gaussians; returns (n, num_features)."""
    if spec.input_dim != 1:
        raise DomainError("expected_feature_gaussian needs a 1-dim spec")
    means = np.array([g.mean for g in gaussians])
    variances = np.array([g.variance for g in gaussians])
    if np.any(variances <= 0) or not np.all(np.isfinite(means)):
        raise DomainError("expected features of an improper Gaussian")
    w = spec.frequencies[:, 0]
    return _feature_scale(spec.num_features) * np.cos(
        np.outer(means, w) + spec.phases
    ) * np.exp(-0.5 * np.outer(variances, w**2))


def expected_feature_beta_batch(spec: RffSpec, betas) -> np.ndarray:
    """expected_feature_beta for many Betas; returns (n, num_features)."""
    if spec.input_dim != 1:
        raise DomainError("expected_feature_beta needs a 1-dim spec")
    cf = beta_cf_batch(spec.frequencies[:, 0], betas)
    return _feature_scale(spec.num_features) * (np.exp(1j * spec.phases) * cf).real


def product_features(f_x: np.ndarray, f_z: np.ndarray) -> np.ndarray:
    """Kronecker product of per-side feature vectors (length d_x * d_z)."""
    return np.kron(np.asarray(f_x), np.asarray(f_z))


def joint_features(spec: RffSpec, inc: IncomingTuple) -> np.ndarray:
    """Features of the joint (x, z) distribution of an incoming tuple.

    Entry j = sqrt(2/d) Re(e^{i b_j} cf_x(w_j1) cf_z(w_j2)); exact in the
    Gaussian coordinate, quadrature in the Beta coordinate.
    """
    if spec.input_dim != 2:
        raise DomainError("joint_features needs a 2-dim spec")
    cf = gaussian_cf(spec.frequencies[:, 0], inc.m_x) * beta_cf(
        spec.frequencies[:, 1], inc.m_z
    )
    return _feature_scale(spec.num_features) * (np.exp(1j * spec.phases) * cf).real


def joint_features_batch(spec: RffSpec, tuples) -> np.ndarray:
    """joint_features for many tuples at once; returns (n, num_features)."""
    if spec.input_dim != 2:
        raise DomainError("joint_features needs a 2-dim spec")
    means = np.array([t.m_x.mean for t in tuples])
    variances = np.array([t.m_x.variance for t in tuples])
    if np.any(variances <= 0) or not np.all(np.isfinite(means)):
        raise DomainError("expected features of an improper Gaussian")
    w1 = spec.frequencies[:, 0]
    cf_x = np.exp(1j * np.outer(means, w1) - 0.5 * np.outer(variances, w1**2))
    cf_z = beta_cf_batch(spec.frequencies[:, 1], [t.m_z for t in tuples])
    return _feature_scale(spec.num_features) * (
        np.exp(1j * spec.phases) * cf_x * cf_z
    ).real


def exact_gauss_kernel(g1: Gaussian1D, g2: Gaussian1D, gamma: float) -> float:
    """Closed-form expected Gaussian kernel between two Gaussian messages."""
    if g1.improper or g2.improper:
        raise DomainError("exact kernel of an improper Gaussian")
    s = gamma**2 + g1.variance + g2.variance
    return float(gamma / math.sqrt(s) * math.exp(-((g1.mean - g2.mean) ** 2) / (2.0 * s)))


def exact_beta_kernel(b1: BetaDist, b2: BetaDist, gamma: float) -> float:
    """Expected Gaussian kernel between two Beta messages, by 2-D quadrature."""
    if b1.improper or b2.improper:
        raise DomainError("exact kernel of an improper Beta")

    def at_order(order):
        z, log_z, log_1mz, w = _unit_gl(order)

        def weighted_pdf(b):
            return w * np.exp(
                (b.alpha - 1.0) * log_z
                + (b.beta - 1.0) * log_1mz
                - betaln(b.alpha, b.beta)
            )

        kmat = np.exp(-((z[:, None] - z[None, :]) ** 2) / (2.0 * gamma**2))
        return float(weighted_pdf(b1) @ kmat @ weighted_pdf(b2))

    prev = at_order(QUAD_ORDER)
    order = 2 * QUAD_ORDER
    while order <= QUAD_ORDER_CAP:
        cur = at_order(order)
        if abs(cur - prev) <= QUAD_TOL:
            return cur
        prev, order = cur, 2 * order
    raise QuadratureError(f"Beta kernel quadrature did not converge by order {QUAD_ORDER_CAP}")


def exact_kernel(kind: str, a: IncomingTuple, b: IncomingTuple, gamma) -> float:
    """Deterministic oracle for the distribution kernels.

    Both kinds factor into (Gaussian side) * (Beta side) because each tuple's
    joint law is a product of its independent messages, so the product and
    joint kernels coincide on this factor family.
    """
    if kind not in ("product", "joint"):
        raise DomainError(f"unknown kernel kind {kind!r}")
    gamma_x, gamma_z = (float(gamma[0]), float(gamma[1])) if np.ndim(gamma) else (
        float(gamma),
        float(gamma),
    )
    return exact_gauss_kernel(a.m_x, b.m_x, gamma_x) * exact_beta_kernel(
        a.m_z, b.m_z, gamma_z
    )
