"""Shared test oracles: deterministic quadrature and frozen reference values.

The importance-sampling and feature-map code under test is checked against a
composite Gauss-Legendre oracle that was written first and frozen here; see
test_factors.test_quadrature_oracle_matches_frozen_values for the guard that
recomputes the constants.
"""

import math

import numpy as np
from scipy.special import betaln, expit


def composite_gl(lo: float, hi: float, n_total: int, per_panel: int = 50):
    """Composite Gauss-Legendre rule with n_total nodes on [lo, hi].

    Splits the interval into n_total/per_panel equal panels; avoids the
    pathological cost of single-panel rules at high order.
    """
    if n_total % per_panel:
        raise ValueError("n_total must be a multiple of per_panel")
    panels = n_total // per_panel
    base_x, base_w = np.polynomial.legendre.leggauss(per_panel)
    edges = np.linspace(lo, hi, panels + 1)
    half = (edges[1] - edges[0]) / 2.0
    centers = (edges[:-1] + edges[1:]) / 2.0
    nodes = (centers[:, None] + half * base_x[None, :]).ravel()
    weights = np.tile(half * base_w, panels)
    return nodes, weights


def tilted_log_density(x, mean, var, alpha, beta):
    """log of m_x(x) * BetaPdf(sigmoid(x); alpha, beta), unnormalized ok."""
    x = np.asarray(x)
    log_gauss = -0.5 * math.log(2.0 * math.pi * var) - (x - mean) ** 2 / (2.0 * var)
    log_beta = (
        -(alpha - 1.0) * np.logaddexp(0.0, -x)
        - (beta - 1.0) * np.logaddexp(0.0, x)
        - betaln(alpha, beta)
    )
    return log_gauss + log_beta


def tilted_moments_quad(mean, var, alpha, beta, n_nodes=10_000):
    """Deterministic tilted moments via Gauss-Legendre on [-12, 12].

    Returns dict with Ex, Ex2, Ez, Ez2 (z = sigmoid(x)), normalized.
    """
    x, w = composite_gl(-12.0, 12.0, n_nodes)
    density = np.exp(tilted_log_density(x, mean, var, alpha, beta))
    mass = w @ density
    z = expit(x)
    return {
        "Ex": float(w @ (density * x) / mass),
        "Ex2": float(w @ (density * x * x) / mass),
        "Ez": float(w @ (density * z) / mass),
        "Ez2": float(w @ (density * z * z) / mass),
    }


def self_normalized_se(values, weights):
    """Delta-method standard error of a self-normalized IS estimate."""
    est = weights @ values
    return math.sqrt(float(weights @ ((values - est) ** 2 * weights)))


# Frozen outputs of tilted_moments_quad, computed before the library existed
# (composite GL, 10^4 nodes, [-12, 12]); machine-precision converged.
TILTED_N01_BETA52 = {
    "Ex": 0.7187653458866361,
    "Ex2": 1.0137527920868428,
    "Ez": 0.6562469308226728,
    "Ez2": 0.45149548930357053,
}
TILTED_N11_BETA22 = {
    "Ex": 0.7042799208115517,
    "Ex2": 1.2126821494820108,
    "Ez": 0.6478600395942242,
    "Ez2": 0.44854709090404227,
}

# posterior moments of the three-factor demo graph: prior N(0, 2) with
# logistic observations Beta(5,2), Beta(4,3), Beta(2,5)
DEMO_POSTERIOR = {
    "Ex": 0.12400503282310994,
    "Ex2": 0.2639295404764608,
    "Var": 0.2485522923110002,
}
