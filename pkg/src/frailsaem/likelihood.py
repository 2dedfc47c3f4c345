"""Complete partial log likelihood, its derivatives, and a quadrature oracle.

Everything is evaluated in the time-sorted layout held by ``RiskSetIndex``.
Risk-set denominators are suffix sums over that layout and are stabilized by
max-subtraction; if an entire suffix underflows after scaling, the affected
rows fall back to an exact streaming log-sum-exp.

The batched entry point evaluates one parameter vector against many frailty
configurations at once (SAEM history, MCMC draws, quadrature nodes), which is
where virtually all fitting time is spent.
"""

import numpy as np

from .data import FrailtyState, ScalarVariance  # noqa: F401  (re-exported)
from .errors import OracleScaleError

_ORACLE_MAX_DIM = 6
_ORACLE_MAX_NODES = 2e7


def _rev_cumsum(a):
    return np.flip(np.cumsum(np.flip(a, -1), -1), -1)


def _suffix_logsumexp_exact(eta):
    """Suffix log-sum-exp of each row, exact streaming version."""
    return np.flip(np.logaddexp.accumulate(np.flip(eta, -1), -1), -1)


def event_stats(
    index,
    beta,
    offsets=None,
    exp_offsets=None,
    off_scale=None,
    sum_ev_off=None,
    want_value=True,
    want_grad=False,
    want_hess=False,
):
    """Event terms of the log complete partial likelihood, batched.

    Parameters
    ----------
    index : RiskSetIndex
    beta : (b,) regression vector
    offsets : (m, n) frailty part of the linear predictor in sorted layout,
        or None when the cached form below is supplied instead.
    exp_offsets, off_scale, sum_ev_off : cached ``exp(offsets - off_scale)``
        rows, their per-row scale, and the per-row sum of offsets over event
        rows. Lets callers that re-evaluate many beta values against a fixed
        frailty batch skip the (m, n) exponential.
    want_value, want_grad, want_hess : which outputs to compute.

    Returns
    -------
    dict with any of ``value`` (m,), ``grad`` (m, b), ``hess`` (m, b, b).
    """
    beta = np.asarray(beta, dtype=float).reshape(-1)
    zs = index.Z_sorted
    base = zs @ beta if beta.size else np.zeros(index.n)

    if exp_offsets is None:
        offsets = np.atleast_2d(np.asarray(offsets, dtype=float))
        eta = base[None, :] + offsets
        scale = eta.max(axis=1)
        e_scaled = np.exp(eta - scale[:, None])
        sum_ev_eta = eta[:, index.event_rows_sorted].sum(axis=1)
    else:
        bmax = base.max() if base.size else 0.0
        e_scaled = exp_offsets * np.exp(base - bmax)[None, :]
        scale = off_scale + bmax
        sum_ev_eta = float(index.sumZ_events @ beta) + sum_ev_off
        eta = None

    pos = index.event_pos
    d_e = index.event_counts
    suffix = np.cumsum(e_scaled[:, ::-1], axis=1)[:, ::-1]
    denom = suffix[:, pos]

    bad = np.flatnonzero((denom <= 0.0).any(axis=1))
    if bad.size:
        # entire suffix underflowed after scaling: recover eta and go exact
        if eta is None:
            with np.errstate(divide="ignore"):
                eta_bad = np.log(e_scaled[bad]) + scale[bad, None]
        else:
            eta_bad = eta[bad]
        log_denom_bad = _suffix_logsumexp_exact(eta_bad)[:, pos]

    with np.errstate(divide="ignore"):
        log_denom = np.log(denom) + scale[:, None]
    if bad.size:
        log_denom[bad] = log_denom_bad

    out = {}
    if want_value:
        out["value"] = sum_ev_eta - log_denom @ d_e

    if want_grad or want_hess:
        nb = beta.size
        m = e_scaled.shape[0]
        zbar = np.empty((m, len(pos), nb))
        safe = np.where(denom > 0.0, denom, 1.0)
        for c in range(nb):
            sz = np.cumsum((e_scaled * zs[:, c])[:, ::-1], axis=1)[:, ::-1]
            zbar[:, :, c] = sz[:, pos] / safe
        if want_grad:
            out["grad"] = index.sumZ_events[None, :] - np.einsum(
                "e,mec->mc", d_e, zbar
            )
        if want_hess:
            hess = np.empty((m, nb, nb))
            for c in range(nb):
                for c2 in range(c, nb):
                    szz = np.cumsum(
                        (e_scaled * (zs[:, c] * zs[:, c2]))[:, ::-1], axis=1
                    )[:, ::-1]
                    m2 = szz[:, pos] / safe
                    h = -np.einsum(
                        "e,me->m", d_e, m2 - zbar[:, :, c] * zbar[:, :, c2]
                    )
                    hess[:, c, c2] = h
                    hess[:, c2, c] = h
            out["hess"] = hess
    return out


class LogLikParts:
    """Event and prior parts of the log complete partial likelihood."""

    def __init__(self, partial_term, prior_term):
        self.partial_term = float(partial_term)
        self.prior_term = float(prior_term)
        self.total = self.partial_term + self.prior_term

    def __repr__(self):
        return (
            f"LogLikParts(partial={self.partial_term:.6g}, "
            f"prior={self.prior_term:.6g}, total={self.total:.6g})"
        )


def _check_dims(params, index, frailty):
    if params.beta.size != index.n_covariates:
        raise ValueError("beta dimension does not match dataset covariates")
    b = np.asarray(frailty.b)
    if b.shape != (index.n_clusters, index.n_frailty):
        raise ValueError("frailty state shape does not match dataset")
    if params.gamma.dim != index.n_frailty:
        raise ValueError("frailty parameter dimension does not match design")


def log_complete_partial(params, data, index, frailty):
    """log L^p(theta; X, Delta, b): event terms plus frailty log prior."""
    _check_dims(params, index, frailty)
    off = index.offsets(frailty.b)[None, :]
    part = event_stats(index, params.beta, offsets=off)["value"][0]
    prior = params.gamma.log_density_total(frailty.b)
    return LogLikParts(part, prior)


def grad_beta(params, data, index, frailty):
    """Gradient of the event terms in beta (prior does not involve beta)."""
    _check_dims(params, index, frailty)
    off = index.offsets(frailty.b)[None, :]
    res = event_stats(
        index, params.beta, offsets=off, want_value=False, want_grad=True
    )
    return res["grad"][0]


def grad_gamma(params, frailty):
    """Gradient of the frailty log prior in the gamma parameter vector."""
    return params.gamma.grad_vector(np.asarray(frailty.b))


def hessian_theta(params, data, index, frailty):
    """Exact Hessian of the total in theta = (beta, gamma); block diagonal."""
    _check_dims(params, index, frailty)
    off = index.offsets(frailty.b)[None, :]
    res = event_stats(
        index, params.beta, offsets=off, want_value=False, want_hess=True
    )
    h_bb = res["hess"][0]
    h_gg = params.gamma.hess_vector(np.asarray(frailty.b))
    nb, nc = params.beta.size, params.gamma.n_params
    h = np.zeros((nb + nc, nb + nc))
    h[:nb, :nb] = h_bb
    h[nb:, nb:] = h_gg
    return h


def log_marginal_partial_oracle(params, data, index, quad_order, chunk=65536):
    """log of the integrated partial likelihood by joint tensor Gauss-Hermite.

    The integrand does not factorize over clusters (risk-set denominators
    couple them), so the quadrature grid is the full tensor over all N*f
    frailty coordinates. Feasible only at desk scale.
    """
    n_clusters = index.n_clusters
    f = index.n_frailty
    d = n_clusters * f
    if d > _ORACLE_MAX_DIM:
        raise OracleScaleError(f"oracle scale exceeded: N*f = {d} > {_ORACLE_MAX_DIM}")
    total_nodes = float(quad_order) ** d
    if total_nodes > _ORACLE_MAX_NODES:
        raise OracleScaleError(
            f"oracle scale exceeded: {quad_order}^{d} quadrature nodes"
        )

    nodes, weights = np.polynomial.hermite.hermgauss(quad_order)
    logw = np.log(weights)

    if isinstance(params.gamma, ScalarVariance):
        chol = np.array([[np.sqrt(params.gamma.gamma)]])
    else:
        chol = np.linalg.cholesky(params.gamma.sigma)
    scale = np.sqrt(2.0) * chol  # b_i = scale @ x_i

    total = int(total_nodes)
    shape = (quad_order,) * d
    best = -np.inf
    acc = 0.0
    for start in range(0, total, chunk):
        ids = np.arange(start, min(start + chunk, total))
        multi = np.unravel_index(ids, shape)
        x = np.stack([nodes[ix] for ix in multi], axis=1)  # (q, d)
        logw_q = sum(logw[ix] for ix in multi)
        b = np.einsum("fg,qng->qnf", scale, x.reshape(-1, n_clusters, f))
        off = index.offsets(b)
        val = event_stats(index, params.beta, offsets=off)["value"]
        terms = logw_q + val
        cmax = terms.max()
        if cmax > best:
            acc = acc * np.exp(best - cmax) + np.exp(terms - cmax).sum()
            best = cmax
        else:
            acc += np.exp(terms - best).sum()
    return float(best + np.log(acc) - 0.5 * d * np.log(np.pi))
