"""Random-walk Metropolis-Hastings kernel for the frailty posterior.

The chain targets pi(b | X, Delta) which is proportional to the complete
partial likelihood at the current parameters. Proposals are Gaussian centered
at the current value and applied cluster at a time: with a symmetric proposal
the acceptance ratio reduces to the ratio of complete partial likelihoods,
and a joint random walk over all clusters would see its acceptance rate decay
exponentially in N*f.
"""

from dataclasses import dataclass, replace

import numpy as np

from .data import FrailtyState
from .likelihood import _suffix_logsumexp_exact


@dataclass(frozen=True)
class McmcConfig:
    proposal_sd: object = 0.5  # scalar or per-coordinate array of length f
    n_inner: int = 5
    adapt: bool = True
    target_accept: float = 0.35
    seed: int = 0

    def __post_init__(self):
        sd = np.asarray(self.proposal_sd, dtype=float)
        if np.any(sd <= 0):
            raise ValueError("proposal_sd must be > 0")
        if self.n_inner < 1:
            raise ValueError("n_inner must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be in (0, 1)")

    def sd_vector(self, f):
        sd = np.asarray(self.proposal_sd, dtype=float).reshape(-1)
        if sd.size == 1:
            return np.full(f, sd[0])
        if sd.size != f:
            raise ValueError("proposal_sd length does not match frailty dim")
        return sd


@dataclass(frozen=True)
class McmcDiagnostics:
    accepted: int
    steps: int

    @property
    def accept_rate(self):
        return self.accepted / self.steps if self.steps else 0.0


class Chain:
    """Mutable sampler state bound to one dataset and parameter value.

    Caches the sorted linear predictor, its scaled exponentials and the
    per-event risk-set log denominators so that one cluster proposal costs a
    single pass over the sorted rows.
    """

    def __init__(self, index, params, b0):
        self.index = index
        self.params = params
        self.b = np.array(b0, dtype=float)
        self._rebuild()

    def _rebuild(self):
        idx = self.index
        beta = self.params.beta
        base = idx.Z_sorted @ beta if beta.size else np.zeros(idx.n)
        self.eta = base + idx.offsets(self.b)
        self._scale = float(self.eta.max())
        self.r = np.exp(self.eta - self._scale)
        self.log_denom = self._log_denom_from(self.r, self.eta)
        self.prior = np.asarray(self.params.gamma.log_density(self.b), dtype=float)

    def _log_denom_from(self, r, eta):
        idx = self.index
        suffix = np.cumsum(r[::-1])[::-1]
        denom = suffix[idx.event_pos]
        if np.any(denom <= 0.0):
            return _suffix_logsumexp_exact(eta[None, :])[0, idx.event_pos]
        return np.log(denom) + self._scale

    def set_params(self, params):
        self.params = params
        self._rebuild()

    def log_complete(self):
        idx = self.index
        part = float(
            self.eta[idx.event_rows_sorted].sum() - idx.event_counts @ self.log_denom
        )
        return part + float(self.prior.sum())

    def sweep(self, sd, rng):
        """One systematic scan over clusters; returns (accepted, steps)."""
        idx = self.index
        n_clusters = idx.n_clusters
        f = idx.n_frailty
        steps_eps = rng.standard_normal((n_clusters, f))
        log_u = np.log(rng.random(n_clusters))
        accepted = 0
        for i in range(n_clusters):
            delta_b = sd * steps_eps[i]
            rows = idx.cluster_rows[i]
            d_eta = idx.W_sorted[rows] @ delta_b
            r2 = self.r.copy()
            eta2_rows = self.eta[rows] + d_eta
            r2[rows] = np.exp(eta2_rows - self._scale)
            eta2 = None
            suffix = np.cumsum(r2[::-1])[::-1]
            denom = suffix[idx.event_pos]
            if np.any(denom <= 0.0) or not np.all(np.isfinite(denom)):
                eta2 = self.eta.copy()
                eta2[rows] = eta2_rows
                log_denom2 = _suffix_logsumexp_exact(eta2[None, :])[0, idx.event_pos]
            else:
                log_denom2 = np.log(denom) + self._scale
            b_new = self.b[i] + delta_b
            prior_new = float(self.params.gamma.log_density(b_new[None, :])[0])
            delta_num = float(d_eta @ idx.status_sorted[rows])
            log_alpha = (
                delta_num
                - float(idx.event_counts @ (log_denom2 - self.log_denom))
                + prior_new
                - float(self.prior[i])
            )
            if np.isfinite(log_alpha) and log_u[i] < log_alpha:
                accepted += 1
                self.b[i] = b_new
                self.eta[rows] = eta2_rows
                self.r = r2
                self.log_denom = log_denom2
                self.prior[i] = prior_new
        return accepted, n_clusters


def mh_sweep(state, params, data, index, cfg, rng):
    """One Metropolis-Hastings sweep over all clusters.

    Returns the new frailty state and the sweep diagnostics. The chain leaves
    the posterior of b given the observations invariant at fixed params.
    """
    chain = Chain(index, params, np.asarray(state.b))
    sd = cfg.sd_vector(index.n_frailty)
    accepted, steps = chain.sweep(sd, rng)
    return FrailtyState(chain.b), McmcDiagnostics(accepted, steps)


def adapt_proposal(diag, cfg, gain=0.5):
    """Robbins-Monro update of the proposal scale toward the target rate.

    Multiplicative on the log scale; a fixed point exactly at the target
    acceptance rate. Only meant for the no-memory phase of a fit: the engine
    freezes the proposal afterwards so the kernel family stays fixed.
    """
    factor = float(np.exp(gain * (diag.accept_rate - cfg.target_accept)))
    sd = np.asarray(cfg.proposal_sd, dtype=float) * factor
    sd_out = float(sd) if sd.ndim == 0 else sd
    return replace(cfg, proposal_sd=sd_out)
