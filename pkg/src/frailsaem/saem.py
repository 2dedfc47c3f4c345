"""Stochastic-approximation EM driver for the integrated partial likelihood.

Each iteration: (1) refresh the frailties with a few Metropolis-Hastings
sweeps at the current parameters, (2) fold the new complete log likelihood
into the running objective with step size mu_k, (3) maximize. The step
sequence is 1 during the first k0 iterations (no memory: plain stochastic EM)
and 1/(k - k0) afterwards, under which the post-burn-in objective is exactly
a uniform average over the retained frailty snapshots.

The objective is represented as a weighted history of frailty snapshots
(capped ring buffer with renormalized weights); the Gaussian frailty variance
additionally keeps an exact stochastic-approximation accumulator of its
sufficient statistic, so only the regression part ever touches the history.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import Covariance, ModelParams, ScalarVariance
from .data import build_risk_index
from .errors import DivergenceError
from .likelihood import event_stats
from .sampler import Chain, McmcConfig, McmcDiagnostics, adapt_proposal

_DIVERGENCE_BOUND = 1e6
_INNER_TOL = 1e-8
_INNER_MAX = 25
_ARMIJO = 1e-4


@dataclass(frozen=True)
class StepSchedule:
    """mu_k = 1 for k <= k0 (no memory), then 1/(k - k0)."""

    k0: int = 100

    def __post_init__(self):
        if self.k0 < 0:
            raise ValueError("k0 must be >= 0")

    def mu(self, k):
        if k <= self.k0:
            return 1.0
        return 1.0 / (k - self.k0)


@dataclass(frozen=True)
class StopRule:
    eps: float = 1e-4
    window: int = 3
    max_iter: int = 2000


def check_stop(trajectory, eps=1e-4, window=3):
    """True iff the relative parameter change stayed below eps for `window`
    consecutive iterations. A zero previous norm counts as not converged."""
    traj = np.asarray(trajectory, dtype=float)
    if traj.shape[0] < window + 1:
        return False
    for j in range(traj.shape[0] - window, traj.shape[0]):
        prev = np.linalg.norm(traj[j - 1])
        if prev == 0.0:
            return False
        if np.linalg.norm(traj[j] - traj[j - 1]) / prev >= eps:
            return False
    return True


class QAccumulator:
    """Weighted snapshot history plus the exact gamma statistic accumulator.

    Snapshot slots beyond ``cap`` are recycled oldest-first; weights follow
    the stochastic-approximation recursion and are renormalized at use, which
    bounds the truncation error by the dropped tail mass.
    """

    def __init__(self, index, cap=500):
        self.index = index
        self.cap = int(cap)
        n = index.n
        self.k = 0
        self.count = 0
        self._next = 0
        self.weights = np.zeros(self.cap)
        self.exp_off = np.empty((self.cap, n))
        self.off_scale = np.empty(self.cap)
        self.sum_ev_off = np.empty(self.cap)
        self.snapshots = np.empty((self.cap, index.n_clusters, index.n_frailty))
        self.stat2 = np.zeros((index.n_frailty, index.n_frailty))
        self.spd_projections = 0

    def update(self, mu, b):
        b = np.asarray(b, dtype=float)
        self.k += 1
        stat = b.T @ b / b.shape[0]
        self.stat2 = self.stat2 + mu * (stat - self.stat2)

        self.weights[: self.count] *= 1.0 - mu
        i = self._next
        off = self.index.offsets(b)
        om = float(off.max())
        self.weights[i] = mu
        self.exp_off[i] = np.exp(off - om)
        self.off_scale[i] = om
        self.sum_ev_off[i] = float(off[self.index.event_rows_sorted].sum())
        self.snapshots[i] = b
        self._next = (i + 1) % self.cap
        self.count = min(self.count + 1, self.cap)

    def norm_weights(self):
        w = self.weights[: self.count]
        return w / w.sum()

    @property
    def history(self):
        """Renormalized (weight, frailty snapshot) pairs."""
        w = self.norm_weights()
        return [(float(w[i]), self.snapshots[i].copy()) for i in range(self.count)]

    def q_value(self, params):
        """Q_k(theta) from the stored history (closed-form weighted sum)."""
        w = self.norm_weights()
        res = event_stats(
            self.index,
            params.beta,
            exp_offsets=self.exp_off[: self.count],
            off_scale=self.off_scale[: self.count],
            sum_ev_off=self.sum_ev_off[: self.count],
        )
        part = float(w @ res["value"])
        priors = np.array(
            [
                params.gamma.log_density_total(self.snapshots[i])
                for i in range(self.count)
            ]
        )
        return part + float(w @ priors)

    def _active_slots(self):
        # burn-in steps (mu = 1) zero out all earlier weights; skip dead slots
        w = self.weights[: self.count]
        total = w.sum()
        live = np.flatnonzero(w > 1e-15 * total)
        return live, w[live] / w[live].sum()

    def _event_objective(self, beta, want_grad, want_hess=False):
        live, w = self._active_slots()
        res = event_stats(
            self.index,
            beta,
            exp_offsets=self.exp_off[live],
            off_scale=self.off_scale[live],
            sum_ev_off=self.sum_ev_off[live],
            want_grad=want_grad,
            want_hess=want_hess,
        )
        value = float(w @ res["value"])
        grad = w @ res["grad"] if want_grad else None
        hess = np.einsum("m,mij->ij", w, res["hess"]) if want_hess else None
        return value, grad, hess


def _project_spd(mat, floor=1e-8):
    vals, vecs = np.linalg.eigh(mat)
    if np.any(~np.isfinite(vals)):
        raise ValueError("SPD projection failure: non-finite statistic")
    clipped = np.maximum(vals, floor)
    projected = bool(np.any(vals < floor))
    return (vecs * clipped) @ vecs.T, projected


def ascend(objective, x0, tol=_INNER_TOL, max_iter=_INNER_MAX):
    """Damped-Newton ascent with backtracking (halving) Armijo line search.

    ``objective(x, full)`` returns (value, grad, hess) when ``full`` else
    (value, None, None). Falls back to the raw gradient direction whenever
    the Newton system is unusable.
    """
    x = np.asarray(x0, dtype=float).copy()
    if x.size == 0:
        return x
    value, grad, hess = objective(x, True)
    for _ in range(max_iter):
        if float(np.max(np.abs(grad))) < tol:
            break
        try:
            direction = np.linalg.solve(-hess + 1e-12 * np.eye(x.size), grad)
        except np.linalg.LinAlgError:
            direction = grad
        slope = float(direction @ grad)
        if not np.isfinite(slope) or slope <= 0.0:
            direction = grad
            slope = float(grad @ grad)
        step = 1.0
        accepted = False
        while step > 1e-14:
            cand = x + step * direction
            v_cand = objective(cand, False)[0]
            if v_cand >= value + _ARMIJO * step * slope:
                x, value, accepted = cand, v_cand, True
                break
            step *= 0.5
        if not accepted:
            break
        value, grad, hess = objective(x, True)
    return x


def maximization_step(acc, current, estimate_gamma=True):
    """Maximize the stochastic approximation Q_k over theta = (beta, gamma).

    gamma has a closed form from the accumulated Gaussian sufficient
    statistic; beta is updated by warm-started damped-Newton ascent on the
    weighted-history event terms, to tolerance 1e-8 or 25 inner iterations.
    """
    if acc.count == 0:
        raise ValueError("empty accumulator")

    if estimate_gamma:
        if isinstance(current.gamma, ScalarVariance):
            gamma = ScalarVariance(max(float(acc.stat2[0, 0]), 1e-10))
        else:
            mat, projected = _project_spd(acc.stat2)
            if projected:
                acc.spd_projections += 1
            gamma = Covariance(mat)
    else:
        gamma = current.gamma

    def objective(beta, full):
        return acc._event_objective(beta, want_grad=full, want_hess=full)

    beta = ascend(objective, current.beta)
    return ModelParams(beta, gamma)


@dataclass
class FitResult:
    """Point estimate, trajectories and diagnostics of one fit."""

    theta_hat: object
    param_names: tuple
    trajectories: np.ndarray  # (iterations + 1, n_params)
    iterations: int
    converged: bool
    diagnostics: dict
    seed: object
    algorithm: str = "algorithm1"
    se: object = None
    trace_rows: list = field(default_factory=list, repr=False)

    def estimates(self):
        return dict(zip(self.param_names, self.trajectories[-1]))


def cox_initial_beta(index, max_iter=50):
    """Newton fit of the no-frailty Cox partial likelihood (b = 0)."""
    nb = index.n_covariates
    beta = np.zeros(nb)
    if nb == 0:
        return beta
    zero_off = np.zeros((1, index.n))

    def stats(b, hess):
        return event_stats(
            index, b, offsets=zero_off, want_grad=True, want_hess=hess
        )

    res = stats(beta, True)
    value = float(res["value"][0])
    for _ in range(max_iter):
        g = res["grad"][0]
        h = res["hess"][0]
        if np.max(np.abs(g)) < 1e-9:
            break
        try:
            step = np.linalg.solve(-h + 1e-10 * np.eye(nb), g)
        except np.linalg.LinAlgError:
            step = g
        t = 1.0
        while t > 1e-10:
            cand = np.clip(beta + t * step, -20.0, 20.0)
            v = float(stats(cand, False)["value"][0])
            if v > value:
                beta, value = cand, v
                break
            t *= 0.5
        else:
            break
        res = stats(beta, True)
    return beta


def default_init(data, index):
    beta0 = cox_initial_beta(index)
    f = data.n_frailty
    gamma0 = ScalarVariance(1.0) if f == 1 else Covariance(0.5 * np.eye(f))
    return ModelParams(beta0, gamma0)


def saem_fit(
    data,
    init=None,
    schedule=None,
    mcmc=None,
    stop=None,
    seed=0,
    history_cap=500,
    estimate_gamma=True,
    index=None,
):
    """Maximum integrated partial likelihood fit (Algorithm 1).

    Parameters
    ----------
    data : SurvivalDataset
    init : ModelParams or None
        None triggers the default start: no-frailty Cox fit for beta and a
        unit variance (0.5 * identity covariance) for the frailty law.
    schedule : StepSchedule
    mcmc : McmcConfig
    stop : StopRule
    seed : int or sequence
        Feeds ``numpy.random.default_rng``; the full result is reproducible
        from (data, config, seed).
    history_cap : int
        Maximum number of retained frailty snapshots.
    estimate_gamma : bool
        False freezes the frailty parameter at its initial value.

    Returns
    -------
    FitResult
    """
    index = index if index is not None else build_risk_index(data)
    schedule = schedule or StepSchedule()
    mcmc = mcmc or McmcConfig()
    stop = stop or StopRule()
    rng = np.random.default_rng(seed)

    params = init if init is not None else default_init(data, index)
    if params.gamma.dim != data.n_frailty:
        raise ValueError("frailty parameter dimension does not match design")

    chain = Chain(index, params, np.zeros((data.n_clusters, data.n_frailty)))
    acc = QAccumulator(index, cap=history_cap)
    names = params.theta_names()
    traj = [params.theta_vector()]
    trace_rows = []
    cfg = mcmc
    accepted_total = 0
    steps_total = 0
    converged = False

    k = 0
    for k in range(1, stop.max_iter + 1):
        acc_k = 0
        steps_k = 0
        for _ in range(cfg.n_inner):
            a, s = chain.sweep(cfg.sd_vector(data.n_frailty), rng)
            acc_k += a
            steps_k += s
        accepted_total += acc_k
        steps_total += steps_k
        diag = McmcDiagnostics(acc_k, steps_k)
        if cfg.adapt and k <= schedule.k0:
            cfg = adapt_proposal(diag, cfg)

        mu = schedule.mu(k)
        acc.update(mu, chain.b)
        params = maximization_step(acc, params, estimate_gamma=estimate_gamma)
        chain.set_params(params)

        theta = params.theta_vector()
        traj.append(theta)
        row = {"iteration": k, "accept_rate": diag.accept_rate, "mu": mu}
        row.update(zip(names, theta))
        trace_rows.append(row)

        if np.any(np.abs(theta) > _DIVERGENCE_BOUND):
            raise DivergenceError("diverged")
        if check_stop(traj, stop.eps, stop.window):
            converged = True
            break

    return FitResult(
        theta_hat=params,
        param_names=names,
        trajectories=np.asarray(traj),
        iterations=k,
        converged=converged,
        diagnostics={
            "accept_rate": accepted_total / max(steps_total, 1),
            "mcmc_steps": steps_total,
            "spd_projections": acc.spd_projections,
            "proposal_sd_final": np.asarray(cfg.proposal_sd).tolist(),
        },
        seed=seed,
        algorithm="algorithm1",
        trace_rows=trace_rows,
    )
