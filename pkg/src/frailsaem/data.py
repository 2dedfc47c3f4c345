"""Observed-data containers, model parameters and risk-set computation.

A dataset is clustered: N groups, group i holding n_i individuals. Each
individual carries an observed time (minimum of event and censoring time), a
status flag (1 = event observed, 0 = censored), a fixed-effect covariate
vector z of length b and a frailty-design vector w of length f. The shared
frailty model uses w = (1,); the correlated model uses w = (1, z_1, ...) so
that the cluster effect acts as a random intercept plus random slopes.

All containers are immutable after construction and safe to share across
concurrent readers.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError

_LOG_2PI = float(np.log(2.0 * np.pi))
_GAMMA_FLOOR = 1e-10


@dataclass(frozen=True)
class Individual:
    time: float
    status: int
    z: np.ndarray
    w: np.ndarray


@dataclass(frozen=True)
class Cluster:
    id: object
    individuals: tuple

    def __len__(self):
        return len(self.individuals)


class SurvivalDataset:
    """Clustered survival observations with flattened covariate arrays.

    Attributes
    ----------
    clusters : tuple of Cluster
    n_clusters : int
        Number of groups N.
    total_n : int
        Total number of individuals.
    n_covariates : int
        Dimension b of the fixed-effect covariates z.
    n_frailty : int
        Dimension f of the frailty design w.
    """

    def __init__(self, clusters):
        clusters = tuple(clusters)
        if len(clusters) == 0:
            raise DataFormatError("dataset needs at least one cluster")
        for cl in clusters:
            if len(cl.individuals) == 0:
                raise DataFormatError(f"cluster {cl.id!r} is empty")

        times, status, zs, ws, cindex = [], [], [], [], []
        for ci, cl in enumerate(clusters):
            for ind in cl.individuals:
                times.append(ind.time)
                status.append(ind.status)
                zs.append(np.asarray(ind.z, dtype=float).ravel())
                ws.append(np.asarray(ind.w, dtype=float).ravel())
                cindex.append(ci)

        self.clusters = clusters
        self.n_clusters = len(clusters)
        self.times = np.asarray(times, dtype=float)
        self.status = np.asarray(status, dtype=int)
        self.cluster_index = np.asarray(cindex, dtype=np.intp)
        self.total_n = self.times.size

        b_dims = {z.size for z in zs}
        f_dims = {w.size for w in ws}
        if len(b_dims) != 1 or len(f_dims) != 1:
            raise DataFormatError("covariate dimensions differ across individuals")
        self.n_covariates = b_dims.pop()
        self.n_frailty = f_dims.pop()
        self.Z = np.vstack(zs) if self.n_covariates else np.zeros((self.total_n, 0))
        self.W = np.vstack(ws) if self.n_frailty else np.zeros((self.total_n, 0))

        if not np.all(np.isfinite(self.times)) or np.any(self.times <= 0):
            raise DataFormatError("all observed times must be finite and > 0")
        if not np.isin(self.status, (0, 1)).all():
            raise DataFormatError("status must be 0 or 1")
        if not (np.all(np.isfinite(self.Z)) and np.all(np.isfinite(self.W))):
            raise DataFormatError("covariates must be finite")

        for a in (self.times, self.status, self.cluster_index, self.Z, self.W):
            a.flags.writeable = False

    @classmethod
    def from_arrays(cls, cluster_ids, times, status, Z, W=None):
        """Build a dataset from flat arrays (rows grouped by cluster label).

        ``W=None`` means the shared-frailty design w = (1,) for every row.
        """
        cluster_ids = list(cluster_ids)
        times = np.asarray(times, dtype=float)
        status = np.asarray(status, dtype=int)
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if Z.shape[0] != len(cluster_ids):
            Z = Z.T
        if W is None:
            W = np.ones((len(cluster_ids), 1))
        else:
            W = np.atleast_2d(np.asarray(W, dtype=float))
            if W.shape[0] != len(cluster_ids):
                W = W.T

        order = {}
        for lab in cluster_ids:
            if lab not in order:
                order[lab] = len(order)
        members = {lab: [] for lab in order}
        for i, lab in enumerate(cluster_ids):
            members[lab].append(
                Individual(float(times[i]), int(status[i]), Z[i].copy(), W[i].copy())
            )
        clusters = [Cluster(lab, tuple(members[lab])) for lab in order]
        return cls(clusters)

    def cluster_sizes(self):
        return np.array([len(cl) for cl in self.clusters], dtype=int)

    def event_count(self):
        return int(self.status.sum())


# ---------------------------------------------------------------------------
# Frailty state and frailty-distribution parameters
# ---------------------------------------------------------------------------


class FrailtyState:
    """Current latent frailty values: one length-f vector per cluster."""

    def __init__(self, b):
        b = np.atleast_2d(np.asarray(b, dtype=float))
        if b.ndim != 2:
            raise ValueError("frailty state must be an (N, f) array")
        if not np.all(np.isfinite(b)):
            raise ValueError("frailty values must be finite")
        self.b = b

    @classmethod
    def zeros(cls, n_clusters, f=1):
        return cls(np.zeros((n_clusters, f)))

    def copy(self):
        return FrailtyState(self.b.copy())


class FrailtyParam:
    """Centered-Gaussian frailty law; concrete variants fix the shape of γ."""

    dim = None  # frailty dimension f
    n_params = None  # dimension c of the free parameter vector

    def vector(self):
        raise NotImplementedError

    def log_density(self, b):
        """Per-cluster log density, b of shape (N, f) -> (N,)."""
        raise NotImplementedError

    def log_density_total(self, b):
        return float(self.log_density(b).sum())


@dataclass(frozen=True)
class ScalarVariance(FrailtyParam):
    """Shared Gaussian frailty b_i ~ N(0, gamma), gamma > 0."""

    gamma: float

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError("gamma must be finite and > 0")

    dim = 1
    n_params = 1
    param_names = ("gamma",)

    def vector(self):
        return np.array([self.gamma])

    @classmethod
    def from_vector(cls, v):
        return cls(float(max(v[0], _GAMMA_FLOOR)))

    def log_density(self, b):
        b = np.asarray(b, dtype=float).reshape(-1)
        return -0.5 * (_LOG_2PI + np.log(self.gamma)) - b**2 / (2.0 * self.gamma)

    def grad_vector(self, b):
        if self.gamma < _GAMMA_FLOOR:
            raise ValueError("gamma at boundary; gradient undefined")
        b = np.asarray(b, dtype=float).reshape(-1)
        n = b.size
        s = float(np.sum(b**2))
        return np.array([s / (2.0 * self.gamma**2) - n / (2.0 * self.gamma)])

    def hess_vector(self, b):
        b = np.asarray(b, dtype=float).reshape(-1)
        n = b.size
        s = float(np.sum(b**2))
        return np.array([[n / (2.0 * self.gamma**2) - s / self.gamma**3]])

    def batch_grad_vector(self, B):
        # B: (m, N, 1) -> (m, 1)
        s = np.sum(np.asarray(B) ** 2, axis=(1, 2))
        n = B.shape[1]
        return (s / (2.0 * self.gamma**2) - n / (2.0 * self.gamma))[:, None]

    def batch_hess_vector(self, B):
        s = np.sum(np.asarray(B) ** 2, axis=(1, 2))
        n = B.shape[1]
        return (n / (2.0 * self.gamma**2) - s / self.gamma**3)[:, None, None]

    def second_moment_stat(self, b):
        """(1/N) sum_i b_i^2, the statistic whose SA average updates gamma."""
        b = np.asarray(b, dtype=float).reshape(-1)
        return np.array([[float(np.mean(b**2))]])


def _vech_indices(f):
    """Parameter order: diagonal entries first, then off-diagonals (j < k)."""
    idx = [(j, j) for j in range(f)]
    idx += [(j, k) for j in range(f) for k in range(j + 1, f)]
    return idx


@dataclass(frozen=True)
class Covariance(FrailtyParam):
    """Correlated Gaussian frailty b_i ~ N(0, Sigma), Sigma SPD of size f."""

    sigma: np.ndarray

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if s.shape[0] != s.shape[1]:
            raise ValueError("Sigma must be square")
        if not np.allclose(s, s.T, atol=1e-10):
            raise ValueError("Sigma must be symmetric")
        if np.linalg.eigvalsh(s).min() <= 0:
            raise ValueError("Sigma must be positive definite")
        object.__setattr__(self, "sigma", s)

    @property
    def dim(self):
        return self.sigma.shape[0]

    @property
    def n_params(self):
        f = self.dim
        return f * (f + 1) // 2

    @property
    def param_names(self):
        f = self.dim
        names = [f"sigma{j}_sq" for j in range(f)]
        names += [f"sigma{j}{k}" for j in range(f) for k in range(j + 1, f)]
        return tuple(names)

    def vector(self):
        return np.array([self.sigma[j, k] for j, k in _vech_indices(self.dim)])

    @classmethod
    def from_vector(cls, v, f=None):
        v = np.asarray(v, dtype=float)
        if f is None:
            # solve f(f+1)/2 = len(v)
            f = int(round((np.sqrt(8 * v.size + 1) - 1) / 2))
        s = np.zeros((f, f))
        for val, (j, k) in zip(v, _vech_indices(f)):
            s[j, k] = val
            s[k, j] = val
        return cls(s)

    def log_density(self, b):
        b = np.atleast_2d(np.asarray(b, dtype=float))
        f = self.dim
        sign, logdet = np.linalg.slogdet(self.sigma)
        quad = np.einsum("nf,fg,ng->n", b, np.linalg.inv(self.sigma), b)
        return -0.5 * (f * _LOG_2PI + logdet + quad)

    def _basis(self):
        f = self.dim
        mats = []
        for j, k in _vech_indices(f):
            e = np.zeros((f, f))
            e[j, k] = 1.0
            e[k, j] = 1.0
            mats.append(e)
        return mats

    def grad_vector(self, b):
        b = np.atleast_2d(np.asarray(b, dtype=float))
        n = b.shape[0]
        p = np.linalg.inv(self.sigma)
        s = b.T @ b
        out = []
        for e in self._basis():
            out.append(-0.5 * n * np.trace(p @ e) + 0.5 * np.trace(p @ e @ p @ s))
        return np.array(out)

    def hess_vector(self, b):
        b = np.atleast_2d(np.asarray(b, dtype=float))
        n = b.shape[0]
        p = np.linalg.inv(self.sigma)
        s = b.T @ b
        basis = self._basis()
        c = len(basis)
        h = np.zeros((c, c))
        for a, ea in enumerate(basis):
            for bb, eb in enumerate(basis):
                t1 = 0.5 * n * np.trace(p @ eb @ p @ ea)
                t2 = 0.5 * np.trace(p @ eb @ p @ ea @ p @ s)
                t3 = 0.5 * np.trace(p @ ea @ p @ eb @ p @ s)
                h[a, bb] = t1 - t2 - t3
        return h

    def batch_grad_vector(self, B):
        B = np.asarray(B)
        m, n = B.shape[0], B.shape[1]
        p = np.linalg.inv(self.sigma)
        s = np.einsum("mnf,mng->mfg", B, B)
        out = np.empty((m, self.n_params))
        for a, e in enumerate(self._basis()):
            const = -0.5 * n * np.trace(p @ e)
            pep = p @ e @ p
            out[:, a] = const + 0.5 * np.einsum("fg,mgf->m", pep, s)
        return out

    def batch_hess_vector(self, B):
        B = np.asarray(B)
        m, n = B.shape[0], B.shape[1]
        p = np.linalg.inv(self.sigma)
        s = np.einsum("mnf,mng->mfg", B, B)
        basis = self._basis()
        c = len(basis)
        h = np.empty((m, c, c))
        for a, ea in enumerate(basis):
            for bb, eb in enumerate(basis):
                t1 = 0.5 * n * np.trace(p @ eb @ p @ ea)
                m2 = p @ eb @ p @ ea @ p
                m3 = p @ ea @ p @ eb @ p
                h[:, a, bb] = t1 - 0.5 * (
                    np.einsum("fg,mgf->m", m2, s) + np.einsum("fg,mgf->m", m3, s)
                )
        return h

    def second_moment_stat(self, b):
        """(1/N) sum_i b_i b_i^t."""
        b = np.atleast_2d(np.asarray(b, dtype=float))
        return b.T @ b / b.shape[0]


@dataclass(frozen=True)
class ModelParams:
    """Regression vector beta plus the frailty-distribution parameter."""

    beta: np.ndarray
    gamma: FrailtyParam

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).reshape(-1)
        if not np.all(np.isfinite(beta)):
            raise ValueError("beta must be finite")
        object.__setattr__(self, "beta", beta)

    def theta_vector(self):
        return np.concatenate([self.beta, self.gamma.vector()])

    def theta_names(self):
        betas = tuple(f"beta{i + 1}" for i in range(self.beta.size))
        return betas + tuple(self.gamma.param_names)

    def replace(self, beta=None, gamma=None):
        return ModelParams(
            self.beta if beta is None else beta,
            self.gamma if gamma is None else gamma,
        )


# ---------------------------------------------------------------------------
# Risk sets
# ---------------------------------------------------------------------------


class RiskSetIndex:
    """Distinct event times and their at-risk sets, in time-sorted layout.

    The heavy fields are flat arrays over individuals sorted by observed time
    (stable sort), which is what every likelihood kernel consumes. ``at_risk``
    materializes the (cluster, individual) pair set for one event time.
    """

    def __init__(self, data, require_events=True):
        n = data.total_n
        order = np.argsort(data.times, kind="stable")
        self.order = order
        self.times_sorted = data.times[order]
        self.status_sorted = data.status[order]
        self.Z_sorted = np.ascontiguousarray(data.Z[order])
        self.W_sorted = np.ascontiguousarray(data.W[order])
        self.cluster_sorted = data.cluster_index[order]

        ev_times = data.times[data.status == 1]
        if ev_times.size == 0 and require_events:
            raise DataFormatError("no events: every individual is censored")
        self.event_times_sorted = np.unique(ev_times)
        # first sorted position with time >= t, for each distinct event time
        self.event_pos = np.searchsorted(
            self.times_sorted, self.event_times_sorted, side="left"
        ).astype(np.intp)
        # Breslow ties: d_e events share the risk set at their common time
        self.event_counts = np.array(
            [
                int(((ev_times == t)).sum())
                for t in self.event_times_sorted
            ],
            dtype=float,
        )
        self.event_rows_sorted = np.flatnonzero(self.status_sorted == 1)
        self.n_events = int(self.event_rows_sorted.size)
        self.sumZ_events = self.Z_sorted[self.event_rows_sorted].sum(axis=0)

        self.cluster_rows = tuple(
            np.flatnonzero(self.cluster_sorted == i) for i in range(data.n_clusters)
        )
        # map sorted rows back to (cluster position, individual position)
        within = np.zeros(n, dtype=np.intp)
        counts = {}
        for row, ci in enumerate(data.cluster_index):
            within[row] = counts.get(ci, 0)
            counts[ci] = within[row] + 1
        self.indiv_sorted = within[order]
        self.n = n
        self.n_covariates = data.n_covariates
        self.n_frailty = data.n_frailty
        self.n_clusters = data.n_clusters
        for a in (
            self.order,
            self.times_sorted,
            self.status_sorted,
            self.cluster_sorted,
            self.event_pos,
            self.event_counts,
            self.indiv_sorted,
        ):
            a.flags.writeable = False

    def at_risk(self, event_time):
        """Set of (cluster position, individual position) pairs with X >= t."""
        pos = int(np.searchsorted(self.times_sorted, event_time, side="left"))
        return frozenset(
            (int(self.cluster_sorted[i]), int(self.indiv_sorted[i]))
            for i in range(pos, self.n)
        )

    def offsets(self, b):
        """Frailty part of the linear predictor, sorted layout.

        b may be (N, f) for one state or (m, N, f) for a batch; returns (n,)
        or (m, n) accordingly.
        """
        b = np.asarray(b, dtype=float)
        if b.ndim == 2:
            return np.einsum("nf,nf->n", self.W_sorted, b[self.cluster_sorted])
        return np.einsum("nf,mnf->mn", self.W_sorted, b[:, self.cluster_sorted, :])


def build_risk_index(data, require_events=True):
    """Index the distinct event times of ``data`` and their at-risk sets."""
    return RiskSetIndex(data, require_events=require_events)


def linear_predictor(data, params, frailty, cluster, individual):
    """z_ij . beta + w_ij . b_i for one individual."""
    cl = data.clusters[cluster]
    ind = cl.individuals[individual]
    b_i = np.asarray(frailty.b)[cluster]
    z = np.asarray(ind.z, dtype=float).ravel()
    w = np.asarray(ind.w, dtype=float).ravel()
    if z.size != params.beta.size:
        raise ValueError("covariate dimension mismatch with beta")
    if w.size != b_i.size:
        raise ValueError("frailty design dimension mismatch with state")
    return float(z @ params.beta + w @ b_i)
