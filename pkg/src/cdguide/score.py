"""Score functions of the forward process: closed form for Gaussian mixtures,
or learned by denoising score matching."""

import numpy as np
from scipy.special import logsumexp

from .approximator import MLP, OptimizerConfig, fit_regression
from .schedule import forward_marginal_gaussian


class GaussianMixture:
    def __init__(self, weights, means, covs):
        self.weights = np.atleast_1d(np.asarray(weights, dtype=float))
        self.means = np.asarray(means, dtype=float).reshape(len(self.weights), -1)
        d = self.means.shape[1]
        self.covs = np.asarray(covs, dtype=float).reshape(len(self.weights), d, d)
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError("mixture weights must be a probability vector")
        if not np.allclose(self.covs, np.swapaxes(self.covs, 1, 2)):
            raise ValueError("covariances must be symmetric")
        if np.min(np.linalg.eigvalsh(self.covs)) <= 0:
            raise ValueError("covariances must be positive definite")

    @classmethod
    def gaussian(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(len(mean))
        return cls([1.0], mean[None], cov[None])

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return len(self.weights)

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["weights"], d["means"], d["covs"])

    def _comp_terms(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        chol = np.linalg.cholesky(self.covs)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        prec = np.linalg.inv(self.covs)
        diff = x[:, None, :] - self.means[None]  # (n, k, d)
        pdiff = np.einsum("kij,nkj->nki", prec, diff)
        maha = np.einsum("nki,nki->nk", diff, pdiff)
        logc = (
            np.log(self.weights)[None]
            - 0.5 * (maha + logdet[None] + self.dim * np.log(2 * np.pi))
        )
        return logc, pdiff

    def logpdf(self, x):
        logc, _ = self._comp_terms(x)
        return logsumexp(logc, axis=1)

    def score(self, x):
        """Gradient of the log density, softmax-weighted over components."""
        logc, pdiff = self._comp_terms(x)
        resp = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
        return -np.einsum("nk,nki->ni", resp, pdiff)

    def sample(self, rng, n):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covs)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)


class AnalyticScore:
    """Exact score of the forward marginals when ``X_0`` is a Gaussian mixture."""

    def __init__(self, sched, prior):
        self.sched = sched
        self.prior = prior
        self.dim = prior.dim

    def __call__(self, t, x):
        return forward_marginal_gaussian(self.sched, self.prior, float(t)).score(x)

    def describe(self):
        return {"variant": "analytic", "prior": self.prior.to_dict()}


class LearnedScore:
    """``s(t, x) = c(t) * (net(t, u) - u)`` with ``u = c(t) (x - m(t) mu)`` and
    ``c(t) = 1 / sqrt(m(t)^2 var_data + v(t))``.

    ``-c u`` is the exact score of the isotropic Gaussian with the data's
    mean ``mu`` and mean per-coordinate variance ``var_data``, so the network
    only learns the departure from it; the scaling keeps it in a unit range
    for every t.
    """

    def __init__(self, net, sched, data_mean, data_var):
        self.net = net
        self.sched = sched
        self.data_mean = np.atleast_1d(np.asarray(data_mean, dtype=float))
        self.data_var = float(data_var)
        self.dim = net.state_dim
        self.trace = None

    def scale(self, t):
        m = self.sched.mean_scale(t)
        return m, 1.0 / np.sqrt(m * m * self.data_var + self.sched.noise_var(t))

    def __call__(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t_arr = np.asarray(t, dtype=float)
        m, c = self.scale(t_arr)
        m = np.reshape(m, (-1, 1)) if t_arr.ndim else m
        c = np.reshape(c, (-1, 1)) if t_arr.ndim else c
        u = c * (x - m * self.data_mean)
        return c * (self.net(t, u) - u)

    def describe(self):
        return {
            "variant": "learned",
            "arch": self.net.arch(),
            "data_mean": self.data_mean.tolist(),
            "data_var": self.data_var,
        }

    def save(self, path):
        self.net.save(
            path,
            extra={
                "role": "score",
                "schedule": self.sched.to_dict(),
                "data_mean": self.data_mean.tolist(),
                "data_var": self.data_var,
            },
        )

    @classmethod
    def load(cls, path):
        from .schedule import NoiseSchedule

        net = MLP.load(path)
        ex = net.extra
        return cls(net, NoiseSchedule.from_dict(ex["schedule"]), ex["data_mean"], ex["data_var"])


def score_eval(model, t, x):
    return model(t, x)


def dsm_train(net, data, sched, opt=None, weight="noise_var", t_min_frac=1e-3, seed=0):
    """Fit ``net`` by denoising score matching; returns a :class:`LearnedScore`.

    Per minibatch: draw ``x0`` from ``data``, ``t ~ U[t_min, T]`` and noise,
    form ``x_t = m(t) x0 + sqrt(v(t)) z`` and regress the score onto
    ``-(x_t - m(t) x0) / v(t)`` with weight ``lambda(t)``.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[0] == 0:
        raise ValueError("dsm_train needs a non-empty dataset")
    if data.shape[1] != net.state_dim:
        raise ValueError(f"data dimension {data.shape[1]} != net state dim {net.state_dim}")
    opt = opt or OptimizerConfig(A=1.0, B=1000.0, zeta=1.0, adam=True, iterations=5000)
    mu = data.mean(axis=0)
    var = float(data.var(axis=0).mean()) if data.shape[0] > 1 else 1.0
    model = LearnedScore(net, sched, mu, max(var, 1e-12))
    t_min = t_min_frac * sched.T

    if weight == "noise_var":
        lam = sched.noise_var
    elif weight == "g2":
        lam = lambda t: sched.coeffs(t)[1] ** 2  # noqa: E731
    elif callable(weight):
        lam = weight
    else:
        raise ValueError(f"unknown DSM weight {weight!r}")

    def draw(rng, size):
        x0 = data[rng.integers(0, data.shape[0], size)]
        t = rng.uniform(t_min, sched.T, size)
        m = sched.mean_scale(t)[:, None]
        v = sched.noise_var(t)[:, None]
        z = rng.standard_normal(x0.shape)
        xt = m * x0 + np.sqrt(v) * z
        target = -z / np.sqrt(v)
        _, c = model.scale(t)
        c = c[:, None]
        u = c * (xt - m * mu)
        # s = c * (net(u) - u)  =>  |s - target|^2 = c^2 |net - (target / c + u)|^2
        return t, u, target / c + u, lam(t) * c[:, 0] ** 2

    model.trace = fit_regression(net, draw, opt, seed=seed, name="dsm")
    return model


def dsm_loss_by_time(model, data, sched, t_values, n=4096, seed=0, weight="noise_var"):
    """Weighted DSM loss evaluated at fixed times (diagnostic)."""
    rng = np.random.default_rng(seed)
    data = np.asarray(data, dtype=float).reshape(len(data), -1)
    out = []
    for t in t_values:
        x0 = data[rng.integers(0, len(data), n)]
        m, v = sched.mean_scale(t), sched.noise_var(t)
        z = rng.standard_normal(x0.shape)
        xt = m * x0 + np.sqrt(v) * z
        resid = model(t, xt) + z / np.sqrt(v)
        lam = v if weight == "noise_var" else sched.coeffs(t)[1] ** 2
        out.append(float(lam * np.mean(np.sum(resid**2, axis=1))))
    return np.array(out)
