"""Two-stage Laplace posterior approximation for the hierarchical trial model.

Stage one integrates the random effects out of the likelihood: for each
candidate theta the mode b*(theta) of the joint log density

    h(b, theta) = log p(y | theta, b, d) + log p(b | omega)

is found (closed form for the Gaussian working model, where h is a concave
quadratic in b) and the marginal log-likelihood is approximated by

    lhat(theta) = h(b*, theta) - 0.5 log det(-H(b*)) + (q/2) log(2 pi)

with H the Hessian of h in b and q = dim(b).  The (q/2) log(2 pi) constant is
kept so that lhat is *exactly* the marginal Gaussian log-likelihood for the
families supported here, which gives the test suite a closed-form oracle.

Stage two maximizes lhat(theta) + log p(theta) over the population
parameters and forms a multivariate normal approximation around the mode,
with a block-diagonal covariance: the population block from a
finite-difference Hessian of the outer objective, the random-effects block
from the inner Hessian.

Also provided: the single-stage variant that finds the joint mode of
(theta, b) under the conditional likelihood without marginalizing b, and a
seeded self-normalized importance sampler used as a reference posterior.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import ContractError, FitFailure
from .numdiff import batch_gradient, batch_hessian
from .model import (
    LOG_SCALE_BOUND,
    LOG_TWO_PI,
    N_PARAMS,
    Dataset,
    PopulationParams,
    PriorSpec,
    RandomEffects,
    ResponseFamily,
    conditional_log_likelihood,
    random_effects_log_prior,
    working_response,
)

INNER_TOL = 1e-8
INNER_MAX_ITER = 100
OUTER_GTOL = 1e-6
OUTER_MAX_ITER = 200
GRAD_REL_STEP = 1e-5
HESS_REL_STEP = 1e-4


# ---------------------------------------------------------------------------
# numerical differentiation helpers
# ---------------------------------------------------------------------------

def central_diff_gradient(f: Callable, x: np.ndarray, rel_step: float = GRAD_REL_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for k in range(x.size):
        h = rel_step * (1.0 + abs(x[k]))
        xp = x.copy(); xp[k] += h
        xm = x.copy(); xm[k] -= h
        g[k] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def central_diff_hessian(f: Callable, x: np.ndarray, rel_step: float = HESS_REL_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    dim = x.size
    steps = rel_step * (1.0 + np.abs(x))
    H = np.zeros((dim, dim))
    f0 = f(x)
    for k in range(dim):
        hk = steps[k]
        xp = x.copy(); xp[k] += hk
        xm = x.copy(); xm[k] -= hk
        H[k, k] = (f(xp) - 2.0 * f0 + f(xm)) / hk**2
    for k in range(dim):
        for l in range(k + 1, dim):
            hk, hl = steps[k], steps[l]
            xpp = x.copy(); xpp[k] += hk; xpp[l] += hl
            xpm = x.copy(); xpm[k] += hk; xpm[l] -= hl
            xmp = x.copy(); xmp[k] -= hk; xmp[l] += hl
            xmm = x.copy(); xmm[k] -= hk; xmm[l] -= hl
            H[k, l] = H[l, k] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4.0 * hk * hl)
    return 0.5 * (H + H.T)


def cholesky_pd(mat: np.ndarray, what: str = "matrix") -> tuple[np.ndarray, np.ndarray]:
    """Lower Cholesky factor with an escalating diagonal jitter.

    Starts at 1e-8 * tr/dim and escalates tenfold up to 1e-2 * tr/dim before
    failing loudly.  Returns (L, possibly-jittered matrix).
    """
    mat = np.asarray(mat, dtype=float)
    if not np.all(np.isfinite(mat)):
        raise FitFailure(f"{what} contains non-finite entries")
    dim = mat.shape[0]
    scale = abs(np.trace(mat)) / dim if dim else 1.0
    if scale == 0.0:
        scale = 1.0
    jitter = 0.0
    while True:
        try:
            L = np.linalg.cholesky(mat + jitter * np.eye(dim))
            return L, mat + jitter * np.eye(dim)
        except np.linalg.LinAlgError:
            if jitter == 0.0:
                jitter = 1e-8 * scale
            else:
                jitter *= 10.0
            if jitter > 1e-2 * scale:
                raise FitFailure(f"{what} not positive definite after jitter escalation")


# ---------------------------------------------------------------------------
# inner stage: random-effects profile
# ---------------------------------------------------------------------------

def _theta_parts(theta_vec: np.ndarray):
    """Unpack theta into (beta, inverse variances, log variances), clamped."""
    beta0, beta1 = theta_vec[0], theta_vec[1]
    ls = min(max(theta_vec[2], -LOG_SCALE_BOUND), LOG_SCALE_BOUND)
    lw0 = min(max(theta_vec[3], -LOG_SCALE_BOUND), LOG_SCALE_BOUND)
    lw1 = min(max(theta_vec[4], -LOG_SCALE_BOUND), LOG_SCALE_BOUND)
    return beta0, beta1, math.exp(-2.0 * ls), 2.0 * ls, math.exp(-2.0 * lw0), math.exp(-2.0 * lw1), 2.0 * lw0, 2.0 * lw1


def _profile(theta_vec: np.ndarray, data: Dataset):
    """Closed-form inner solve, vectorized over patients.

    Returns (b_star (N,2), negH (N,2,2), det_negH (N,), rss (N,), quad_prior (N,),
    log_sigma2, inv_sigma2, log_omega_sum).
    """
    beta0, beta1, is2, ls2, iw0, iw1, lw0x2, lw1x2 = _theta_parts(theta_vec)
    n0, n1 = data.n0, data.n1
    with np.errstate(all="ignore"):
        # cell-mean offsets from the fixed effects; X'X = [[n0+n1, n1], [n1, n1]]
        e0 = data.mean0 - beta0
        e1 = data.mean1 - beta0 - beta1
        xr0 = n0 * e0 + n1 * e1
        xr1 = n1 * e1
        a = (n0 + n1) * is2 + iw0  # -H[0,0]
        c = n1 * is2 + iw1         # -H[1,1]
        off = n1 * is2             # -H[0,1]
        det = a * c - off * off
        g0, g1 = xr0 * is2, xr1 * is2
        b0 = (c * g0 - off * g1) / det
        b1 = (a * g1 - off * g0) / det
        # residual sum of squares as explicit squares around the cell means
        r0 = e0 - b0
        r1 = e1 - b0 - b1
        rss = data.sse0 + data.sse1 + n0 * r0**2 + n1 * r1**2
        quad_prior = b0**2 * iw0 + b1**2 * iw1
    b_star = np.stack([b0, b1], axis=1)
    negH = np.empty((len(n0), 2, 2))
    negH[:, 0, 0] = a
    negH[:, 1, 1] = c
    negH[:, 0, 1] = negH[:, 1, 0] = off
    return b_star, negH, det, rss, quad_prior, ls2, is2, lw0x2 + lw1x2


def _marginal_loglik_from_profile(data: Dataset, rss, quad_prior, det, ls2, is2, lw_sum) -> float:
    """lhat given the profile pieces.  The per-patient (2 pi) constants of the
    random-effects prior cancel against the Laplace constant."""
    return float(
        -0.5 * data.n_total * (LOG_TWO_PI + ls2)
        - 0.5 * is2 * np.sum(rss)
        - 0.5 * len(data.patients) * lw_sum
        - 0.5 * np.sum(quad_prior)
        - 0.5 * np.sum(np.log(det))
        + data.jacobian
    )


@dataclass
class InnerSolve:
    """Mode of h over the random effects, with the Hessian at the mode."""

    b_star: RandomEffects
    hessian_blocks: np.ndarray  # (N, 2, 2), per-patient blocks of H (negative definite)
    converged: bool
    iterations: int

    def hessian_dense(self) -> np.ndarray:
        N = len(self.b_star.patients)
        H = np.zeros((2 * N, 2 * N))
        for i in range(N):
            H[2 * i:2 * i + 2, 2 * i:2 * i + 2] = self.hessian_blocks[i]
        return H


def joint_log_density(theta: PopulationParams, b: RandomEffects, observations,
                      family: ResponseFamily) -> float:
    """h(b, theta) = conditional log-likelihood plus random-effects log prior."""
    return conditional_log_likelihood(observations, theta, b, family) + \
        random_effects_log_prior(b, theta)


def inner_gradient(theta: PopulationParams, b: RandomEffects, data: Dataset) -> np.ndarray:
    """Analytic gradient of h with respect to b, per patient, shape (N, 2)."""
    vec = theta.to_array()
    beta0, beta1, is2, _, iw0, iw1, _, _ = _theta_parts(vec)
    vals = b.values
    r0 = data.mean0 - beta0 - vals[:, 0]
    r1 = data.mean1 - beta0 - beta1 - vals[:, 0] - vals[:, 1]
    g0 = is2 * (data.n0 * r0 + data.n1 * r1) - iw0 * vals[:, 0]
    g1 = is2 * (data.n1 * r1) - iw1 * vals[:, 1]
    return np.stack([g0, g1], axis=1)


def inner_hessian(theta: PopulationParams, data: Dataset) -> np.ndarray:
    """Analytic Hessian blocks of h in b (constant in b), shape (N, 2, 2)."""
    _, negH, _, _, _, _, _, _ = _profile(theta.to_array(), data)
    return -negH


def inner_mode(theta: PopulationParams, data: Dataset,
               tol: float = INNER_TOL, max_iter: int = INNER_MAX_ITER) -> InnerSolve:
    """Newton ascent of h over b from b = 0.

    h is a concave quadratic in b for the supported families, so the first
    Newton step is exact; the loop shell only verifies the gradient.
    """
    vec = theta.to_array()
    b_star, negH, det, _, _, _, _, _ = _profile(vec, data)
    if not (np.all(np.isfinite(det)) and np.all(det > 0)):
        raise FitFailure("random-effects Hessian is singular or non-finite")
    solve = InnerSolve(
        b_star=RandomEffects(data.patients, b_star),
        hessian_blocks=-negH,
        converged=True,
        iterations=1 if data.n_total else 0,
    )
    grad = inner_gradient(theta, solve.b_star, data)
    gmax = float(np.max(np.abs(grad))) if grad.size else 0.0
    if gmax > tol:
        # quadratic model should land exactly; iterate defensively
        b = b_star.copy()
        it = 1
        while gmax > tol and it < max_iter:
            step = np.linalg.solve(negH, grad[:, :, None]).reshape(-1, 2)
            b = b + step
            grad = inner_gradient(theta, RandomEffects(data.patients, b), data)
            gmax = float(np.max(np.abs(grad)))
            it += 1
        solve = InnerSolve(RandomEffects(data.patients, b), -negH, gmax <= tol, it)
    return solve


def laplace_marginal_loglik(theta: PopulationParams, data: Dataset) -> float:
    """Marginal log-likelihood of the data with the random effects integrated out."""
    _, _, det, rss, quad_prior, ls2, is2, lw_sum = _profile(theta.to_array(), data)
    if not (np.all(np.isfinite(det)) and np.all(det > 0)):
        raise FitFailure("random-effects Hessian is singular or non-finite")
    return _marginal_loglik_from_profile(data, rss, quad_prior, det, ls2, is2, lw_sum)


# ---------------------------------------------------------------------------
# outer stage: population posterior mode and covariance
# ---------------------------------------------------------------------------

def _profile_batch(T: np.ndarray, data: Dataset):
    """Vectorized inner solve at a (B, 5) batch of theta vectors.

    Returns (b0, b1, a, c, off, det, rss, quad_prior, ls, lw0, lw1, is2) where
    (a, c, off) are the entries of the per-patient negative Hessian blocks,
    all shaped (B, N) except the (B,) theta pieces.
    """
    T = np.atleast_2d(np.asarray(T, dtype=float))
    n0 = data.n0[None, :]
    n1 = data.n1[None, :]
    m0 = data.mean0[None, :]
    m1 = data.mean1[None, :]
    sse = (data.sse0 + data.sse1)[None, :]
    beta0, beta1 = T[:, 0:1], T[:, 1:2]
    ls = np.clip(T[:, 2], -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
    lw0 = np.clip(T[:, 3], -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
    lw1 = np.clip(T[:, 4], -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
    is2 = np.exp(-2.0 * ls)[:, None]
    iw0 = np.exp(-2.0 * lw0)[:, None]
    iw1 = np.exp(-2.0 * lw1)[:, None]
    with np.errstate(all="ignore"):  # extreme line-search points may degenerate
        e0 = m0 - beta0
        e1 = m1 - beta0 - beta1
        xr0 = n0 * e0 + n1 * e1
        xr1 = n1 * e1
        a = (n0 + n1) * is2 + iw0
        c = n1 * is2 + iw1
        off = n1 * is2
        det = a * c - off * off
        g0, g1 = xr0 * is2, xr1 * is2
        b0 = (c * g0 - off * g1) / det
        b1 = (a * g1 - off * g0) / det
        r0 = e0 - b0
        r1 = e1 - b0 - b1
        rss = sse + n0 * r0**2 + n1 * r1**2
        quad_prior = b0**2 * iw0 + b1**2 * iw1
    return b0, b1, a, c, off, det, rss, quad_prior, ls, lw0, lw1, is2


def make_marginal_loglik_batch(data: Dataset) -> Callable[[np.ndarray], np.ndarray]:
    """lhat evaluated at a (B, 5) batch of theta vectors in one vectorized pass."""
    N = len(data.patients)
    n_total = data.n_total
    jac = data.jacobian

    def lhat_batch(T: np.ndarray) -> np.ndarray:
        _, _, _, _, _, det, rss, quad_prior, ls, lw0, lw1, is2 = _profile_batch(T, data)
        with np.errstate(all="ignore"):
            out = (
                -0.5 * n_total * (LOG_TWO_PI + 2.0 * ls)
                - 0.5 * is2[:, 0] * np.sum(rss, axis=1)
                - N * (lw0 + lw1)
                - 0.5 * np.sum(quad_prior, axis=1)
                - 0.5 * np.sum(np.log(det), axis=1)
                + jac
            )
        # a degenerate point must look terrible, never infinite or undefined
        return np.nan_to_num(out, nan=-1e300, posinf=-1e300, neginf=-1e300)

    return lhat_batch


def make_marginal_loglik(data: Dataset) -> Callable[[np.ndarray], float]:
    """lhat as a plain theta-vector function, suitable for tight loops."""

    def lhat(theta_vec: np.ndarray) -> float:
        _, _, det, rss, quad_prior, ls2, is2, lw_sum = _profile(theta_vec, data)
        return _marginal_loglik_from_profile(data, rss, quad_prior, det, ls2, is2, lw_sum)

    return lhat


def make_log_posterior(data: Dataset, prior: PriorSpec) -> Callable[[np.ndarray], float]:
    """theta-vector objective lhat(theta) + log p(theta)."""
    lhat_batch = make_marginal_loglik_batch(data)
    pm, psd = prior.means, prior.sds
    prior_const = float(-np.sum(np.log(psd)) - 0.5 * N_PARAMS * LOG_TWO_PI)

    def objective(theta_vec: np.ndarray) -> float:
        z = (theta_vec - pm) / psd
        return float(lhat_batch(theta_vec[None, :])[0]) + prior_const - 0.5 * float(z @ z)

    return objective


@dataclass
class ModeResult:
    theta_star: PopulationParams
    converged: bool
    iterations: int
    objective: float
    grad_max: float


def _bfgs_mode(lhat_batch, f, prior: PriorSpec, x0: np.ndarray,
               gtol: float, max_iter: int):
    """Quasi-Newton fallback: scipy BFGS on -f with FD gradients."""

    def neg(x):
        return -f(x)

    def neg_grad(x):
        return -(batch_gradient(lhat_batch, x, GRAD_REL_STEP) + prior.grad_log_density(x))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # line-search noise on flat directions
        res = scipy.optimize.minimize(
            neg, x0, jac=neg_grad, method="BFGS",
            options={"gtol": gtol, "maxiter": max_iter},
        )
    gmax = float(np.max(np.abs(res.jac)))
    return res.x, bool(res.success) or gmax <= gtol, int(res.nit), float(-res.fun), gmax


def _newton_mode(lhat_batch, f, prior: PriorSpec, x0: np.ndarray,
                 gtol: float, max_iter: int):
    """Damped Newton ascent with finite-difference derivatives.

    One batched gradient and one batched Hessian evaluation per iteration,
    Armijo backtracking on the objective, and the usual jitter ladder when
    the negative Hessian is not positive definite away from the mode.
    Returns (x, converged, iterations, objective, grad_max, lhat_hessian).
    """
    prior_hess = np.diag(-1.0 / prior.sds**2)
    x = np.asarray(x0, dtype=float).copy()
    fx = f(x)
    H_lhat = None
    for it in range(1, max_iter + 1):
        g = batch_gradient(lhat_batch, x, GRAD_REL_STEP) + prior.grad_log_density(x)
        gmax = float(np.max(np.abs(g)))
        if gmax <= gtol:
            H_lhat = batch_hessian(lhat_batch, x, HESS_REL_STEP)
            return x, True, it - 1, fx, gmax, H_lhat
        H_lhat = batch_hessian(lhat_batch, x, HESS_REL_STEP)
        try:
            L, _ = cholesky_pd(-(H_lhat + prior_hess), "newton curvature")
        except FitFailure:
            return x, False, it, fx, gmax, None  # caller falls back to BFGS
        direction = scipy.linalg.cho_solve((L, True), g)
        slope = float(g @ direction)
        t = 1.0
        accepted = False
        for _ in range(30):
            x_new = x + t * direction
            f_new = f(x_new)
            if f_new >= fx + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            return x, False, it, fx, gmax, None
        x, fx = x_new, f_new
    g = batch_gradient(lhat_batch, x, GRAD_REL_STEP) + prior.grad_log_density(x)
    return x, False, max_iter, fx, float(np.max(np.abs(g))), None


def _find_mode(data: Dataset, prior: PriorSpec,
               warm_start: PopulationParams | None,
               gtol: float, max_iter: int):
    """Newton for warm starts, quasi-Newton for cold ones and as fallback.

    Returns (ModeResult, lhat Hessian at the mode or None).  Newton pays for
    a full FD Hessian per iteration, which only wins near the mode; cold
    starts take many damped steps, so they run BFGS first.
    """
    lhat_batch = make_marginal_loglik_batch(data)
    f = make_log_posterior(data, prior)
    x0 = warm_start.to_array() if warm_start is not None else prior.means.copy()
    iters = 0
    H_lhat = None
    if warm_start is None and data.n_total:
        x0, converged, iters, fx, gmax = _bfgs_mode(
            lhat_batch, f, prior, x0, gtol, max_iter)
    x, converged, iters_n, fx, gmax, H_lhat = _newton_mode(
        lhat_batch, f, prior, x0, gtol, max_iter)
    iters += iters_n
    if not converged:
        x, converged, iters_b, fx, gmax = _bfgs_mode(
            lhat_batch, f, prior, x, gtol, max_iter)
        iters += iters_b
        H_lhat = None
    result = ModeResult(
        theta_star=PopulationParams.from_array(x),
        converged=converged,
        iterations=iters,
        objective=fx,
        grad_max=gmax,
    )
    return result, H_lhat


def posterior_mode(data: Dataset, prior: PriorSpec,
                   warm_start: PopulationParams | None = None,
                   gtol: float = OUTER_GTOL, max_iter: int = OUTER_MAX_ITER) -> ModeResult:
    """Ascent of lhat(theta) + log p(theta) to the population mode.

    Derivatives are central differences of lhat (steps 1e-5 and 1e-4 scaled
    by 1 + |theta|) plus the exact prior terms; each evaluation re-solves the
    inner mode.  Damped Newton with a quasi-Newton fallback; non-convergence
    returns the best iterate with ``converged=False``.
    """
    result, _ = _find_mode(data, prior, warm_start, gtol, max_iter)
    return result


class PosteriorApprox:
    """Multivariate normal posterior approximation over (theta, b).

    The mean stacks the 5 population coordinates followed by (b0, b1) per
    patient in enrollment order; the covariance is dense but, for the
    two-stage method, exactly block diagonal between the population and
    random-effects coordinates.
    """

    POP_DIM = N_PARAMS

    def __init__(self, patients, mean: np.ndarray, cov: np.ndarray):
        self.patients = tuple(patients)
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        eta = self.POP_DIM + 2 * len(self.patients)
        if self.mean.shape != (eta,) or self.cov.shape != (eta, eta):
            raise ContractError(
                f"posterior dimension mismatch: expected {eta}, got mean {self.mean.shape}, cov {self.cov.shape}"
            )
        self._chol = None

    @classmethod
    def from_blocks(cls, patients, pop_mean, pop_cov, re_means, re_blocks) -> "PosteriorApprox":
        patients = tuple(patients)
        N = len(patients)
        eta = cls.POP_DIM + 2 * N
        mean = np.concatenate([np.asarray(pop_mean, float),
                               np.asarray(re_means, float).reshape(-1)])
        cov = np.zeros((eta, eta))
        cov[:cls.POP_DIM, :cls.POP_DIM] = pop_cov
        for i in range(N):
            s = cls.POP_DIM + 2 * i
            cov[s:s + 2, s:s + 2] = re_blocks[i]
        return cls(patients, mean, cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def pop_mean(self) -> np.ndarray:
        return self.mean[:self.POP_DIM]

    @property
    def pop_cov(self) -> np.ndarray:
        return self.cov[:self.POP_DIM, :self.POP_DIM]

    @property
    def re_means(self) -> np.ndarray:
        return self.mean[self.POP_DIM:].reshape(-1, 2)

    def patient_index(self, patient) -> int:
        try:
            return self.patients.index(patient)
        except ValueError:
            raise ContractError(f"patient {patient!r} not in posterior") from None

    def re_cov_block(self, i: int) -> np.ndarray:
        s = self.POP_DIM + 2 * i
        return self.cov[s:s + 2, s:s + 2]

    def cross_block(self) -> np.ndarray:
        return self.cov[:self.POP_DIM, self.POP_DIM:]

    def theta_star(self) -> PopulationParams:
        return PopulationParams.from_array(self.pop_mean)

    def chol(self) -> np.ndarray:
        if self._chol is None:
            self._chol, self.cov = cholesky_pd(self.cov, "posterior covariance")
        return self._chol

    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol()))))

    def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Joint draws; returns (thetas (S,5), b (S,N,2))."""
        z = rng.standard_normal((size, self.dim))
        draws = self.mean + z @ self.chol().T
        return draws[:, :self.POP_DIM], draws[:, self.POP_DIM:].reshape(size, -1, 2)

    def to_record(self) -> dict:
        cross = self.cross_block()
        if np.any(cross != 0.0):
            raise ContractError("only block-diagonal posteriors serialize to the block record")
        N = len(self.patients)
        return {
            "patients": list(self.patients),
            "pop_mean": self.pop_mean.tolist(),
            "pop_cov": self.pop_cov.tolist(),
            "re_mean": self.re_means.tolist(),
            "re_cov": [self.re_cov_block(i).tolist() for i in range(N)],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PosteriorApprox":
        return cls.from_blocks(
            tuple(rec["patients"]),
            np.array(rec["pop_mean"], dtype=float),
            np.array(rec["pop_cov"], dtype=float),
            np.array(rec["re_mean"], dtype=float),
            [np.array(b, dtype=float) for b in rec["re_cov"]],
        )


def assemble_posterior(theta_star: PopulationParams, data: Dataset,
                       prior: PriorSpec,
                       lhat_hessian: np.ndarray | None = None) -> PosteriorApprox:
    """Block-diagonal MVN posterior around the mode.

    Population block: inverse negative Hessian of lhat + log prior at theta*,
    the lhat part by central finite differences (or the precomputed
    ``lhat_hessian`` from the mode search, same stencil) and the
    exactly-quadratic prior part analytically.  Random-effects block: inverse
    negative inner Hessian at b*(theta*).
    """
    x = theta_star.to_array()
    if lhat_hessian is None:
        lhat_batch = make_marginal_loglik_batch(data)
        lhat_hessian = batch_hessian(lhat_batch, x, HESS_REL_STEP)
    A = lhat_hessian - np.diag(1.0 / prior.sds**2)
    L, negA = cholesky_pd(-A, "population curvature")
    ident = np.eye(N_PARAMS)
    pop_cov = scipy.linalg.cho_solve((L, True), ident)
    pop_cov = 0.5 * (pop_cov + pop_cov.T)

    solve = inner_mode(theta_star, data)
    N = len(data.patients)
    re_blocks = []
    for i in range(N):
        negH_i = -solve.hessian_blocks[i]
        det = negH_i[0, 0] * negH_i[1, 1] - negH_i[0, 1] ** 2
        if not (np.isfinite(det) and det > 0):
            raise FitFailure("random-effects curvature block not positive definite")
        inv = np.array([[negH_i[1, 1], -negH_i[0, 1]],
                        [-negH_i[0, 1], negH_i[0, 0]]]) / det
        re_blocks.append(inv)
    return PosteriorApprox.from_blocks(
        data.patients, x, pop_cov, solve.b_star.values, re_blocks
    )


@dataclass
class FitResult:
    posterior: PosteriorApprox
    mode: ModeResult


def fit_posterior(data: Dataset, prior: PriorSpec,
                  warm_start: PopulationParams | None = None) -> FitResult:
    """posterior_mode followed by assemble_posterior.

    The mode search's final Hessian (same stencil as the assembly step) is
    reused for the population block when available.
    """
    mode, lhat_hessian = _find_mode(data, prior, warm_start, OUTER_GTOL, OUTER_MAX_ITER)
    posterior = assemble_posterior(mode.theta_star, data, prior,
                                   lhat_hessian=lhat_hessian)
    return FitResult(posterior=posterior, mode=mode)


# ---------------------------------------------------------------------------
# single-stage variant: joint mode under the conditional likelihood
# ---------------------------------------------------------------------------

def _joint_loglik_batch(data: Dataset) -> Callable[[np.ndarray], np.ndarray]:
    """log p(y|theta,b) + log p(b|omega) over (B, 5+2N) stacked vectors."""
    N = len(data.patients)
    n0 = data.n0[None, :]
    n1 = data.n1[None, :]
    m0 = data.mean0[None, :]
    m1 = data.mean1[None, :]
    sse = float(np.sum(data.sse0 + data.sse1))
    n_total = data.n_total
    jac = data.jacobian

    def loglik(X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        b = X[:, N_PARAMS:].reshape(X.shape[0], N, 2)
        ls = np.clip(X[:, 2], -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
        lw0 = np.clip(X[:, 3], -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
        lw1 = np.clip(X[:, 4], -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
        with np.errstate(all="ignore"):
            is2 = np.exp(-2.0 * ls)
            r0 = m0 - X[:, 0:1] - b[:, :, 0]
            r1 = m1 - X[:, 0:1] - X[:, 1:2] - b[:, :, 0] - b[:, :, 1]
            rss = sse + np.sum(n0 * r0**2 + n1 * r1**2, axis=1)
            cll = -0.5 * n_total * (LOG_TWO_PI + 2.0 * ls) - 0.5 * is2 * rss + jac
            re_prior = (
                -N * LOG_TWO_PI
                - N * (lw0 + lw1)
                - 0.5 * (np.sum(b[:, :, 0] ** 2, axis=1) * np.exp(-2.0 * lw0)
                         + np.sum(b[:, :, 1] ** 2, axis=1) * np.exp(-2.0 * lw1))
            )
            out = cll + re_prior
        return np.nan_to_num(out, nan=-1e300, posinf=-1e300, neginf=-1e300)

    return loglik


def conditional_laplace_posterior(data: Dataset, prior: PriorSpec,
                                  max_iter: int = 500) -> PosteriorApprox:
    """Single Gaussian approximation at the joint (theta, b) mode.

    Without data the joint mode degenerates (the density is unbounded as the
    random-effect variances shrink), and the posterior is just the prior, so
    the empty case delegates to the marginalized method.
    """
    if data.n_total == 0:
        return fit_posterior(data, prior).posterior

    loglik = _joint_loglik_batch(data)
    N = len(data.patients)
    dim = N_PARAMS + 2 * N
    x0 = np.concatenate([prior.means, np.zeros(2 * N)])
    prior_const = float(-np.sum(np.log(prior.sds)) - 0.5 * N_PARAMS * LOG_TWO_PI)

    def neg(x):
        z = (x[:N_PARAMS] - prior.means) / prior.sds
        return -(float(loglik(x[None, :])[0]) + prior_const - 0.5 * float(z @ z))

    def neg_grad(x):
        g = batch_gradient(loglik, x, GRAD_REL_STEP)
        g[:N_PARAMS] += prior.grad_log_density(x[:N_PARAMS])
        return -g

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = scipy.optimize.minimize(
            neg, x0, jac=neg_grad, method="BFGS",
            options={"gtol": OUTER_GTOL, "maxiter": max_iter},
        )
    H = batch_hessian(loglik, res.x, HESS_REL_STEP)
    H[:N_PARAMS, :N_PARAMS] -= np.diag(1.0 / prior.sds**2)
    L, negH = cholesky_pd(-H, "joint curvature")
    cov = scipy.linalg.cho_solve((L, True), np.eye(dim))
    cov = 0.5 * (cov + cov.T)
    return PosteriorApprox(data.patients, res.x, cov)


# ---------------------------------------------------------------------------
# reference posterior: self-normalized importance sampling
# ---------------------------------------------------------------------------

@dataclass
class ISResult:
    """Weighted sample approximation of a posterior, with moment summaries."""

    draws: np.ndarray        # (S, dim)
    log_weights: np.ndarray  # (S,) unnormalized
    weights: np.ndarray      # (S,) normalized
    mean: np.ndarray         # (dim,)
    var: np.ndarray          # (dim,) weighted marginal variances
    ess: float
    unreliable: bool

    def sd(self) -> np.ndarray:
        return np.sqrt(self.var)

    def cov(self) -> np.ndarray:
        """Weighted sample covariance of the draws."""
        centered = self.draws - self.mean
        cov = (self.weights[:, None] * centered).T @ centered
        return 0.5 * (cov + cov.T)

    def log_det(self, block: slice | None = None) -> float:
        """Log determinant of the weighted covariance (optionally one block)."""
        cov = self.cov()
        if block is not None:
            cov = cov[block, block]
        sign, ld = np.linalg.slogdet(cov)
        if sign <= 0:
            raise FitFailure("weighted sample covariance is not positive definite")
        return float(ld)


def _weighted_summary(draws: np.ndarray, log_w: np.ndarray, n_draws: int,
                      ess_floor: float) -> ISResult:
    log_w = np.where(np.isfinite(log_w), log_w, -np.inf)
    shifted = log_w - np.max(log_w)
    w = np.exp(shifted)
    weights = w / np.sum(w)
    ess = 1.0 / float(np.sum(weights**2))
    mean_hat = weights @ draws
    var_hat = weights @ (draws - mean_hat) ** 2
    unreliable = ess < ess_floor * n_draws
    if unreliable:
        warnings.warn(
            f"importance-sampling ESS {ess:.1f} below {ess_floor:.0%} of {n_draws} draws; "
            "reference posterior may be unreliable",
            RuntimeWarning,
        )
    return ISResult(draws, log_w, weights, mean_hat, var_hat, ess, unreliable)


def snis(log_target: Callable[[np.ndarray], np.ndarray], proposal_mean: np.ndarray,
         proposal_cov: np.ndarray, n_draws: int, rng: np.random.Generator,
         ess_floor: float = 0.05) -> ISResult:
    """Self-normalized importance sampling with a Gaussian proposal.

    ``log_target`` must accept an (S, dim) array of draws and return (S,)
    unnormalized log densities.
    """
    mean = np.asarray(proposal_mean, dtype=float)
    L, _ = cholesky_pd(np.asarray(proposal_cov, dtype=float), "proposal covariance")
    dim = mean.size
    z = rng.standard_normal((n_draws, dim))
    draws = mean + z @ L.T
    log_q = (
        -0.5 * dim * LOG_TWO_PI
        - float(np.sum(np.log(np.diag(L))))
        - 0.5 * np.sum(z * z, axis=1)
    )
    log_w = np.asarray(log_target(draws), dtype=float) - log_q
    return _weighted_summary(draws, log_w, n_draws, ess_floor)


def joint_kernel_batch(data: Dataset, prior: PriorSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorized unnormalized joint posterior log density over (theta, b) draws."""
    obs = data.observations
    N = len(data.patients)
    index = {p: i for i, p in enumerate(data.patients)}
    if obs:
        t = np.array([working_response(data.family, o.response) for o in obs])
        d = np.array([o.treatment for o in obs], dtype=float)
        pidx = np.array([index[o.patient] for o in obs], dtype=int)
    else:
        t = np.zeros(0)
        d = np.zeros(0)
        pidx = np.zeros(0, dtype=int)
    n_obs = len(obs)
    pm, psd = prior.means, prior.sds
    prior_const = float(-np.sum(np.log(psd)) - 0.5 * N_PARAMS * LOG_TWO_PI)
    jac = data.jacobian

    def log_density(X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        thetas = X[:, :N_PARAMS]
        b = X[:, N_PARAMS:].reshape(X.shape[0], N, 2)
        ls = np.clip(thetas[:, 2], -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
        lw0 = np.clip(thetas[:, 3], -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
        lw1 = np.clip(thetas[:, 4], -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
        is2 = np.exp(-2.0 * ls)
        if n_obs:
            mu = (
                thetas[:, 0:1] + b[:, pidx, 0]
                + (thetas[:, 1:2] + b[:, pidx, 1]) * d
            )
            resid2 = np.sum((t - mu) ** 2, axis=1)
        else:
            resid2 = np.zeros(X.shape[0])
        cll = -0.5 * n_obs * (LOG_TWO_PI + 2.0 * ls) - 0.5 * is2 * resid2 + jac
        re = (
            -N * LOG_TWO_PI
            - N * (lw0 + lw1)
            - 0.5 * (np.sum(b[:, :, 0] ** 2, axis=1) * np.exp(-2.0 * lw0)
                     + np.sum(b[:, :, 1] ** 2, axis=1) * np.exp(-2.0 * lw1))
        )
        zp = (thetas - pm) / psd
        logp = prior_const - 0.5 * np.sum(zp * zp, axis=1)
        return cll + re + logp

    return log_density


def reference_posterior_is(data: Dataset, prior: PriorSpec, proposal: PosteriorApprox,
                           n_draws: int, rng: np.random.Generator) -> ISResult:
    """Reference posterior via importance sampling anchored on the approximation.

    Population draws come from the approximation's population block with its
    covariance doubled.  Random effects are drawn from their exact Gaussian
    conditional p(b | theta, y) (available in closed form for the supported
    families), which removes the omega-scaled funnel that starves a static
    joint Gaussian proposal of effective draws.  Weights are computed against
    the exact joint (theta, b) posterior kernel, so the weighted sample
    targets the exact posterior.
    """
    if n_draws < 1000:
        raise ContractError(f"reference posterior needs >= 1000 draws, got {n_draws}")
    if tuple(proposal.patients) != tuple(data.patients):
        raise ContractError("proposal and dataset patient lists differ")
    pop_mean = proposal.pop_mean
    L, _ = cholesky_pd(2.0 * proposal.pop_cov, "proposal covariance")
    z = rng.standard_normal((n_draws, N_PARAMS))
    thetas = pop_mean + z @ L.T
    log_q_theta = (
        -0.5 * N_PARAMS * LOG_TWO_PI
        - float(np.sum(np.log(np.diag(L))))
        - 0.5 * np.sum(z * z, axis=1)
    )

    b0s, b1s, a, c, off, det, _, _, _, _, _, _ = _profile_batch(thetas, data)
    # conditional covariance blocks inv([[a, off], [off, c]]) and their Cholesky
    v00 = c / det
    v01 = -off / det
    v11 = a / det
    l00 = np.sqrt(v00)
    l10 = v01 / l00
    l11 = np.sqrt(np.maximum(v11 - l10**2, 1e-300))
    N = len(data.patients)
    zb = rng.standard_normal((n_draws, N, 2))
    b0 = b0s + l00 * zb[:, :, 0]
    b1 = b1s + l10 * zb[:, :, 0] + l11 * zb[:, :, 1]
    log_q_b = np.sum(
        -LOG_TWO_PI - np.log(l00) - np.log(l11)
        - 0.5 * (zb[:, :, 0] ** 2 + zb[:, :, 1] ** 2),
        axis=1,
    )
    draws = np.concatenate(
        [thetas, np.stack([b0, b1], axis=2).reshape(n_draws, 2 * N)], axis=1
    )
    log_target = joint_kernel_batch(data, prior)(draws)
    log_w = log_target - log_q_theta - log_q_b
    return _weighted_summary(draws, log_w, n_draws, ess_floor=0.05)
