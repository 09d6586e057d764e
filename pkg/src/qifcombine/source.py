"""Per-source marginal model: extended score, quadratic objective, and fit.

One data source is an independent sample of participants, each contributing a
correlated outcome vector ``y_i`` (length may vary by participant) and a
covariate matrix ``X_i`` with one row per outcome coordinate.  The mean model
is ``E(y_ir) = h(x_ir @ theta)`` for a known link h.

The extended score stacks one p-block per basis matrix,

    psi_i(theta) = [ mudot_i' D_i^(-1/2) B_s D_i^(-1/2) (y_i - mu_i) ]_{s=1..s_b},

with D_i the diagonal marginal variance (mu(1-mu) for logit; a per-source
residual-variance scalar for identity, estimated once from an independence
fit and held fixed).  The estimator minimizes the quadratic form

    Q(theta) = n * Psi(theta)' C(theta)^(-1) Psi(theta),
    C(theta) = (1/n) sum_i psi_i(theta) psi_i(theta)',

by Gauss-Newton steps on the linearized score with C refreshed each
iteration; the dC/dtheta term is dropped, so the stationarity condition is
S' C^(-1) Psi = 0 with S the score sensitivity.  No correlation parameter is
ever estimated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSet, basis_set
from .errors import (
    DegenerateFitError,
    DimensionError,
    InsufficientDataError,
    SingularMatrixError,
)
from .links import LinkFunction, link

# Ridge is added to C when its reciprocal condition number falls below this.
C_RCOND_MIN = 1e-12
C_RIDGE_SCALE = 1e-8


@dataclass
class SolverControl:
    """Iteration controls for the Gauss-Newton fit."""

    max_iter: int = 100
    tol: float = 1e-8          # infinity-norm of the objective gradient
    max_halvings: int = 20     # step halvings allowed on a Q increase


@dataclass
class SourceData:
    """Outcomes and covariates for one data source.

    Parameters
    ----------
    y : sequence of 1-d arrays, or a 2-d array (n, m)
        Per-participant outcome vectors.  Lengths may differ across
        participants when given as a sequence.
    X : sequence of 2-d arrays, or a 3-d array (n, m, p)
        Per-participant covariate matrices; row r of ``X_i`` corresponds to
        coordinate r of ``y_i``.
    link : LinkFunction or str
    basis : BasisSet or str
    dispersion : float, optional
        Marginal variance scalar for the identity link.  When absent it is
        estimated from an ordinary least-squares fit on first use and cached.
        Ignored for the logit link.
    """

    y: object
    X: object
    link: LinkFunction
    basis: BasisSet
    dispersion: float | None = None
    _buckets: list = field(default_factory=list, repr=False)
    _n: int = field(default=0, repr=False)
    _p: int = field(default=0, repr=False)

    def __post_init__(self):
        if isinstance(self.link, str):
            self.link = link(self.link)
        if isinstance(self.basis, str):
            self.basis = basis_set(self.basis)
        if isinstance(self.y, np.ndarray) and self.y.ndim == 2:
            # Balanced fast path: one bucket, no per-participant copies.
            y2 = np.asarray(self.y, dtype=float)
            X3 = np.asarray(self.X, dtype=float)
            if X3.ndim != 3 or X3.shape[:2] != y2.shape:
                raise DimensionError(
                    f"X with shape {np.shape(self.X)} does not match y {y2.shape}"
                )
            self._validate_outcomes(y2)
            self._n = y2.shape[0]
            self._p = X3.shape[2]
            self._buckets = [(np.arange(self._n, dtype=np.intp), y2, X3)]
            return
        ys = [np.asarray(yi, dtype=float) for yi in self.y]
        Xs = [np.asarray(Xi, dtype=float) for Xi in self.X]
        if len(ys) != len(Xs) or not ys:
            raise DimensionError("y and X must list the same nonzero number of participants")
        p = Xs[0].shape[1] if Xs[0].ndim == 2 else -1
        for i, (yi, Xi) in enumerate(zip(ys, Xs)):
            if yi.ndim != 1 or Xi.ndim != 2:
                raise DimensionError(f"participant {i}: y must be 1-d and X 2-d")
            if Xi.shape[0] != yi.shape[0]:
                raise DimensionError(
                    f"participant {i}: X has {Xi.shape[0]} rows for {yi.shape[0]} outcomes"
                )
            if Xi.shape[1] != p:
                raise DimensionError("covariate count must be constant across participants")
            self._validate_outcomes(yi)
        self._n = len(ys)
        self._p = p
        # Bucket participants by outcome length so every kernel runs on dense
        # stacked arrays while preserving the original participant order.
        by_m: dict[int, list[int]] = {}
        for i, yi in enumerate(ys):
            by_m.setdefault(yi.shape[0], []).append(i)
        self._buckets = []
        for m in sorted(by_m):
            idx = np.asarray(by_m[m], dtype=np.intp)
            self._buckets.append(
                (idx, np.stack([ys[i] for i in by_m[m]]), np.stack([Xs[i] for i in by_m[m]]))
            )

    def _validate_outcomes(self, y: np.ndarray) -> None:
        if self.link.kind == "logit" and np.any((y < 0.0) | (y > 1.0)):
            raise ValueError("logit outcomes must lie in [0, 1]")

    @property
    def n(self) -> int:
        """Number of participants."""
        return self._n

    @property
    def p(self) -> int:
        """Number of regression coefficients."""
        return self._p

    @property
    def n_moments(self) -> int:
        """Dimension of the extended score, p times the basis size."""
        return self._p * self.basis.size

    @property
    def total_rows(self) -> int:
        return sum(idx.size * y.shape[1] for idx, y, _ in self._buckets)


@dataclass
class SourceFit:
    """Result of fitting one data source.

    ``psi_at_fit`` archives the per-participant score vectors at the
    estimate; it stays on the worker (the cohort covariance is built from it)
    and never enters any cross-node payload.
    """

    theta_hat: np.ndarray
    S_hat: np.ndarray                 # (p*s, p) sensitivity at theta_hat
    psi_at_fit: np.ndarray | None     # (n, p*s) archive, worker-side only
    C_hat: np.ndarray | None          # (p*s, p*s) score covariance at theta_hat
    q_value: float
    converged: bool
    iterations: int
    ridged: bool = False              # C required ridge regularization
    dispersion: float = float("nan")  # identity-link variance scalar actually used
    link_kind: str = ""
    basis_family: str = ""

    def avar(self) -> np.ndarray:
        """Asymptotic covariance of sqrt(n) * theta_hat, (S' C^(-1) S)^(-1)."""
        if self.C_hat is None:
            raise ValueError("fit carries no score covariance")
        info = self.S_hat.T @ np.linalg.solve(self.C_hat, self.S_hat)
        return np.linalg.inv(info)


def _dispersion(data: SourceData) -> float:
    """Variance scalar for the identity link, estimated once and cached."""
    if data.link.kind != "identity":
        return 1.0
    if data.dispersion is None:
        beta = _ols(data)
        rss = 0.0
        for _, y, X in data._buckets:
            r = y - X @ beta
            rss += float(np.sum(r * r))
        dof = max(data.total_rows - data.p, 1)
        s2 = rss / dof
        data.dispersion = s2 if s2 > 0.0 else 1.0
    return data.dispersion


def _score_weights(data: SourceData, eta: np.ndarray, y: np.ndarray):
    """Left weight a, standardized residual u, and logit curvature pieces.

    Returns (a, u, mu, extras) where the score block is X' diag(a) B_s u.
    ``extras`` is None for the identity link and (w_eta, du_deta) for logit.
    """
    mu = data.link.forward(eta)
    r = y - mu
    if data.link.kind == "identity":
        sig = np.sqrt(_dispersion(data))
        return np.full_like(eta, 1.0 / sig), r / sig, mu, None
    v = mu * (1.0 - mu)
    w = np.sqrt(v)
    u = r / w
    half = 0.5 * (1.0 - 2.0 * mu)
    w_eta = w * half              # d w / d eta
    du_deta = -w - u * half       # d u / d eta
    return w, u, mu, (w_eta, du_deta)


def extended_score(data: SourceData, theta: np.ndarray):
    """Extended score at ``theta``.

    Returns ``(Psi, per_participant)``: the n-average score (length p*s) and
    the (n, p*s) array of individual scores in participant order.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (data.p,):
        raise DimensionError(f"theta must have shape ({data.p},)")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    s = data.basis.size
    psi = np.empty((data.n, data.p * s))
    for idx, y, X in data._buckets:
        eta = X @ theta
        a, u, _, _ = _score_weights(data, eta, y)
        for si in range(s):
            t = data.basis.apply(si, u)
            blk = np.matmul((a * t)[:, None, :], X)[:, 0, :]
            psi[idx, si * data.p:(si + 1) * data.p] = blk
    return psi.mean(axis=0), psi


def sensitivity(data: SourceData, theta: np.ndarray) -> np.ndarray:
    """Negative Jacobian of the extended score, a (p*s, p) matrix.

    The full analytic Jacobian is returned: for the logit link this includes
    the residual-weighted curvature terms from differentiating both the
    weight and the standardized residual, so it agrees with a finite
    difference of :func:`extended_score` at any theta, not only in
    expectation at the truth.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (data.p,):
        raise DimensionError(f"theta must have shape ({data.p},)")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    s, p = data.basis.size, data.p
    S = np.zeros((p * s, p))
    for _, y, X in data._buckets:
        eta = X @ theta
        a, u, mu, extras = _score_weights(data, eta, y)
        Xf = X.reshape(-1, p)
        if extras is None:
            Z = a[..., None] * X
            Zf = Z.reshape(-1, p)
            for si in range(s):
                BZ = data.basis.apply(si, Z, axis=-2)
                S[si * p:(si + 1) * p] += Zf.T @ BZ.reshape(-1, p)
            continue
        w_eta, du_deta = extras
        Z = a[..., None] * X
        Zf = Z.reshape(-1, p)
        for si in range(s):
            # -d/dtheta [X' (w o B_s u)] =
            #   X' diag(w) B_s diag(-du_deta) X - X' diag(w_eta o B_s u) X
            BdX = data.basis.apply(si, -du_deta[..., None] * X, axis=-2)
            S[si * p:(si + 1) * p] += Zf.T @ BdX.reshape(-1, p)
            g = w_eta * data.basis.apply(si, u)
            S[si * p:(si + 1) * p] -= (g[..., None] * X).reshape(-1, p).T @ Xf
    return S / data.n


def _regularized_inverse_factor(C: np.ndarray):
    """Cholesky of C, ridged when ill-conditioned.  Returns (solve, ridged)."""
    from scipy.linalg import cho_factor, cho_solve

    d = C.shape[0]
    ridged = False
    Csym = 0.5 * (C + C.T)
    tr = float(np.trace(Csym))
    if tr <= 0.0:
        # All scores are zero; any positive definite C gives Q = 0.
        Csym = np.eye(d)
        ridged = True
    else:
        ev = np.linalg.eigvalsh(Csym)
        if ev[0] <= 0.0 or ev[0] / ev[-1] < C_RCOND_MIN:
            Csym = Csym + (C_RIDGE_SCALE * tr / d) * np.eye(d)
            ridged = True
    factor = cho_factor(Csym, lower=True)
    return (lambda rhs: cho_solve(factor, rhs)), ridged


def qif_objective(data: SourceData, theta: np.ndarray):
    """Quadratic inference function value and score covariance at ``theta``.

    Returns ``(Q, C)`` with Q = n Psi' C^(-1) Psi >= 0 and
    C = (1/n) sum_i psi_i psi_i'.  If C is numerically singular a small ridge
    proportional to trace(C) is used for the inverse (the returned C is the
    unridged matrix).
    """
    if data.n < data.n_moments:
        raise InsufficientDataError(
            f"{data.n} participants cannot identify a rank-{data.n_moments} "
            "score covariance; use a smaller basis or pool sources"
        )
    Psi, psi = extended_score(data, theta)
    C = psi.T @ psi / data.n
    solve, _ = _regularized_inverse_factor(C)
    q = float(data.n * Psi @ solve(Psi))
    return max(q, 0.0), C


def _ols(data: SourceData) -> np.ndarray:
    """Pooled least-squares coefficients over all outcome rows."""
    XtX = np.zeros((data.p, data.p))
    Xty = np.zeros(data.p)
    for _, y, X in data._buckets:
        Xf = X.reshape(-1, data.p)
        yf = y.reshape(-1)
        XtX += Xf.T @ Xf
        Xty += Xf.T @ yf
    try:
        return np.linalg.solve(XtX, Xty)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("covariates are collinear in the initial fit") from exc


def _irls(data: SourceData, max_iter: int = 50, tol: float = 1e-10) -> np.ndarray:
    """Independence-working logistic regression on pooled rows."""
    beta = np.zeros(data.p)
    for _ in range(max_iter):
        XtWX = np.zeros((data.p, data.p))
        XtWz = np.zeros(data.p)
        for _, y, X in data._buckets:
            Xf = X.reshape(-1, data.p)
            yf = y.reshape(-1)
            eta = np.clip(Xf @ beta, -30.0, 30.0)
            mu = 1.0 / (1.0 + np.exp(-eta))
            w = mu * (1.0 - mu)
            z = eta + (yf - mu) / w
            Xw = Xf * w[:, None]
            XtWX += Xw.T @ Xf
            XtWz += Xw.T @ z
        try:
            beta_new = np.linalg.solve(XtWX, XtWz)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError("singular weighted design in the initial fit") from exc
        if np.max(np.abs(beta_new - beta)) < tol * (1.0 + np.max(np.abs(beta))):
            return beta_new
        beta = beta_new
    return beta


def initial_estimate(data: SourceData) -> np.ndarray:
    """Independence-working GLM start: OLS (identity) or IRLS (logit)."""
    return _ols(data) if data.link.kind == "identity" else _irls(data)


def fit_source(
    data: SourceData,
    init: np.ndarray | None = None,
    ctrl: SolverControl | None = None,
) -> SourceFit:
    """Minimize the quadratic inference function for one data source.

    Gauss-Newton steps with step halving on an objective increase; the score
    covariance C is refreshed at every accepted iterate.  Convergence is
    declared when the infinity-norm of the gradient 2 n S' C^(-1) Psi falls
    below ``ctrl.tol``.  On non-convergence the best iterate is returned with
    ``converged=False``.
    """
    ctrl = ctrl or SolverControl()
    if data.n < data.n_moments:
        raise InsufficientDataError(
            f"{data.n} participants cannot identify a rank-{data.n_moments} "
            "score covariance; use a smaller basis or pool sources"
        )
    _dispersion(data)  # fix the identity-link variance scalar up front
    theta = np.asarray(init, dtype=float).copy() if init is not None else initial_estimate(data)
    if theta.shape != (data.p,):
        raise DimensionError(f"init must have shape ({data.p},)")

    def evaluate(th):
        Psi, psi = extended_score(data, th)
        C = psi.T @ psi / data.n
        solve, ridged = _regularized_inverse_factor(C)
        q = max(float(data.n * Psi @ solve(Psi)), 0.0)
        return Psi, psi, C, solve, ridged, q

    Psi, psi, C, solve, ridged, q = evaluate(theta)
    converged = False
    iterations = 0
    for iterations in range(ctrl.max_iter + 1):
        S = sensitivity(data, theta)
        CinvPsi = solve(Psi)
        grad = -2.0 * data.n * S.T @ CinvPsi
        if np.max(np.abs(grad)) < ctrl.tol:
            converged = True
            break
        if iterations == ctrl.max_iter:
            break
        A = S.T @ solve(S)
        try:
            delta = np.linalg.solve(A, S.T @ CinvPsi)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError("singular Gauss-Newton step matrix") from exc
        # Halve on an increase of the quadratic form with C held at the
        # current iterate: the Gauss-Newton direction always descends that
        # merit, so halving cannot stall, while the continuously refreshed Q
        # need not be monotone along the path to the stationary point.
        step = 1.0
        accepted = False
        for _ in range(ctrl.max_halvings + 1):
            trial = theta + step * delta
            try:
                Psi_t, _ = extended_score(data, trial)
            except DegenerateFitError:
                step *= 0.5
                continue
            merit = float(data.n * Psi_t @ solve(Psi_t))
            if merit <= q + 1e-10 * (1.0 + abs(q)):
                theta = trial
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        Psi, psi, C, solve, ridged, q = evaluate(theta)

    S = sensitivity(data, theta)
    return SourceFit(
        theta_hat=theta,
        S_hat=S,
        psi_at_fit=psi,
        C_hat=C,
        q_value=q,
        converged=converged,
        iterations=iterations,
        ridged=ridged,
        dispersion=data.dispersion if data.link.kind == "identity" else float("nan"),
        link_kind=data.link.kind,
        basis_family=data.basis.family,
    )
