"""Path simulation of the state together with its Jacobian flows.

The state uses an exponential (splitting) Euler step,
``X' = e^{A dt}(X + b dt + sigma dW)``. The conjugated Jacobian ``J`` and its
inverse are advanced by explicit Euler steps of their own linear SDEs with the
same increments, and ``JA = e^{At} J``.

The Ito correction in the inverse-flow drift is discretised with the realised
increments, ``(sum_k Sigma_k dW_k)^2``, unless ``bracket="expected"`` is
requested, which uses ``dt * sum_k Sigma_k^2``. Both converge to the same SDE;
the realised form makes ``J_i Jinv_i - I`` vanish at first order in dt, while
the expected form only gives order one half.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .model import ModelSpec, build_conjugated
from .rng import brownian_increments

BRACKETS = ("realized", "expected")


class PathAbort(FloatingPointError):
    """A simulated path produced non-finite values."""

    def __init__(self, step, path_index, quantity):
        super().__init__(f"non-finite {quantity} at step {step} on path {path_index}")
        self.step = step
        self.path_index = path_index
        self.quantity = quantity


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def nodes(self):
        return np.arange(self.n_steps + 1) * self.dt

    def t(self, i):
        return i * self.T / self.n_steps


@dataclass(frozen=True)
class NoisePath:
    """Brownian increments of one path, shape (n_steps, m)."""

    increments: np.ndarray
    seed: int | None = None
    path_index: int | None = None
    stream: int = 0

    @classmethod
    def generate(cls, grid, m, seed, path_index, stream=0, noise_steps=None):
        dW = brownian_increments(seed, path_index, 1, grid.n_steps, m, grid.T, stream, noise_steps)
        return cls(dW[:, 0, :].copy(), seed, path_index, stream)

    @property
    def n_steps(self):
        return self.increments.shape[0]

    @property
    def m(self):
        return self.increments.shape[1]

    def coarsen(self, factor):
        """Sum consecutive groups of ``factor`` increments (same Brownian path)."""
        n, m = self.increments.shape
        if n % factor:
            raise ValueError(f"{n} steps cannot be coarsened by {factor}")
        inc = self.increments.reshape(n // factor, factor, m).sum(axis=1)
        return NoisePath(inc, self.seed, self.path_index, self.stream)

    def brownian(self):
        """W at the grid nodes, shape (n_steps + 1, m)."""
        return np.vstack([np.zeros((1, self.m)), np.cumsum(self.increments, axis=0)])


@dataclass(frozen=True)
class Trajectory:
    grid: TimeGrid
    noise: NoisePath
    X: np.ndarray
    J: np.ndarray
    Jinv: np.ndarray
    JA: np.ndarray

    def to_csv(self, path):
        write_trajectory_csv(path, self)


@dataclass
class PathBatch:
    """Time-major storage for a contiguous block of paths.

    Shapes: dW (n, N, m), X (n+1, N, d), J and Jinv (n+1, N, d, d) or None.
    """

    grid: TimeGrid
    coeffs: object
    path_start: int
    dW: np.ndarray
    X: np.ndarray
    J: np.ndarray | None = None
    Jinv: np.ndarray | None = None
    JA_direct: np.ndarray | None = None
    seed: int | None = None
    stream: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.X.shape[1]

    def JA(self, i):
        if self.JA_direct is not None:
            return self.JA_direct[i]
        if self.coeffs.is_zero:
            return self.J[i]
        return self.coeffs.semigroup_diag(self.grid.t(i))[:, None] * self.J[i]

    def trajectory(self, k):
        n = self.grid.n_steps
        JA = np.stack([self.JA(i)[k] for i in range(n + 1)])
        noise = NoisePath(self.dW[:, k, :].copy(), self.seed, self.path_start + k, self.stream)
        return Trajectory(self.grid, noise, self.X[:, k].copy(), self.J[:, k].copy(),
                          self.Jinv[:, k].copy(), JA)


def _first_bad(arr):
    bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
    return int(np.argmax(bad))


def integrate(model: ModelSpec, x0, grid: TimeGrid, dW, *, coeffs=None, flows=True,
              bracket="realized", path_start=0, integrate_ja=False, seed=None, stream=0):
    """Run the coupled recursion on given increments ``dW`` (n, N, m)."""
    if bracket not in BRACKETS:
        raise ValueError(f"bracket must be one of {BRACKETS}")
    coeffs = build_conjugated(model) if coeffs is None else coeffs
    n, N, m = dW.shape
    d = model.d
    if n != grid.n_steps or m != model.m:
        raise ValueError(f"increments shape {dW.shape} does not match grid/model")
    dt = grid.dt
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (d,):
        raise ValueError(f"x0 must have shape ({d},), got {x0.shape}")
    realized = bracket == "realized"
    split = None if coeffs.is_zero else np.exp(-coeffs.mu * dt)

    X = np.empty((n + 1, N, d))
    X[0] = x0
    J = Jinv = JAd = None
    if flows:
        J = np.empty((n + 1, N, d, d))
        Jinv = np.empty((n + 1, N, d, d))
        J[0] = np.eye(d)
        Jinv[0] = np.eye(d)
        if integrate_ja:
            JAd = np.empty((n + 1, N, d, d))
            JAd[0] = np.eye(d)
    for i in range(n):
        t = grid.t(i)
        x = X[i]
        w = dW[i]
        xn = x + model.drift(t, x) * dt + np.einsum("nak,nk->na", model.sigma(t, x), w)
        if split is not None:
            xn *= split
        if not np.isfinite(xn).all():
            raise PathAbort(i, path_start + _first_bad(xn), "state")
        X[i + 1] = xn
        if flows:
            B = np.ascontiguousarray(np.broadcast_to(coeffs.B(t, x), (N, d, d)))
            S = np.ascontiguousarray(np.broadcast_to(coeffs.Sigma_all(t, x), (N, m, d, d)))
            Jn, Jin = kernels.flow_step(J[i], Jinv[i], B, S, w, dt, realized)
            if not (np.isfinite(Jn).all() and np.isfinite(Jin).all()):
                raise PathAbort(i, path_start + _first_bad(Jn + Jin), "flow")
            J[i + 1] = Jn
            Jinv[i + 1] = Jin
            if integrate_ja:
                grad_b = np.broadcast_to(model.drift_jac(t, x), (N, d, d))
                grad_s = np.stack([np.broadcast_to(model.sigma_jac(t, x, k), (N, d, d))
                                   for k in range(m)], axis=1)
                ja = kernels.forward_step(JAd[i], grad_b, grad_s, w, dt)
                JAd[i + 1] = ja if split is None else split[:, None] * ja
    return PathBatch(grid, coeffs, path_start, dW, X, J, Jinv, JAd, seed, stream)


def simulate_paths(model, x0, grid, seed, path_start, n_paths, *, stream=0, noise_steps=None,
                   flows=True, bracket="realized", coeffs=None, integrate_ja=False):
    """Simulate paths ``path_start .. path_start + n_paths - 1`` as one batch."""
    dW = brownian_increments(seed, path_start, n_paths, grid.n_steps, model.m, grid.T,
                             stream, noise_steps)
    return integrate(model, x0, grid, dW, coeffs=coeffs, flows=flows, bracket=bracket,
                     path_start=path_start, integrate_ja=integrate_ja, seed=seed, stream=stream)


def simulate_with_noise(model, x0, grid, noise: NoisePath, *, bracket="realized", coeffs=None,
                        integrate_ja=False):
    batch = integrate(model, x0, grid, noise.increments[:, None, :], coeffs=coeffs,
                      bracket=bracket, path_start=noise.path_index or 0,
                      integrate_ja=integrate_ja, seed=noise.seed, stream=noise.stream)
    traj = batch.trajectory(0)
    return Trajectory(grid, noise, traj.X, traj.J, traj.Jinv, traj.JA)


def simulate_path(model, x0, grid, seed, path_index, *, stream=0, noise_steps=None,
                  bracket="realized", integrate_ja=False):
    """Simulate one path; bit-reproducible from (seed, path_index, stream)."""
    noise = NoisePath.generate(grid, model.m, seed, path_index, stream, noise_steps)
    return simulate_with_noise(model, x0, grid, noise, bracket=bracket, integrate_ja=integrate_ja)


def shift_rate(traj: Trajectory, model, v):
    """Rate of the Cameron-Martin direction: sigma^{-1}(t_i, X_i) JA_i Jinv_T v."""
    w = traj.Jinv[-1] @ np.asarray(v, dtype=float)
    grid = traj.grid
    rates = np.empty((grid.n_steps, model.m))
    for i in range(grid.n_steps):
        rates[i] = model.sigma_inv(grid.t(i), traj.X[i]) @ (traj.JA[i] @ w)
    return rates


def simulate_shifted_path(model, x0, grid, noise: NoisePath, shift_rate, epsilon, *,
                          bracket="realized"):
    """Re-simulate with increments dW_i + epsilon * shift_rate_i * dt."""
    shift_rate = np.asarray(shift_rate, dtype=float)
    if shift_rate.shape != noise.increments.shape:
        raise ValueError("shift_rate must have shape (n_steps, m)")
    if epsilon == 0:
        shifted = noise
    else:
        shifted = NoisePath(noise.increments + epsilon * shift_rate * grid.dt,
                            noise.seed, noise.path_index, noise.stream)
    return simulate_with_noise(model, x0, grid, shifted, bracket=bracket)


# ---------------------------------------------------------------------------
# semilinear matrix SDEs  dY = a dt + b Y dt + sum_k c_k Y dw_k + sum_k f_k dw_k

@dataclass(frozen=True)
class SemilinearCoeffs:
    """Coefficient processes sampled at the left grid nodes.

    Shapes: a, b (n, p, p); c, f (n, m, p, p).
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        n, p, _ = self.a.shape
        if self.b.shape != (n, p, p) or self.c.shape[0:1] + self.c.shape[2:] != (n, p, p) \
                or self.f.shape != self.c.shape:
            raise ValueError("inconsistent semilinear coefficient shapes")
        for name in ("a", "b", "c", "f"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"coefficient {name} has non-finite entries")

    @property
    def m_noise(self):
        return self.c.shape[1]

    @property
    def p(self):
        return self.a.shape[1]

    @classmethod
    def constant(cls, a, b, c, f, n_steps):
        """Time-constant coefficients; ``c``/``f`` are sequences of m matrices."""
        a, b = np.atleast_2d(a).astype(float), np.atleast_2d(b).astype(float)
        c = np.asarray(c, dtype=float).reshape((-1,) + a.shape)
        f = np.asarray(f, dtype=float).reshape((-1,) + a.shape)
        rep = lambda z: np.ascontiguousarray(np.broadcast_to(z, (n_steps,) + z.shape))
        return cls(rep(a), rep(b), rep(c), rep(f))

    @classmethod
    def from_trajectory(cls, traj: Trajectory, model: ModelSpec):
        """Coefficients of the Jacobian-flow SDE frozen along ``traj`` (a = f = 0)."""
        coeffs = build_conjugated(model)
        grid = traj.grid
        n, d, m = grid.n_steps, model.d, model.m
        b = np.empty((n, d, d))
        c = np.empty((n, m, d, d))
        for i in range(n):
            x = traj.X[i][None, :]
            t = grid.t(i)
            b[i] = np.broadcast_to(coeffs.B(t, x), (1, d, d))[0]
            c[i] = np.broadcast_to(coeffs.Sigma_all(t, x), (1, m, d, d))[0]
        return cls(np.zeros((n, d, d)), b, c, np.zeros((n, m, d, d)))


def _check_semilinear(coeffs, Y0, grid, noise):
    Y0 = np.atleast_2d(np.asarray(Y0, dtype=float))
    if Y0.shape != (coeffs.p, coeffs.p):
        raise ValueError("Y0 shape does not match coefficients")
    if coeffs.a.shape[0] != grid.n_steps or noise.increments.shape != (grid.n_steps, coeffs.m_noise):
        raise ValueError("coefficients, grid and noise disagree on dimensions")
    return Y0


def _abort_if_bad(arr, i, what):
    if not np.isfinite(arr).all():
        raise PathAbort(i, 0, what)


def solve_semilinear_direct_batch(a, b, c, f, Y0, dt, dW):
    """Direct Euler-Maruyama for a batch; arrays carry axes (n, N, ...)."""
    n, N = dW.shape[:2]
    Y = np.empty((n + 1,) + np.shape(Y0))
    Y[0] = Y0
    for i in range(n):
        Y[i + 1] = kernels.affine_step(Y[i], b[i], c[i], a[i], f[i], dW[i], dt)
        _abort_if_bad(Y[i + 1], i, "Y")
    return Y


def solve_semilinear_closed_form_batch(a, b, c, f, Y0, dt, dW, bracket="realized"):
    """Integrating-factor representation evaluated by left-point sums.

    Y_t = G_t {Y0 + int G^{-1} a ds + int G^{-1} f dw - int G^{-1} c f ds},
    with G and G^{-1} advanced by their own Euler schemes. The last integral is
    a covariation term; ``bracket`` selects dt or the realised increments.
    """
    if bracket not in BRACKETS:
        raise ValueError(f"bracket must be one of {BRACKETS}")
    realized = bracket == "realized"
    n, N = dW.shape[:2]
    p = np.shape(Y0)[-1]
    G = np.empty((N, p, p))
    G[:] = np.eye(p)
    Ginv = G.copy()
    Z = np.array(np.broadcast_to(Y0, (N, p, p)))
    Y = np.empty((n + 1, N, p, p))
    Y[0] = Z
    for i in range(n):
        fn = kernels.noise_matrix(f[i], dW[i])
        if realized:
            cf = kernels.noise_matrix(c[i], dW[i]) @ fn
        else:
            cf = np.einsum("nkab,nkbc->nac", c[i], f[i]) * dt
        Z = Z + Ginv @ (a[i] * dt + fn - cf)
        G_next = kernels.forward_step(G, b[i], c[i], dW[i], dt)
        Ginv = kernels.inverse_step(Ginv, b[i], c[i], dW[i], dt, realized)
        G = G_next
        Y[i + 1] = G @ Z
        _abort_if_bad(Y[i + 1], i, "Y")
    return Y


def _single(coeffs):
    return (coeffs.a[:, None], coeffs.b[:, None], coeffs.c[:, None], coeffs.f[:, None])


def solve_semilinear_direct(coeffs: SemilinearCoeffs, Y0, grid: TimeGrid, noise: NoisePath):
    """Y path (n+1, p, p) from the direct Euler recursion."""
    Y0 = _check_semilinear(coeffs, Y0, grid, noise)
    Y = solve_semilinear_direct_batch(*_single(coeffs), Y0[None], grid.dt,
                                      noise.increments[:, None, :])
    return Y[:, 0]


def solve_semilinear_closed_form(coeffs: SemilinearCoeffs, Y0, grid: TimeGrid, noise: NoisePath,
                                 bracket="realized"):
    """Y path (n+1, p, p) from the integrating-factor formula."""
    Y0 = _check_semilinear(coeffs, Y0, grid, noise)
    Y = solve_semilinear_closed_form_batch(*_single(coeffs), Y0[None], grid.dt,
                                           noise.increments[:, None, :], bracket)
    return Y[:, 0]


# ---------------------------------------------------------------------------
# CSV dump

def _fmt(x):
    return "%.17g" % x


def write_trajectory_csv(path, traj: Trajectory):
    d = traj.X.shape[1]
    header = ["t"] + [f"X_{i + 1}" for i in range(d)]
    header += [f"J_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    header += [f"Jinv_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, t in enumerate(traj.grid.nodes):
            row = [t, *traj.X[i], *traj.J[i].ravel(), *traj.Jinv[i].ravel()]
            w.writerow([_fmt(float(z)) for z in row])
