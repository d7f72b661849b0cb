"""Integration-by-parts weight M_T^v and its five-term breakdown.

The weight is evaluated in a second pass over a stored trajectory: every term
depends on ``w = Jinv_T v``, which is only known at the horizon. With
``u_i = J_i w`` and ``P_i = sigma^{-1}(t_i, X_i) JA_i`` the left-point sums are

* theta1 = <sum_i P_i^T dW_i, w>
* theta2 = sum_i t_i dt sum_r <Jinv_i B''(u_i, JA_i e_r), e_r>
* theta3 = sum_i t_i sum_j dW_i^j sum_k <Jinv_i Sigma_j''(u_i, JA_i e_k), e_k>
* theta4 = sum_i dt sum_{j,k} P_i[j, k] (Jinv_i Sigma_j u_i)_k
* theta5 = -sum_i t_i dt sum_j sum_r <Jinv_i Sigma_j Sigma_j''(u_i, JA_i e_r), e_r>

Here B'' and Sigma_j'' are the conjugated second derivatives.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .flow import PathBatch, Trajectory
from .model import build_conjugated

TERM_NAMES = ("theta1", "theta2", "theta3", "theta4", "theta5")


class WeightAbort(FloatingPointError):
    def __init__(self, term, path_index):
        super().__init__(f"non-finite {TERM_NAMES[term]} on path {path_index}")
        self.term = term + 1
        self.path_index = path_index


@dataclass(frozen=True)
class WeightBreakdown:
    theta1: float
    theta2: float
    theta3: float
    theta4: float
    theta5: float
    total: float
    v: np.ndarray
    T: float
    theta1_vector: float | None = None

    @property
    def terms(self):
        return (self.theta1, self.theta2, self.theta3, self.theta4, self.theta5)

    def to_dict(self):
        out = {name: float(val) for name, val in zip(TERM_NAMES, self.terms)}
        out.update(total=float(self.total), v=np.asarray(self.v).tolist(), T=self.T)
        return out


@dataclass
class WeightArrays:
    """Per-path weights for a batch: theta (N, 5), total (N,)."""

    path_start: int
    theta: np.ndarray
    theta1_vector: np.ndarray
    total: np.ndarray

    @property
    def path_indices(self):
        return self.path_start + np.arange(self.theta.shape[0])


def _sum_terms(theta):
    # fixed left-to-right order so the total is reproducible
    total = theta[:, 0].copy()
    for k in range(1, 5):
        total += theta[:, k]
    return total


def batch_weights(batch: PathBatch, model, v) -> WeightArrays:
    """Weights for every path of ``batch``; ``v`` is (d,) or per-path (N, d)."""
    if batch.J is None:
        raise ValueError("batch was simulated without flows")
    coeffs = batch.coeffs
    grid = batch.grid
    n, N, d, m = grid.n_steps, batch.n_paths, model.d, model.m
    dt = grid.dt
    v = np.asarray(v, dtype=float)
    v = np.broadcast_to(v, (N, d))
    w = np.ascontiguousarray(np.einsum("nij,nj->ni", batch.Jinv[n], v))
    acc = np.zeros((N, 5))
    g1 = np.zeros((N, d))
    for i in range(n):
        t = grid.t(i)
        x = batch.X[i]
        JA = batch.JA(i)
        u = np.ascontiguousarray(np.einsum("nij,nj->ni", batch.J[i], w))
        P = np.ascontiguousarray(model.sigma_inv(t, x) @ JA)
        # slot r of the direction argument holds JA e_r
        xb = np.broadcast_to(x[:, None, :], (N, d, d))
        ub = np.broadcast_to(u[:, None, :], (N, d, d))
        cols = JA.transpose(0, 2, 1)
        H2 = np.ascontiguousarray(np.broadcast_to(coeffs.B_hess(t, xb, ub, cols), (N, d, d)))
        H = np.empty((N, m, d, d))
        for j in range(m):
            H[:, j] = coeffs.Sigma_hess_k(t, xb, j, ub, cols)
        Sc = np.ascontiguousarray(np.broadcast_to(coeffs.Sigma_all(t, x), (N, m, d, d)))
        kernels.weight_step(acc, g1, P, np.ascontiguousarray(batch.Jinv[i]), Sc, H2, H, u, w,
                            np.ascontiguousarray(batch.dW[i]), t, dt)
    finite = np.isfinite(acc)
    if not finite.all():
        bad_path, bad_term = np.argwhere(~finite)[0]
        raise WeightAbort(int(bad_term), batch.path_start + int(bad_path))
    theta1_vector = np.einsum("ni,ni->n", g1, w)
    return WeightArrays(batch.path_start, acc, theta1_vector, _sum_terms(acc))


def weight_for_path(traj: Trajectory, model, v) -> WeightBreakdown:
    """Five-term weight of one stored trajectory in direction ``v``."""
    d = model.d
    grid = traj.grid
    N = 1
    batch = PathBatch(grid, build_conjugated(model), traj.noise.path_index or 0,
                      traj.noise.increments[:, None, :], traj.X[:, None], traj.J[:, None],
                      traj.Jinv[:, None], traj.JA[:, None], seed=traj.noise.seed,
                      stream=traj.noise.stream)
    arr = batch_weights(batch, model, np.asarray(v, dtype=float).reshape(N, d))
    th = arr.theta[0]
    return WeightBreakdown(*(float(z) for z in th), total=float(arr.total[0]),
                           v=np.array(v, dtype=float), T=grid.T,
                           theta1_vector=float(arr.theta1_vector[0]))


def weight_linearity_check(traj: Trajectory, model, v1, v2, alpha, beta):
    """|M(alpha v1 + beta v2) - alpha M(v1) - beta M(v2)| on one trajectory."""
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    m12 = weight_for_path(traj, model, alpha * v1 + beta * v2).total
    m1 = weight_for_path(traj, model, v1).total
    m2 = weight_for_path(traj, model, v2).total
    return abs(m12 - alpha * m1 - beta * m2)


def write_weights_csv(path, path_indices, theta, total):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_index", *TERM_NAMES, "total"])
        for idx, row, tot in zip(path_indices, theta, total):
            w.writerow([int(idx)] + ["%.17g" % float(z) for z in row] + ["%.17g" % float(tot)])
