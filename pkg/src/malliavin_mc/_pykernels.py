"""Pure-numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Raw Philox output is bit-identical between the two; floating-point results
agree to a few ulps (libm and numpy may round transcendentals differently).
"""
import numpy as np

NAME = "python"

_U64 = np.uint64
_MASK32 = _U64(0xFFFFFFFF)
_S32 = _U64(32)
_S11 = _U64(11)
_MASK64 = (1 << 64) - 1

PHILOX_M0 = 0xD2E7470EE14C6C93
PHILOX_M1 = 0xCA5A826395121157
PHILOX_W0 = 0x9E3779B97F4A7C15
PHILOX_W1 = 0xBB67AE8584CAA73B

TWO_PI = 6.283185307179586
INV_2_53 = 1.1102230246251565e-16


def _mulhilo(a, b):
    """High and low 64-bit words of the 128-bit product a*b (b scalar)."""
    b = int(b)
    lo = a * _U64(b)
    a_lo = a & _MASK32
    a_hi = a >> _S32
    b_lo = _U64(b & 0xFFFFFFFF)
    b_hi = _U64(b >> 32)
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _S32) + (lh & _MASK32) + (hl & _MASK32)
    hi = hh + (lh >> _S32) + (hl >> _S32) + (mid >> _S32)
    return hi, lo


def philox4x64(c0, c1, c2, c3, k0, k1):
    """Philox4x64-10 block function on arrays of counters.

    ``k0``/``k1`` are Python ints (the key is shared by all lanes).
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in (c0, c1, c2, c3))
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    k0 = int(k0) & _MASK64
    k1 = int(k1) & _MASK64
    with np.errstate(over="ignore"):
        for r in range(10):
            if r:
                k0 = (k0 + PHILOX_W0) & _MASK64
                k1 = (k1 + PHILOX_W1) & _MASK64
            hi0, lo0 = _mulhilo(c0, PHILOX_M0)
            hi1, lo1 = _mulhilo(c2, PHILOX_M1)
            c0, c1, c2, c3 = hi1 ^ c1 ^ _U64(k0), lo1, hi0 ^ c3 ^ _U64(k1), lo0
    return c0, c1, c2, c3


def _uniform(o):
    return ((o >> _S11).astype(np.float64) + 0.5) * INV_2_53


def standard_normals(key0, key1, stream, path_start, n_paths, n_draws):
    """Standard normals keyed on (key, stream, path, draw index).

    Draw ``q`` of path ``p`` is lane ``q % 4`` of the Philox block with
    counter ``(q // 4, p, stream, 0)``; each block feeds two Box-Muller pairs.
    Returns an array of shape (n_paths, n_draws).
    """
    n_blocks = (n_draws + 3) // 4
    blocks = np.arange(n_blocks, dtype=np.uint64)[None, :]
    paths = (np.arange(n_paths, dtype=np.uint64) + _U64(path_start))[:, None]
    o0, o1, o2, o3 = philox4x64(blocks, paths, _U64(stream), _U64(0), key0, key1)
    out = np.empty((n_paths, n_blocks, 4))
    r = np.sqrt(-2.0 * np.log(_uniform(o0)))
    theta = TWO_PI * _uniform(o1)
    out[:, :, 0] = r * np.cos(theta)
    out[:, :, 1] = r * np.sin(theta)
    r = np.sqrt(-2.0 * np.log(_uniform(o2)))
    theta = TWO_PI * _uniform(o3)
    out[:, :, 2] = r * np.cos(theta)
    out[:, :, 3] = r * np.sin(theta)
    return out.reshape(n_paths, 4 * n_blocks)[:, :n_draws].copy()


def noise_matrix(S, dW):
    """sum_k S[:, k] * dW[:, k] for S (N, m, d, d), dW (N, m)."""
    out = S[:, 0] * dW[:, 0, None, None]
    for k in range(1, S.shape[1]):
        out += S[:, k] * dW[:, k, None, None]
    return out


def _step_matrix(B, S, dW, dt):
    return B * dt + noise_matrix(S, dW)


def flow_step(J, Jinv, B, S, dW, dt, realized):
    """One Euler step of the Jacobian flow and of its inverse.

    ``realized`` selects the discrete Ito correction for the inverse:
    (sum_k S_k dW_k)^2 when true, dt * sum_k S_k^2 otherwise.
    """
    noise = noise_matrix(S, dW)
    M = B * dt + noise
    J_new = J + M @ J
    if realized:
        corr = noise @ noise
    else:
        corr = S[:, 0] @ S[:, 0]
        for k in range(1, S.shape[1]):
            corr += S[:, k] @ S[:, k]
        corr *= dt
    Jinv_new = Jinv - Jinv @ (M - corr)
    return J_new, Jinv_new


def affine_step(Y, b, c, a, f, dW, dt):
    """Y + (b dt + sum c_k dW_k) Y + (a dt + sum f_k dW_k)."""
    M = _step_matrix(b, c, dW, dt)
    return (Y + M @ Y) + (a * dt + noise_matrix(f, dW))


def inverse_step(Ginv, b, c, dW, dt, realized):
    """Euler step of the inverse integrating factor alone."""
    noise = noise_matrix(c, dW)
    M = b * dt + noise
    if realized:
        corr = noise @ noise
    else:
        corr = c[:, 0] @ c[:, 0]
        for k in range(1, c.shape[1]):
            corr += c[:, k] @ c[:, k]
        corr *= dt
    return Ginv - Ginv @ (M - corr)


def forward_step(G, b, c, dW, dt):
    M = _step_matrix(b, c, dW, dt)
    return G + M @ G


def weight_step(acc, g1, P, Jinv, Sc, H2, H, u, w, dW, t, dt):
    """Accumulate one left-point contribution to the five weight terms.

    acc (N, 5) receives theta1 (scalar second pass) .. theta5; g1 (N, d)
    receives the vector integral whose contraction with ``w`` is theta1.
    P = sigma^{-1} JA; H2[:, r] = B_hess(u, JA e_r); H[:, j, r] =
    Sigma_hess_j(u, JA e_r); Sc[:, j] = Sigma^{(j)}.
    """
    inc = np.einsum("nji,nj->ni", P, dW)
    g1 += inc
    acc[:, 0] += np.einsum("ni,ni->n", inc, w)
    acc[:, 1] += (t * dt) * np.einsum("nrc,nrc->n", Jinv, H2)
    for j in range(Sc.shape[1]):
        acc[:, 2] += (t * dW[:, j]) * np.einsum("nkc,nkc->n", Jinv, H[:, j])
        JS = Jinv @ Sc[:, j]
        q = np.einsum("nkc,nc->nk", JS, u)
        acc[:, 3] += dt * np.einsum("nk,nk->n", P[:, j, :], q)
        acc[:, 4] -= (t * dt) * np.einsum("nrc,nrc->n", JS, H[:, j])
