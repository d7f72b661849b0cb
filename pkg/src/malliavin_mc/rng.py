"""Counter-based Gaussian increments.

Increment (i, k) of path p under a given seed and stream is a pure function
of those integers, so any subset of paths can be regenerated bit-exactly in
any order and on any number of workers.
"""
import numpy as np

from ._backend import kernels as _kernels

# Second key word; distinguishes this generator's streams from other uses of
# the same seed.
KEY_TAG = 0x6D616C6C6961766E


def _key(seed):
    seed = int(seed)
    if seed < 0 or seed >= 1 << 64:
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    return seed, KEY_TAG


def standard_normals(seed, path_start, n_paths, n_rows, m, stream=0, backend=None):
    """Standard normals of shape (n_paths, n_rows, m) keyed on (seed, stream, p, i, k)."""
    k0, k1 = _key(seed)
    kern = _kernels if backend is None else backend
    z = kern.standard_normals(k0, k1, int(stream), int(path_start), int(n_paths), int(n_rows) * int(m))
    return z.reshape(n_paths, n_rows, m)


def brownian_increments(seed, path_start, n_paths, n_steps, m, T, stream=0,
                        noise_steps=None, backend=None):
    """Brownian increments on a uniform grid, time-major: shape (n_steps, n_paths, m).

    The normals are drawn at resolution ``noise_steps`` (a multiple of
    ``n_steps``; default ``n_steps``) and summed in consecutive groups, so
    grids sharing ``noise_steps`` see the same Brownian path.
    """
    noise_steps = n_steps if noise_steps is None else int(noise_steps)
    if noise_steps % n_steps:
        raise ValueError(f"noise_steps={noise_steps} is not a multiple of n_steps={n_steps}")
    r = noise_steps // n_steps
    z = standard_normals(seed, path_start, n_paths, noise_steps, m, stream, backend)
    z *= np.sqrt(T / noise_steps)
    if r > 1:
        z = z.reshape(n_paths, n_steps, r, m).sum(axis=2)
    return np.ascontiguousarray(z.transpose(1, 0, 2))
