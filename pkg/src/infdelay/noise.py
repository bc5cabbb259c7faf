"""Counter-based Brownian increments.

Each trajectory owns a Philox stream keyed by (seed, trajectory index); the
counter advances with the step index, so any trajectory can be regenerated
on its own and the result does not depend on how trajectories are split
across workers.
"""
import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * np.pi


def _uniforms(raw):
    """Map raw 64-bit words to doubles strictly inside (0, 1)."""
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def trajectory_normals(seed, trajectory, n_steps, m):
    """Standard normals of shape (n_steps, m) for one trajectory.

    Step k uses counter blocks [k*nb, (k+1)*nb) with nb = ceil(m / 4);
    pairs of uniforms go through Box-Muller.
    """
    nb = -(-m // 4)
    key = np.array([seed & _MASK64, trajectory & _MASK64], dtype=np.uint64)
    bg = np.random.Philox(key=key)
    raw = bg.random_raw(4 * n_steps * nb).reshape(n_steps, nb * 2, 2)
    u1 = _uniforms(raw[..., 0])
    u2 = _uniforms(raw[..., 1])
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty((n_steps, nb * 2, 2))
    z[..., 0] = r * np.cos(_TWO_PI * u2)
    z[..., 1] = r * np.sin(_TWO_PI * u2)
    return z.reshape(n_steps, nb * 4)[:, :m]


def brownian_increments(seed, paths, n_steps, m, dt, start=0):
    """Increments dW of shape (paths, n_steps, m) for trajectories start..start+paths-1."""
    sq = np.sqrt(dt)
    out = np.empty((paths, n_steps, m))
    for i in range(paths):
        out[i] = trajectory_normals(seed, start + i, n_steps, m) * sq
    return out


def brownian_paths(dW):
    """W on the nodes of [0, T] from increments, W(0) = 0."""
    P, N, m = dW.shape
    W = np.zeros((P, N + 1, m))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    return W
