"""SVD-based multipath decoupling of an angular-delay matrix into rank-1 path components."""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)

_EPS = np.finfo(float).eps


class ZeroChannelError(ValueError):
    """Raised when a channel with zero energy is handed to the decoupler."""


_CHUNK = 32  # matrices per Jacobi batch; keeps the working set cache-resident
# Once every rotation of a sweep had relative coupling below this, the
# quadratic convergence of cyclic Jacobi leaves O(_SETTLE**2) behind.
_SETTLE = 1e-7


@functools.lru_cache(maxsize=None)
def _schedule(n):
    """Circle-method tournament for n (even) columns.

    Returns (first_layout, perms): in every round the pairs to rotate sit at
    adjacent positions (2i, 2i+1), and ``perms[r]`` reorders the layout of
    round r into that of round r+1 (wrapping to the next sweep).
    """
    players = list(range(n))
    layouts = []
    for _ in range(n - 1):
        layout = []
        for i in range(n // 2):
            layout += [players[i], players[n - 1 - i]]
        layouts.append(np.array(layout))
        players = [players[0], players[-1]] + players[1:-1]
    perms = []
    for r in range(n - 1):
        inv = np.empty(n, dtype=int)
        inv[layouts[r]] = np.arange(n)
        perms.append(inv[layouts[(r + 1) % (n - 1)]])
    return layouts[0], tuple(perms)


def _jacobi_chunk(A, max_sweeps):
    B, m, n = A.shape
    N = n + n % 2
    K = N // 2
    first, perms = _schedule(N)
    # row j of X holds column j of A followed by column j of V
    X = np.zeros((B, N, m + N), dtype=complex)
    X[:, :n, :m] = A.transpose(0, 2, 1)
    X[:, np.arange(N), m + np.arange(N)] = 1.0
    X = X[:, first]
    tol = max(m, 1) * _EPS
    live = np.arange(B)
    W = X
    for _ in range(max_sweeps):
        if live.size == 0:
            break
        worst = np.zeros(live.size)
        for perm in perms:
            pairs = W.reshape(W.shape[0], K, 2, m + N)
            xp, xq = pairs[:, :, 0, :m], pairs[:, :, 1, :m]
            fp, fq = xp.view(float), xq.view(float)
            alpha = np.einsum("bki,bki->bk", fp, fp)
            beta = np.einsum("bki,bki->bk", fq, fq)
            gamma = np.vecdot(xp, xq)  # conjugates its first argument
            g = np.abs(gamma)
            scale = np.sqrt(alpha * beta)
            active = g > tol * scale
            if active.any():
                worst = np.maximum(worst, np.max(np.where(active, g / np.where(active, scale, 1.0), 0.0), axis=1))
                g_safe = np.where(active, g, 1.0)
                zeta = (beta - alpha) / (2.0 * g_safe)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ph = np.where(active, gamma / g_safe, 1.0).conj()
                # [x_p, x_q] <- [c x_p - s ph x_q, s x_p + c ph x_q], ph = exp(-j arg gamma)
                J = np.empty(c.shape + (2, 2), dtype=complex)
                J[..., 0, 0] = c
                J[..., 0, 1] = -s * ph
                J[..., 1, 0] = s
                J[..., 1, 1] = c * ph
                np.matmul(J, pairs, out=pairs)
            W = W[:, perm]
        X[live] = W
        live = live[worst > _SETTLE]
        W = X[live]
    if live.size:
        log.warning("Jacobi SVD did not converge in %d sweeps", max_sweeps)
    # a full sweep of permutations returns every column to the ``first`` layout
    inv = np.empty(N, dtype=int)
    inv[first] = np.arange(N)
    X = X[:, inv]
    return X[:, :n, :m].transpose(0, 2, 1), X[:, :n, m:m + n].transpose(0, 2, 1)


def _jacobi_columns(A, max_sweeps=40):
    """One-sided (Hestenes) Jacobi on a stack (B, m, n), m >= n.

    Returns (A V, V) where the columns of A V are mutually orthogonal.
    All disjoint column pairs of a round are rotated at once, matrices are
    processed in lockstep in small chunks, and matrices that finish a sweep
    without rotating leave the working set.
    """
    B, m, n = A.shape
    if n == 1:
        return A.copy(), np.ones((B, 1, 1), dtype=complex)
    AV = np.empty_like(A, dtype=complex)
    V = np.empty((B, n, n), dtype=complex)
    for i in range(0, B, _CHUNK):
        AV[i:i + _CHUNK], V[i:i + _CHUNK] = _jacobi_chunk(A[i:i + _CHUNK], max_sweeps)
    return AV, V


def _complete_basis(U, rank):
    """Replace columns rank: of U (m x k) with an orthonormal completion of U[:, :rank]."""
    m, k = U.shape
    if rank >= k:
        return U
    Q, _ = np.linalg.qr(np.concatenate([U[:, :rank], np.eye(m, dtype=complex)], axis=1))
    out = U.copy()
    out[:, rank:] = Q[:, rank:k]
    return out


def _normalize_phase(U, V):
    """Make the first non-negligible entry of every u real and non-negative."""
    mag = np.abs(U)
    first = np.argmax(mag > 1e-12, axis=-2)  # (..., k)
    lead = np.take_along_axis(U, first[..., None, :], axis=-2)
    lead_mag = np.abs(lead)
    ph = np.where(lead_mag > 1e-12, lead / np.where(lead_mag > 0, lead_mag, 1.0), 1.0).conj()
    return U * ph, V * ph


def _pivoted_qr(A):
    """Economy QR with column pivoting of each matrix in a stack: A[:, :, p] = Q R."""
    B, m, n = A.shape
    Q = np.empty((B, m, n), dtype=complex)
    R = np.empty((B, n, n), dtype=complex)
    P = np.empty((B, n), dtype=int)
    for b in range(B):
        Q[b], R[b], P[b] = scipy.linalg.qr(A[b], mode="economic", pivoting=True)
    return Q, R, P


def svd_complex(m, max_sweeps=40):
    """Economy SVD ``m = U diag(s) V^H`` of a matrix or a stack of matrices.

    Returns (s, U, V) with singular values in descending order, U of shape
    (..., rows, k) and V of shape (..., cols, k), k = min(rows, cols).

    The matrix is first reduced by a column-pivoted QR, A P = Q R, and
    one-sided Jacobi runs on R^H = U_x S V_x^H, whose columns are already
    graded by norm. Then A = (Q V_x) S (P U_x)^H.
    """
    m = np.asarray(m)
    if not np.all(np.isfinite(m)):
        raise ValueError("svd_complex: non-finite input")
    single = m.ndim == 2
    A = m.astype(complex)[None] if single else m.astype(complex)
    lead_shape = A.shape[:-2]
    rows, cols = A.shape[-2:]
    A = A.reshape((-1, rows, cols))
    transposed = rows < cols
    if transposed:
        A = A.conj().transpose(0, 2, 1)
    Q, R, P = _pivoted_qr(A)
    XV, Vx = _jacobi_columns(R.conj().transpose(0, 2, 1), max_sweeps)
    s = np.linalg.norm(XV, axis=1)  # (B, k)
    order = np.argsort(-s, axis=1, kind="stable")
    s = np.take_along_axis(s, order, axis=1)
    XV = np.take_along_axis(XV, order[:, None, :], axis=2)
    Vx = np.take_along_axis(Vx, order[:, None, :], axis=2)
    thresh = max(A.shape[1:]) * _EPS * s[:, :1]
    good = s > thresh
    Ux = XV / np.where(good, s, 1.0)[:, None, :]
    for b in np.flatnonzero(~good.all(axis=1)):
        rank = int(good[b].sum())
        Ux[b] = _complete_basis(Ux[b], rank)
    U = Q @ Vx
    V = np.empty_like(Ux)
    np.put_along_axis(V, P[:, :, None], Ux, axis=1)
    if transposed:
        U, V = V, U
    U, V = _normalize_phase(U, V)
    k = s.shape[1]
    s = s.reshape(lead_shape + (k,))
    U = U.reshape(lead_shape + U.shape[1:])
    V = V.reshape(lead_shape + V.shape[1:])
    if single:
        return s[0], U[0], V[0]
    return s, U, V


@dataclass(frozen=True)
class PathComponent:
    sigma: float
    u: np.ndarray
    v: np.ndarray
    index: int

    @property
    def matrix(self):
        """sigma * u v^H in the angular-delay domain."""
        return self.sigma * np.outer(self.u, self.v.conj())


@dataclass(frozen=True)
class DecouplingResult:
    components: tuple[PathComponent, ...]
    captured_energy_ratio: float
    eta: float
    total_energy: float
    singular_values: np.ndarray
    capped: bool = False

    @property
    def r_hat(self):
        return len(self.components)

    def stack(self):
        """(R_hat, N_T, N_c) array of component matrices."""
        return np.stack([c.matrix for c in self.components])

    def reconstruction(self):
        return self.stack().sum(axis=0)


def select_rank(sigma, total_energy, eta, r_max=None):
    """Smallest r with sum_{i<=r} sigma_i^2 >= eta * total, capped at r_max.

    Returns (r, capped).
    """
    k = len(sigma)
    csum = np.cumsum(np.asarray(sigma, dtype=float) ** 2)
    hit = np.flatnonzero(csum >= eta * total_energy)
    # with eta = 1 rounding can leave the full sum a hair short of the total
    r = int(hit[0]) + 1 if hit.size else k
    cap = k if r_max is None else min(k, int(r_max))
    if r > cap:
        return cap, True
    return r, False


def _check_eta(eta):
    if not 0.0 < eta <= 1.0:
        raise ValueError("eta must lie in (0, 1]")


def _result(s, U, V, total, eta, r_max):
    if not total > 0.0:
        raise ZeroChannelError("cannot decouple a zero-energy channel")
    r, capped = select_rank(s, total, eta, r_max)
    comps = tuple(PathComponent(float(s[i]), U[:, i].copy(), V[:, i].copy(), i) for i in range(r))
    captured = float(np.sum(s[:r] ** 2) / total)
    if capped:
        log.info("R_hat capped at %d: captured %.6f of energy, eta=%.6f", r, captured, eta)
    return DecouplingResult(comps, captured, float(eta), float(total), np.asarray(s), capped)


def decouple(ht, eta=0.99, r_max=16):
    """Decompose an angular-delay matrix into its leading rank-1 path components.

    ``r_max=None`` removes the configurable cap (min(N_T, N_c) still applies).
    """
    _check_eta(eta)
    ht = np.asarray(ht)
    total = float(np.vdot(ht, ht).real)
    if not total > 0.0:
        raise ZeroChannelError("cannot decouple a zero-energy channel")
    s, U, V = svd_complex(ht)
    return _result(s, U, V, total, eta, r_max)


def decouple_batch(hts, eta=0.99, r_max=16):
    """Decouple a stack (B, N_T, N_c); the SVDs run as one batch."""
    _check_eta(eta)
    hts = np.asarray(hts)
    totals = np.einsum("bij,bij->b", hts.conj(), hts).real
    if np.any(~(totals > 0.0)):
        bad = int(np.flatnonzero(~(totals > 0.0))[0])
        raise ZeroChannelError(f"sample {bad} has zero energy")
    s, U, V = svd_complex(hts)
    return [_result(s[b], U[b], V[b], float(totals[b]), eta, r_max) for b in range(hts.shape[0])]
