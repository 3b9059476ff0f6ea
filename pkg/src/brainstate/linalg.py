"""Dense linear algebra used by the alignment code.

All routines work on float64 numpy arrays. The SVD is a one-sided Jacobi
(Hestenes) iteration with round-robin pair ordering, so every step rotates
``cols // 2`` disjoint column pairs at once.
"""
import numpy as np

from .exceptions import DegenerateInputError, NumericalError

MAX_SWEEPS = 100
JACOBI_TOL = 1e-12


def _round_robin(n):
    """Yield ``n - 1`` (or ``n``) rounds of disjoint index pairs covering all pairs."""
    players = list(range(n)) if n % 2 == 0 else list(range(n)) + [-1]
    m = len(players)
    for _ in range(m - 1):
        left = players[: m // 2]
        right = players[m // 2:][::-1]
        pairs = [(a, b) if a < b else (b, a) for a, b in zip(left, right) if a >= 0 and b >= 0]
        yield np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])
        players = [players[0], players[-1]] + players[1:-1]


def _schedule(n):
    return list(_round_robin(n))


def _complete_basis(U, keep):
    """Replace columns of ``U`` not in ``keep`` by an orthonormal completion."""
    r, k = U.shape
    basis = [U[:, j] for j in range(k) if keep[j]]
    out = U.copy()
    candidates = iter(np.eye(r))
    for j in range(k):
        if keep[j]:
            continue
        while True:
            v = next(candidates).copy()
            # two passes of Gram-Schmidt for stability
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                break
        basis.append(v)
        out[:, j] = v
    return out


def svd(A, method="jacobi", tol=JACOBI_TOL, max_sweeps=MAX_SWEEPS):
    """Thin singular value decomposition ``A = U @ diag(S) @ V.T``.

    Parameters
    ----------
    A : array_like of shape (r, c)
    method : {"jacobi", "lapack"}
        ``"jacobi"`` runs the one-sided Jacobi iteration implemented here;
        ``"lapack"`` defers to :func:`numpy.linalg.svd` (much faster for the
        300 x 300 cross-products formed during alignment).
    tol : float
        Relative threshold on column-pair cosines below which a pair counts
        as orthogonal.
    max_sweeps : int
        Iteration cap; exceeding it raises :class:`NumericalError`.

    Returns
    -------
    U : ndarray of shape (r, k)
    S : ndarray of shape (k,)
        Non-negative, non-increasing.
    V : ndarray of shape (c, k)
        With ``k = min(r, c)``.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={A.ndim}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix contains non-finite entries")
    if method == "lapack":
        try:
            U, S, Vt = np.linalg.svd(A, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(str(exc)) from exc
        return U, S, Vt.T
    if method != "jacobi":
        raise ValueError(f"unknown SVD method {method!r}")

    r, c = A.shape
    if r < c:
        V, S, U = svd(A.T, method=method, tol=tol, max_sweeps=max_sweeps)
        return U, S, V
    if c == 0:
        return np.zeros((r, 0)), np.zeros(0), np.zeros((0, 0))
    if r > c:
        # QR first: Jacobi then runs on the square factor and converges faster
        Q, R = np.linalg.qr(A)
        U, S, V = _jacobi(R, tol, max_sweeps)
        return Q @ U, S, V
    return _jacobi(A, tol, max_sweeps)


def _jacobi(A, tol, max_sweeps):
    r, c = A.shape
    # rows of Wt are the working columns; row gathers are contiguous
    Wt = np.array(A.T, order="C")
    Vt = np.eye(c)
    rounds = _schedule(c) if c > 1 else []
    # columns this small are rounding noise of the others
    floor = np.finfo(np.float64).eps * np.linalg.norm(Wt)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            wp, wq = Wt[p], Wt[q]
            alpha = np.einsum("ij,ij->i", wp, wp)
            beta = np.einsum("ij,ij->i", wq, wq)
            gamma = np.einsum("ij,ij->i", wp, wq)
            na, nb = np.sqrt(alpha), np.sqrt(beta)
            active = (np.abs(gamma) > tol * na * nb) & (na > floor) & (nb > floor)
            if not active.any():
                continue
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * np.where(active, gamma, 1.0))
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t = np.where(active, t, 0.0)
            if not t.any():
                continue
            rotated = True
            cs = 1.0 / np.sqrt(1.0 + t * t)
            sn = (cs * t)[:, None]
            cs = cs[:, None]
            Wt[p] = cs * wp - sn * wq
            Wt[q] = sn * wp + cs * wq
            vp, vq = Vt[p], Vt[q]
            Vt[p] = cs * vp - sn * vq
            Vt[q] = sn * vp + cs * vq
        if not rotated:
            break
    else:
        raise NumericalError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    S = np.linalg.norm(Wt, axis=1)
    order = np.argsort(-S, kind="stable")
    S, W, V = S[order], Wt[order].T, Vt[order].T
    scale = S[0] if S[0] > 0 else 1.0
    keep = S > scale * 1e-14 * max(r, c)
    U = np.zeros_like(W)
    U[:, keep] = W[:, keep] / S[keep]
    S = np.where(keep, S, 0.0)
    if not keep.all():
        U = _complete_basis(U, keep)
    return U, S, V


def frobenius_norm(A):
    A = np.asarray(A, dtype=np.float64)
    return float(np.sqrt(np.sum(A * A)))


def frobenius_normalize(A):
    """Scale ``A`` to unit Frobenius norm."""
    A = np.asarray(A, dtype=np.float64)
    norm = frobenius_norm(A)
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateInputError("cannot normalize a matrix with zero Frobenius norm")
    return A / norm


def random_orthogonal(n, seed):
    """Seeded random orthogonal ``n x n`` matrix (QR of a Gaussian matrix)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    # fix the sign ambiguity of QR so the result is a function of the draw
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return Q * d
