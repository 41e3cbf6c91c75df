"""Small dense linear-algebra and statistics helpers used by the filter.

Everything here works on symmetric positive semi-definite matrices of modest
size (a dozen rows at most) and tolerates rank deficiency: inverses and
determinants are taken over the retained eigenspace only.
"""
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "InputContractError",
    "CovarianceError",
    "IllConditionedError",
    "SpectralFactorization",
    "symmetrize",
    "spectral_factorization",
    "default_tolerance",
    "pinv_psd",
    "pdet_psd",
    "repair_covariance",
    "factor_covariance",
    "inv_guarded",
    "chi_square_quantile",
    "gaussian_likelihood",
    "NULL_SPACE_RTOL",
    "COND_LIMIT",
    "wrap_angle",
]

SYMMETRY_TOL = 1e-9
NULL_SPACE_RTOL = 1e-6
NEGATIVE_EIG_RTOL = 1e-10
COND_LIMIT = 1e12
_LOG_MAX = float(np.log(np.finfo(float).max))


class InputContractError(ValueError):
    """Raised when an argument violates a documented precondition."""


class CovarianceError(ArithmeticError):
    """Raised when a covariance is indefinite beyond floating-point drift."""


class IllConditionedError(np.linalg.LinAlgError):
    """Raised when an explicit inverse would exceed the condition limit."""

    def __init__(self, msg, cond=np.inf):
        super().__init__(msg)
        self.cond = cond


@dataclass(frozen=True)
class SpectralFactorization:
    """Eigen-decomposition ``M = V diag(eigenvalues) V^T`` of a symmetric matrix.

    Eigenvalues are sorted in descending order; ``tolerance`` is the cutoff
    below which an eigenvalue counts as zero.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    tolerance: float

    @property
    def retained(self):
        return self.eigenvalues > self.tolerance

    @property
    def rank(self):
        return int(np.count_nonzero(self.retained))

    def reconstruct(self):
        V, w = self.eigenvectors, self.eigenvalues
        return (V * w) @ V.T


def symmetrize(M):
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + M.T)


def wrap_angle(a):
    """Wrap angles to the half-open interval (-pi, pi]; in-range values pass through unchanged."""
    a = np.asarray(a, dtype=float)
    inside = (a > -np.pi) & (a <= np.pi)
    return np.where(inside, a, np.pi - np.mod(np.pi - a, 2.0 * np.pi))


def _check_square(M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InputContractError(f"expected a square matrix, got shape {M.shape}")
    return M


def _check_symmetric(M):
    M = _check_square(M)
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if M.size and np.max(np.abs(M - M.T)) > SYMMETRY_TOL * scale:
        raise InputContractError("matrix is not symmetric within tolerance")
    return symmetrize(M)


def default_tolerance(eigenvalues, dim):
    """Standard spectral cutoff ``dim * eps * sigma_max``."""
    if len(eigenvalues) == 0:
        return 0.0
    return dim * np.finfo(float).eps * max(float(np.max(np.abs(eigenvalues))), 0.0)


def spectral_factorization(M, tol=None, rtol=None):
    """Factor a symmetric matrix.

    Parameters
    ----------
    M : array_like, shape (n, n)
        Symmetric matrix; symmetrized before factoring.
    tol : float, optional
        Absolute zero-eigenvalue cutoff.
    rtol : float, optional
        Cutoff relative to the largest absolute eigenvalue. Ignored when
        ``tol`` is given. Both absent means :func:`default_tolerance`.
    """
    M = _check_symmetric(M)
    n = M.shape[0]
    if n == 0:
        return SpectralFactorization(np.zeros(0), np.zeros((0, 0)), 0.0)
    w, V = np.linalg.eigh(M)
    w, V = w[::-1], V[:, ::-1]
    if tol is None:
        if rtol is None:
            tol = default_tolerance(w, n)
        else:
            tol = rtol * float(np.max(np.abs(w)))
    if tol < 0:
        raise InputContractError("tolerance must be nonnegative")
    return SpectralFactorization(w, V, float(tol))


def _factor(M, tol, rtol):
    if isinstance(M, SpectralFactorization):
        if tol is not None or rtol is not None:
            raise InputContractError("a precomputed factorization already fixes the tolerance")
        return M
    return spectral_factorization(M, tol=tol, rtol=rtol)


def pinv_psd(M, tol=None, rtol=None):
    """Moore-Penrose pseudoinverse of a symmetric PSD matrix.

    Eigenvalues at or below the cutoff are treated as exactly zero. ``M``
    may also be a precomputed :class:`SpectralFactorization`.

    >>> pinv_psd(np.diag([2.0, 0.0]))
    array([[0.5, 0. ],
           [0. , 0. ]])
    """
    fac = _factor(M, tol, rtol)
    keep = fac.retained
    V = fac.eigenvectors[:, keep]
    return symmetrize((V / fac.eigenvalues[keep]) @ V.T)


def pdet_psd(M, tol=None, rtol=None):
    """Pseudodeterminant and rank of a symmetric PSD matrix.

    Returns ``(pdet, rank)``; a rank-zero matrix has pseudodeterminant 1.
    """
    fac = _factor(M, tol, rtol)
    kept = fac.eigenvalues[fac.retained]
    return float(np.prod(kept)), int(kept.size)


def factor_covariance(M, scale=None, tol=None, name="covariance"):
    """Repair ``M`` like :func:`repair_covariance` and factor it in one pass.

    Returns ``(M_repaired, SpectralFactorization)``; ``tol`` is the
    zero-eigenvalue cutoff of the factorization (default cutoff if None).
    """
    M = symmetrize(_check_square(M))
    n = M.shape[0]
    if n == 0:
        return M, SpectralFactorization(np.zeros(0), np.zeros((0, 0)), 0.0)
    w, V = np.linalg.eigh(M)
    if w[0] < 0.0:
        if scale is None:
            scale = float(np.max(np.abs(w)))
        floor = -NEGATIVE_EIG_RTOL * scale
        if w[0] < floor:
            raise CovarianceError(
                f"{name} has eigenvalue {w[0]:.3e} below drift floor {floor:.3e}"
            )
        w = np.maximum(w, 0.0)
        M = symmetrize((V * w) @ V.T)
    w, V = w[::-1], V[:, ::-1]
    if tol is None:
        tol = default_tolerance(w, n)
    return M, SpectralFactorization(w, V, float(tol))


def repair_covariance(M, scale=None, name="covariance"):
    """Symmetrize ``M`` and clamp float-drift negative eigenvalues to zero.

    Eigenvalues in ``[-1e-10 * scale, 0)`` are set to zero. Anything more
    negative is treated as divergence and raises :class:`CovarianceError`.
    ``scale`` defaults to the largest absolute eigenvalue; callers that
    build ``M`` as a difference of larger terms should pass the size of
    those terms instead.
    """
    return factor_covariance(M, scale=scale, name=name)[0]


def inv_guarded(M, symmetric=True, name="matrix"):
    """Inverse of a small matrix with a condition-number guard."""
    M = _check_square(M)
    if M.size == 0:
        return np.zeros((0, 0))
    if symmetric:
        M = symmetrize(M)
        w, V = np.linalg.eigh(M)
        aw = np.abs(w)
        cond = np.inf if aw.min() == 0.0 else aw.max() / aw.min()
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise IllConditionedError(f"{name} is ill-conditioned (cond={cond:.3e})", cond)
        return symmetrize((V / w) @ V.T)
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IllConditionedError(f"{name} is ill-conditioned (cond={cond:.3e})", cond)
    return np.linalg.inv(M)


def chi_square_quantile(p, alpha):
    """Upper-tail Chi-square threshold ``t`` with ``P(X >= t) = alpha``.

    Parameters
    ----------
    p : int
        Degrees of freedom, at least 1.
    alpha : float
        Tail probability (the test's false-alarm level), in (0, 1).

    Examples
    --------
    >>> round(chi_square_quantile(2, 0.01), 3)
    9.21
    """
    if isinstance(p, bool) or int(p) != p or p < 1:
        raise InputContractError(f"degrees of freedom must be an integer >= 1, got {p!r}")
    if not 0.0 < alpha < 1.0:
        raise InputContractError(f"alpha must lie in (0, 1), got {alpha!r}")
    # Q(p/2, t/2) = alpha  <=>  t = 2 * Q^{-1}(p/2, alpha)
    return 2.0 * float(special.gammainccinv(0.5 * int(p), alpha))


def gaussian_likelihood(nu, P, tol=None, rtol=None, null_rtol=NULL_SPACE_RTOL):
    """Zero-mean Gaussian density of ``nu`` under a possibly singular covariance.

    ``P`` is a matrix or a precomputed :class:`SpectralFactorization`.

    The density lives on the range of ``P``: the normalizer uses the
    pseudodeterminant and ``n = rank(P)``, the exponent the pseudoinverse.
    A residual with a component outside ``range(P)`` larger than
    ``null_rtol * max(1, |nu|)`` has likelihood 0, the limit of the
    regularized density as the vanishing variances go to zero.
    Underflow saturates at 0 and overflow at the largest finite float.
    """
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    if isinstance(P, SpectralFactorization):
        dim = P.eigenvalues.size
    else:
        P = np.atleast_2d(np.asarray(P, dtype=float)) if np.size(P) else np.zeros((0, 0))
        dim = P.shape[0] if P.shape[0] == P.shape[1] else -1
    if dim != nu.size:
        raise InputContractError(
            f"residual of length {nu.size} does not match covariance of size {dim}"
        )
    if nu.size == 0:
        return 1.0
    fac = _factor(P, tol, rtol)
    keep = fac.retained
    V = fac.eigenvectors[:, keep]
    coords = V.T @ nu
    null_part = nu - V @ coords
    if np.linalg.norm(null_part) > null_rtol * max(1.0, float(np.linalg.norm(nu))):
        return 0.0
    w = fac.eigenvalues[keep]
    n = w.size
    log_n = -0.5 * (n * np.log(2.0 * np.pi) + np.sum(np.log(w)) + np.sum(coords**2 / w))
    if log_n >= _LOG_MAX:
        return float(np.finfo(float).max)
    return float(np.exp(log_n))
