"""Expanding matrices, their spectral data, and an adapted norm.

An expanding matrix has all eigenvalue moduli strictly above one.  The
Euclidean norm generally does not grow under such a matrix in one step, so
:func:`build_renorm` constructs the equivalent norm

    ||x||' = sum_{k<m} theta^{-k} ||A^k x||

which satisfies ``||Ax||' >= theta ||x||'`` for the chosen growth factor
``1 < theta < lambda_min``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ConfigError, HorizonExceeded, NotExpanding, Singular

EPS_SPEC = 1e-9
MAX_DIM = 8
DEFAULT_HORIZON = 64
MODES = ("exact-integer", "exact-rational", "float")


@dataclass(frozen=True, eq=False)
class ExpandingMatrix:
    entries: np.ndarray
    n: int
    q: float
    lambda_min: float
    lambda_max: float
    eigenvalues: np.ndarray
    inverse: np.ndarray
    # spectral norms of A^k and A^{-k}, index k = 0..horizon
    op_norms: np.ndarray
    inv_op_norms: np.ndarray
    integer: bool

    @property
    def horizon(self) -> int:
        return len(self.op_norms) - 1

    def op_norm(self, k: int) -> float:
        """Spectral norm of ``A^k`` (negative ``k`` allowed)."""
        if abs(k) <= self.horizon:
            return float(self.op_norms[k] if k >= 0 else self.inv_op_norms[-k])
        base = self.entries if k > 0 else self.inverse
        return float(np.linalg.norm(np.linalg.matrix_power(base, abs(k)), 2))


def _as_square(matrix) -> np.ndarray:
    a = np.atleast_2d(np.asarray(matrix, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigError(f"matrix must be square, got shape {a.shape}")
    if a.shape[0] > MAX_DIM:
        raise ConfigError(f"dimension {a.shape[0]} exceeds desk-scale limit {MAX_DIM}")
    if not np.all(np.isfinite(a)):
        raise ConfigError("matrix has non-finite entries")
    return a


def spectral_data(
    matrix, eps_spec: float = EPS_SPEC, horizon: int = DEFAULT_HORIZON
) -> ExpandingMatrix:
    """Validate ``matrix`` as expanding and cache its spectral constants.

    Raises
    ------
    Singular
        If the determinant vanishes.
    NotExpanding
        If some eigenvalue modulus is ``<= 1 + eps_spec``.
    """
    a = _as_square(matrix)
    n = a.shape[0]
    det = float(np.linalg.det(a))
    integer = bool(np.all(a == np.round(a)))
    if integer:
        # exact determinant avoids a false Singular on large integer entries
        det_exact = _exact_det([[Fraction(int(v)) for v in row] for row in a])
        if det_exact == 0:
            raise Singular("matrix is singular")
        det = float(det_exact)
    elif det == 0.0:
        raise Singular("matrix is singular")
    eig = np.linalg.eigvals(a)
    mod = np.abs(eig)
    if np.min(mod) <= 1.0 + eps_spec:
        raise NotExpanding(
            f"eigenvalue modulus {np.min(mod):.12g} is not > 1 (eps={eps_spec:g})"
        )
    inv = np.linalg.inv(a)
    fwd = np.empty(horizon + 1)
    bwd = np.empty(horizon + 1)
    p = np.eye(n)
    pi = np.eye(n)
    for k in range(horizon + 1):
        fwd[k] = np.linalg.norm(p, 2)
        bwd[k] = np.linalg.norm(pi, 2)
        p = p @ a
        pi = pi @ inv
    return ExpandingMatrix(
        entries=a,
        n=n,
        q=abs(det),
        lambda_min=float(np.min(mod)),
        lambda_max=float(np.max(mod)),
        eigenvalues=eig,
        inverse=inv,
        op_norms=fwd,
        inv_op_norms=bwd,
        integer=integer,
    )


@dataclass(frozen=True, eq=False)
class RenormedNorm:
    """The norm ``sum_{k<m} theta^{-k} ||A^k x||`` in which ``A`` expands by ``theta``."""

    matrix: ExpandingMatrix
    theta: float
    m: int
    powers: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    def __call__(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=float)
        if self.m == 1:
            out = np.linalg.norm(x, axis=-1)
        else:
            # (..., m, n) stack of A^k x
            ak = np.einsum("kij,...j->...ki", self.powers, x)
            out = np.linalg.norm(ak, axis=-1) @ self.weights
        return float(out) if np.ndim(out) == 0 else out

    @property
    def equivalence(self) -> float:
        """Constant ``c`` with ``||x|| <= ||x||' <= c ||x||``."""
        return float(sum(w * self.matrix.op_norm(k) for k, w in enumerate(self.weights)))

    def inverse_power_bound(self, j: int) -> float:
        """Upper bound on the operator norm of ``A^{-j}`` in this norm, ``j >= 0``.

        ``A^{-j}`` commutes with every ``A^k`` so its renormed operator norm is
        at most its spectral norm; expansivity also gives ``theta^{-j}``.
        """
        return min(self.matrix.op_norm(-j), self.theta ** (-j))

    def inverse_series_bound(self, start: int = 1, terms: int = 200) -> float:
        """Bound on ``sum_{j>=start} ||A^{-j}||'_op`` with a geometric tail."""
        total = math.fsum(self.inverse_power_bound(j) for j in range(start, start + terms))
        tail = self.inverse_power_bound(start + terms) / (self.theta - 1.0)
        return total + tail

    def euclid_inverse_series(self, terms: int = 200) -> float:
        """Bound on ``sum_{i>=1} ||A^{-i}||`` (spectral norms)."""
        head = math.fsum(self.matrix.op_norm(-i) for i in range(1, terms + 1))
        return head + self.equivalence * self.theta ** (-terms) / (self.theta - 1.0)


def build_renorm(
    A: ExpandingMatrix,
    theta: float | None = None,
    samples: int = 10_000,
    seed: int = 0,
    max_window: int = 64,
) -> RenormedNorm:
    """Construct the adapted norm for ``A`` with growth factor ``theta``.

    ``m`` is the smallest window length for which the least singular value of
    ``A^m`` is at least ``theta^m``; that inequality makes the telescoped sum
    expand by ``theta``.  Expansivity is re-checked on random samples.
    """
    if theta is None:
        theta = (1.0 + A.lambda_min) / 2.0
    if not 1.0 < theta < A.lambda_min:
        raise ConfigError(
            f"theta={theta} must lie strictly between 1 and lambda_min={A.lambda_min}"
        )
    p = np.eye(A.n)
    m = None
    for k in range(1, max_window + 1):
        p = p @ A.entries
        smin = np.linalg.svd(p, compute_uv=False)[-1]
        if smin >= theta**k:
            m = k
            break
    if m is None:
        raise HorizonExceeded(
            f"no window m <= {max_window} with sigma_min(A^m) >= theta^m; "
            f"theta={theta} is too close to lambda_min={A.lambda_min}"
        )
    powers = np.stack([np.linalg.matrix_power(A.entries, k) for k in range(m)])
    weights = theta ** -np.arange(m, dtype=float)
    norm = RenormedNorm(matrix=A, theta=float(theta), m=m, powers=powers, weights=weights)

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((samples, A.n)) * np.exp(rng.uniform(-5, 5, (samples, 1)))
    lhs = norm(x @ A.entries.T)
    rhs = theta * norm(x)
    if np.any(lhs < rhs * (1 - 1e-12)):
        raise RuntimeError("renormed norm failed the expansivity check")
    return norm


def _exact_det(rows: list[list[Fraction]]) -> Fraction:
    a = [row[:] for row in rows]
    n = len(a)
    det = Fraction(1)
    for c in range(n):
        piv = next((r for r in range(c, n) if a[r][c] != 0), None)
        if piv is None:
            return Fraction(0)
        if piv != c:
            a[c], a[piv] = a[piv], a[c]
            det = -det
        det *= a[c][c]
        for r in range(c + 1, n):
            f = a[r][c] / a[c][c]
            if f:
                a[r] = [a[r][j] - f * a[c][j] for j in range(n)]
    return det


def _exact_inverse(rows: list[list[Fraction]]) -> list[list[Fraction]]:
    n = len(rows)
    a = [list(row) + [Fraction(int(i == j)) for j in range(n)] for i, row in enumerate(rows)]
    for c in range(n):
        piv = next(r for r in range(c, n) if a[r][c] != 0)
        a[c], a[piv] = a[piv], a[c]
        inv_p = 1 / a[c][c]
        a[c] = [v * inv_p for v in a[c]]
        for r in range(n):
            if r != c and a[r][c] != 0:
                f = a[r][c]
                a[r] = [a[r][j] - f * a[c][j] for j in range(2 * n)]
    return [row[n:] for row in a]


def _to_fraction(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, (int, np.integer)):
        return Fraction(int(v))
    if isinstance(v, str):
        return Fraction(v)
    # decimal reading of the float: 0.1 -> 1/10
    return Fraction(str(float(v)))


def matrix_power_apply(A: ExpandingMatrix, k: int, x, exact: bool = False):
    """Return ``A^k x``.

    With ``exact=True`` the computation uses rational arithmetic (``A`` must
    have integer entries) and returns a list of :class:`~fractions.Fraction`.
    """
    k = int(k)
    if exact:
        if not A.integer:
            raise ConfigError("exact powers need an integer matrix")
        mat = [[Fraction(int(v)) for v in row] for row in A.entries]
        if k < 0:
            mat = _exact_inverse(mat)
        vec = [_to_fraction(v) for v in np.ravel(np.asarray(x, dtype=object))]
        for _ in range(abs(k)):
            vec = [sum((row[j] * vec[j] for j in range(A.n)), Fraction(0)) for row in mat]
        return vec
    x = np.asarray(x, dtype=float)
    if k == 0:
        return x.copy()
    base = A.entries if k > 0 else A.inverse
    return x @ np.linalg.matrix_power(base, abs(k)).T


@dataclass(frozen=True, eq=False)
class ExpandingSystem:
    """An expanding matrix with a digit set, the data of a self-affine IFS."""

    A: ExpandingMatrix
    digits: np.ndarray
    mode: str
    tau: float
    norm: RenormedNorm
    # integer digit representation (digits * digit_scale) in exact modes
    int_digits: np.ndarray | None = None
    digit_scale: int = 1

    @property
    def n(self) -> int:
        return self.A.n

    @property
    def N(self) -> int:
        return len(self.digits)

    @property
    def q(self) -> float:
        return self.A.q

    @property
    def s(self) -> float:
        """Pseudo similarity dimension ``n ln N / ln q``."""
        return self.n * math.log(self.N) / math.log(self.q)

    @property
    def r(self) -> float:
        """Contraction ratio ``q^{-1/n}`` of each map in the pseudo norm."""
        return self.q ** (-1.0 / self.n)

    @property
    def exact(self) -> bool:
        return self.mode != "float"

    @property
    def int_matrix(self) -> np.ndarray:
        return np.round(self.A.entries).astype(np.int64)

    def describe(self) -> dict:
        return {
            "matrix": self.A.entries.tolist(),
            "digits": self.digits.tolist(),
            "mode": self.mode,
            "tau": self.tau,
            "theta": self.norm.theta,
            "renorm_m": self.norm.m,
        }


def _parse_digits(digits, n: int) -> list[list]:
    rows = list(digits)
    out = []
    for d in rows:
        if isinstance(d, (list, tuple, np.ndarray)):
            d = list(d)
        else:
            d = [d]
        if len(d) != n:
            raise ConfigError(f"digit {d} has dimension {len(d)}, expected {n}")
        out.append(d)
    return out


def make_system(
    matrix,
    digits: Sequence,
    mode: str | None = None,
    tau: float = 1e-9,
    theta: float | None = None,
    eps_spec: float = EPS_SPEC,
) -> ExpandingSystem:
    """Build and validate an :class:`ExpandingSystem`.

    ``mode`` defaults to ``"exact-integer"`` when every matrix and digit entry
    is an integer and to ``"float"`` otherwise.  Digits may be given as
    strings such as ``"1/3"`` in ``"exact-rational"`` mode.
    """
    A = spectral_data(matrix, eps_spec=eps_spec)
    raw = _parse_digits(digits, A.n)
    if mode is None:
        all_int = all(
            isinstance(v, (int, np.integer)) or (isinstance(v, float) and v.is_integer())
            for d in raw
            for v in d
        )
        mode = "exact-integer" if A.integer and all_int else "float"
    if mode not in MODES:
        raise ConfigError(f"unknown arithmetic mode {mode!r}")

    int_digits = None
    scale = 1
    if mode == "float":
        D = np.array([[float(v) for v in d] for d in raw], dtype=float)
    else:
        if not A.integer:
            raise ConfigError(f"{mode} mode requires an integer matrix")
        fr = [[_to_fraction(v) for v in d] for d in raw]
        if mode == "exact-integer" and any(v.denominator != 1 for d in fr for v in d):
            raise ConfigError("exact-integer mode requires integer digits")
        for d in fr:
            for v in d:
                scale = scale * v.denominator // math.gcd(scale, v.denominator)
        int_digits = np.array([[int(v * scale) for v in d] for d in fr], dtype=np.int64)
        D = np.array([[float(v) for v in d] for d in fr], dtype=float)

    if not np.any(np.all(D == 0, axis=1)):
        raise ConfigError("digit set must contain 0")
    if int_digits is not None:
        if len({tuple(d) for d in int_digits.tolist()}) != len(int_digits):
            raise ConfigError("digits must be pairwise distinct")
    else:
        diff = np.max(np.abs(D[:, None, :] - D[None, :, :]), axis=-1)
        np.fill_diagonal(diff, np.inf)
        if np.min(diff) <= tau:
            raise ConfigError("digits must be pairwise distinct (beyond tau)")
    if len(D) < 2:
        raise ConfigError("need at least two digits")
    norm = build_renorm(A, theta)
    return ExpandingSystem(
        A=A, digits=D, mode=mode, tau=float(tau), norm=norm,
        int_digits=int_digits, digit_scale=scale,
    )
