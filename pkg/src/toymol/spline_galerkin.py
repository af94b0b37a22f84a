"""B-spline Galerkin machinery: bases, quadrature, assembly and eigensolves.

Matrices are assembled element by element in the raw (clamped, uniform
knot) B-spline basis and then projected onto the retained basis through a
sparse transformation ``T`` that encodes the edge conditions::

    A_retained = T.T @ A_raw @ T

Every integral is a 10-node Gauss-Legendre sum on each knot interval.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.interpolate import BSpline
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh, splu

log = logging.getLogger(__name__)

QUAD_NODES = 10
DENSE_LIMIT = 400


class Edge(str, enum.Enum):
    FREE = "free"
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"


class ConvergenceError(RuntimeError):
    def __init__(self, message, n_converged=0):
        super().__init__(f"{message} ({n_converged} pairs converged)")
        self.n_converged = n_converged


@dataclass(frozen=True, eq=False)
class BSplineBasis:
    """Uniform-knot B-spline basis on ``[lo, hi]`` with edge conditions.

    ``order`` is the polynomial order (degree + 1). ``size`` counts the
    retained functions after the edge conditions are imposed.
    """

    lo: float
    hi: float
    n_intervals: int
    order: int = 5
    left: Edge = Edge.FREE
    right: Edge = Edge.FREE
    quad_nodes: int = QUAD_NODES
    knots: np.ndarray = field(init=False, repr=False)
    transform: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "left", Edge(self.left))
        object.__setattr__(self, "right", Edge(self.right))
        if not self.hi > self.lo:
            raise ValueError("degenerate basis domain")
        if self.n_intervals < 1:
            raise ValueError("need at least one knot interval")
        k = self.degree
        breaks = np.linspace(self.lo, self.hi, self.n_intervals + 1)
        knots = np.r_[[self.lo] * k, breaks, [self.hi] * k]
        object.__setattr__(self, "knots", knots)
        n = self.n_raw
        if n < 2 + (self.left is not Edge.FREE) + (self.right is not Edge.FREE):
            raise ValueError("too few B-splines for the requested edge conditions")
        T = sp.identity(n, format="lil")
        cols = list(range(n))
        if self.left is Edge.NEUMANN:
            # B_0 + B_1 has zero slope at the left edge; the others already do
            T[1, 0] = 1.0
            cols.remove(1)
        elif self.left is Edge.DIRICHLET:
            cols.remove(0)
        if self.right is Edge.NEUMANN:
            T[n - 2, n - 1] = 1.0
            cols.remove(n - 2)
        elif self.right is Edge.DIRICHLET:
            cols.remove(n - 1)
        object.__setattr__(self, "transform", T.tocsr()[:, cols].tocsr())

    @property
    def degree(self) -> int:
        return self.order - 1

    @property
    def n_raw(self) -> int:
        return self.n_intervals + self.degree

    @property
    def size(self) -> int:
        return self.transform.shape[1]

    @property
    def breakpoints(self) -> np.ndarray:
        return self.knots[self.degree : self.degree + self.n_intervals + 1]

    def evaluate_raw(self, x, deriv: int = 0) -> np.ndarray:
        """All raw B-splines at ``x``; shape ``(len(x), n_raw)``. Zero outside the domain."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.zeros((x.size, self.n_raw))
        inside = (x >= self.lo) & (x <= self.hi)
        h = (self.hi - self.lo) / self.n_intervals
        cell = np.clip(((x - self.lo) // h).astype(int), 0, self.n_intervals - 1)
        for e in np.unique(cell[inside]):
            sel = inside & (cell == e)
            out[np.ix_(sel, e + np.arange(self.order))] = self._local(e, x[sel], deriv)
        return out

    def _local(self, e: int, x: np.ndarray, deriv: int) -> np.ndarray:
        k = self.degree
        spl = BSpline(self.knots[e : e + 2 * k + 2], np.eye(k + 1), k, extrapolate=True)
        if deriv:
            spl = spl.derivative(deriv)
        return spl(x)

    def evaluate(self, x, deriv: int = 0) -> np.ndarray:
        """Retained basis functions at ``x``; shape ``(len(x), size)``."""
        return np.asarray(self.transform.T @ self.evaluate_raw(x, deriv).T).T

    def quadrature(self):
        """Nodes and weights per interval, both shaped ``(n_intervals, quad_nodes)``."""
        return _quadrature(self.lo, self.hi, self.n_intervals, self.quad_nodes)

    def local_values(self, deriv: int = 0) -> np.ndarray:
        """Raw splines that live on each interval, evaluated at its nodes.

        Shape ``(n_intervals, quad_nodes, order)``; entry ``[e, q, a]`` is
        spline ``e + a`` at node ``q`` of interval ``e``.
        """
        x, _ = self.quadrature()
        return np.stack([self._local(e, x[e], deriv) for e in range(self.n_intervals)])

    def local_index(self) -> np.ndarray:
        return np.arange(self.n_intervals)[:, None] + np.arange(self.order)[None, :]

    def project(self, raw: sp.spmatrix) -> sp.csr_matrix:
        return (self.transform.T @ raw @ self.transform).tocsr()

    def expand(self, coeffs) -> np.ndarray:
        """Raw-basis coefficients from retained-basis coefficients."""
        return self.transform @ np.asarray(coeffs)


def _quadrature(lo, hi, n_intervals, n_nodes):
    t, w = np.polynomial.legendre.leggauss(n_nodes)
    h = (hi - lo) / n_intervals
    left = lo + h * np.arange(n_intervals)
    x = left[:, None] + 0.5 * h * (t[None, :] + 1.0)
    wts = np.broadcast_to(0.5 * h * w, x.shape).copy()
    return x, wts


def build_basis(domain, count: int, order: int = 5, boundary=(Edge.FREE, Edge.FREE)) -> BSplineBasis:
    """Basis on ``domain`` holding exactly ``count`` retained functions."""
    lo, hi = domain
    left, right = (Edge(b) for b in boundary)
    if count < order + 1:
        raise ValueError(f"need count >= order + 1, got count={count}, order={order}")
    removed = (left is not Edge.FREE) + (right is not Edge.FREE)
    n_intervals = count + removed - (order - 1)
    return BSplineBasis(lo, hi, n_intervals, order, left, right)


def _assemble_raw(basis: BSplineBasis, integrand_weights, d1: int, d2: int) -> sp.csr_matrix:
    B1 = basis.local_values(d1)
    B2 = B1 if d2 == d1 else basis.local_values(d2)
    loc = np.einsum("eq,eqa,eqb->eab", integrand_weights, B1, B2)
    idx = basis.local_index()
    rows = np.broadcast_to(idx[:, :, None], loc.shape)
    cols = np.broadcast_to(idx[:, None, :], loc.shape)
    n = basis.n_raw
    return sp.coo_matrix((loc.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()


def assemble_1d(basis: BSplineBasis, kind: str = "overlap", weight: Callable | None = None,
                f: Callable | None = None) -> sp.csr_matrix:
    """Galerkin matrix on ``basis``.

    ``kind`` is one of

    * ``"overlap"``: ``int w B_i B_j``
    * ``"second_derivative"``: ``-int w B_i' B_j'`` (integration-by-parts
      form of ``int B_i (w B_j')'``; negative semidefinite for ``w >= 0``)
    * ``"multiply"``: ``int w f B_i B_j``
    """
    x, wq = basis.quadrature()
    w = np.ones_like(x) if weight is None else np.broadcast_to(weight(x), x.shape)
    if kind == "multiply":
        if f is None:
            raise ValueError("multiply needs f")
        w = w * f(x)
    if not np.all(np.isfinite(w)):
        raise ValueError(f"non-finite integrand at a quadrature node in {kind!r} assembly")
    if kind in ("overlap", "multiply"):
        raw = _assemble_raw(basis, wq * w, 0, 0)
    elif kind == "second_derivative":
        raw = -_assemble_raw(basis, wq * w, 1, 1)
    else:
        raise ValueError(f"unknown operator kind {kind!r}")
    return basis.project(raw)


@dataclass(frozen=True, eq=False)
class GalerkinMatrices:
    """Overlap, kinetic and potential matrices of a symmetric pencil.

    ``kinetic`` holds the (positive semidefinite) kinetic-energy matrix, so
    the Hamiltonian is ``kinetic + potential``.
    """

    overlap: sp.csr_matrix
    kinetic: sp.csr_matrix
    potential: sp.csr_matrix
    lower_bound: float | None = None

    @property
    def dimension(self) -> int:
        return self.overlap.shape[0]

    @property
    def hamiltonian(self) -> sp.csr_matrix:
        return (self.kinetic + self.potential).tocsr()

    def shifted(self, c: float) -> "GalerkinMatrices":
        lb = None if self.lower_bound is None else self.lower_bound + c
        return GalerkinMatrices(self.overlap, self.kinetic, (self.potential + c * self.overlap).tocsr(), lb)


@dataclass(frozen=True)
class Eigenpairs:
    values: np.ndarray
    vectors: np.ndarray


def assemble_tensor_potential(basis_theta: BSplineBasis, basis_phi: BSplineBasis, V: Callable,
                              theta_weight: Callable = np.sin, chunk: int = 16) -> sp.csr_matrix:
    """Matrix of ``int dphi dtheta w(theta) V(theta, phi) u_n' v_m' u_n v_m``.

    Index ordering is ``n * size_theta + m`` (phi outer, theta inner).
    ``V(theta, phi)`` must broadcast; it receives ``theta`` with shape
    ``(1, 1, Et, Q)`` and ``phi`` with shape ``(Ep, Q, 1, 1)``.
    """
    xt, wt = basis_theta.quadrature()
    xp, wp = basis_phi.quadrature()
    Bt = basis_theta.local_values()
    Bp = basis_phi.local_values()
    nt = basis_theta.n_raw
    ko, ke = basis_phi.order, basis_theta.order
    tw = (wt * theta_weight(xt))[None, None]
    blocks = []
    Et = basis_theta.n_intervals
    a = np.arange(ko)[:, None, None, None]
    b = np.arange(ke)[None, :, None, None]
    c = np.arange(ko)[None, None, :, None]
    d = np.arange(ke)[None, None, None, :]
    for start in range(0, basis_phi.n_intervals, chunk):
        stop = min(start + chunk, basis_phi.n_intervals)
        vals = V(xt[None, None], xp[start:stop, :, None, None])
        vals = np.broadcast_to(vals, (stop - start, xp.shape[1], Et, xt.shape[1]))
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite potential at a quadrature node")
        W = vals * wp[start:stop, :, None, None] * tw
        bp = Bp[start:stop]
        T1 = np.einsum("Epa,Epc,Epeq->Eeqac", bp, bp, W, optimize=True)
        loc = np.einsum("Eeqac,eqb,eqd->Eeabcd", T1, Bt, Bt, optimize=True)
        E = np.arange(start, stop)[:, None, None, None, None, None]
        e = np.arange(Et)[None, :, None, None, None, None]
        rows = ((E + a[None, None]) * nt + (e + b[None, None]))
        cols = ((E + c[None, None]) * nt + (e + d[None, None]))
        rows = np.broadcast_to(rows, loc.shape).ravel()
        cols = np.broadcast_to(cols, loc.shape).ravel()
        n = basis_phi.n_raw * nt
        blocks.append(sp.coo_matrix((loc.ravel(), (rows, cols)), shape=(n, n)).tocsr())
    raw = blocks[0]
    for blk in blocks[1:]:
        raw = raw + blk
    T = sp.kron(basis_phi.transform, basis_theta.transform, format="csr")
    return (T.T @ raw @ T).tocsr()


@dataclass(frozen=True, eq=False)
class AngularOperators:
    """R-independent pieces of the hyperangular problem.

    With ``form="standard"`` the phi-kinetic block carries the two-sphere
    metric ``1/sin(theta)``; ``form="literal"`` uses ``sin(theta)`` instead.
    """

    basis_theta: BSplineBasis
    basis_phi: BSplineBasis
    form: str = "standard"

    def __post_init__(self):
        if self.form not in ("standard", "literal"):
            raise ValueError(f"unknown operator form {self.form!r}")
        bt, bp = self.basis_theta, self.basis_phi
        s_theta = assemble_1d(bt, "overlap", np.sin)
        k_theta = -assemble_1d(bt, "second_derivative", np.sin)
        phi_weight = (lambda t: 1.0 / np.sin(t)) if self.form == "standard" else np.sin
        w_theta = assemble_1d(bt, "overlap", phi_weight)
        s_phi = assemble_1d(bp, "overlap")
        k_phi = -assemble_1d(bp, "second_derivative")
        object.__setattr__(self, "overlap", sp.kron(s_phi, s_theta, format="csr"))
        object.__setattr__(self, "angular", (sp.kron(s_phi, k_theta) + sp.kron(k_phi, w_theta)).tocsr())

    @property
    def dimension(self) -> int:
        return self.basis_theta.size * self.basis_phi.size


def assemble_hyperangular(basis_theta: BSplineBasis, basis_phi: BSplineBasis, R: float,
                          potential: Callable | None, mu: float, form: str = "standard",
                          operators: AngularOperators | None = None) -> GalerkinMatrices:
    """Hyperangular pencil at hyperradius ``R``.

    ``potential(theta, phi)`` evaluates ``V(R, theta, phi)`` (broadcasting).
    ``None`` means ``V = 0``.
    """
    ops = operators or AngularOperators(basis_theta, basis_phi, form)
    kinetic = (ops.angular / (2.0 * mu * R * R)).tocsr()
    if potential is None:
        pot = sp.csr_matrix(ops.overlap.shape)
        lb = 0.0
    else:
        pot = assemble_tensor_potential(basis_theta, basis_phi, potential)
        xt, _ = basis_theta.quadrature()
        xp, _ = basis_phi.quadrature()
        lb = float(np.min(potential(xt.ravel()[None, :], xp.ravel()[:, None])))
    return GalerkinMatrices(ops.overlap, kinetic, pot, lb)


# -- eigensolvers ---------------------------------------------------------------


def _factor(A: sp.spmatrix):
    """Symmetric-mode sparse LU with diagonal pivots (``P A P^T = L U``)."""
    return splu(sp.csc_matrix(A), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                options={"SymmetricMode": True})


def sturm_count(m: GalerkinMatrices, sigma: float, _lu=None) -> int:
    """Number of eigenvalues of the pencil strictly below ``sigma``.

    Uses Sylvester's law of inertia on ``H - sigma S``: with symmetric
    diagonal pivoting the signs of ``diag(U)`` are the inertia.
    """
    lu = _lu if _lu is not None else _factor(m.hamiltonian - sigma * m.overlap)
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise RuntimeError("LU pivoting broke symmetry; inertia unavailable")
    d = lu.U.diagonal()
    if np.any(d == 0):
        raise ZeroDivisionError("shift coincides with an eigenvalue")
    return int(np.count_nonzero(d < 0))


def solve_dense(m: GalerkinMatrices, cutoff: float | None = None, count: int | None = None) -> Eigenpairs:
    H = m.hamiltonian.toarray()
    S = m.overlap.toarray()
    if count is not None:
        w, v = scipy.linalg.eigh(H, S, subset_by_index=[0, min(count, len(H)) - 1])
    elif cutoff is not None:
        w, v = scipy.linalg.eigh(H, S)
        keep = w < cutoff
        w, v = w[keep], v[:, keep]
    else:
        w, v = scipy.linalg.eigh(H, S)
    return Eigenpairs(w, v)


def _lower_bound(m: GalerkinMatrices) -> float:
    if m.lower_bound is not None:
        lb = m.lower_bound - 1.0 - 1e-6 * abs(m.lower_bound)
        if sturm_count(m, lb) == 0:
            return lb
    H = m.hamiltonian
    guess = float(np.min(H.diagonal() / m.overlap.diagonal()))
    step = max(1.0, abs(guess))
    lb = guess - step
    while sturm_count(m, lb) > 0:
        step *= 2
        lb = guess - step
    return lb


def _solve_slice(m: GalerkinMatrices, lo: float, hi: float, n_expected: int, tol: float) -> Eigenpairs:
    sigma = 0.5 * (lo + hi)
    H = m.hamiltonian
    S = m.overlap
    lu = _factor(H - sigma * S)
    op = LinearOperator(H.shape, matvec=lu.solve, dtype=float)
    dim = H.shape[0]
    v0 = np.random.default_rng(0).standard_normal(dim)  # fixed start vector: reproducible bits
    extra = 0
    for attempt in range(4):
        k = min(n_expected + extra, dim - 1)
        ncv = min(dim, max(2 * k + 1, k + 32))
        try:
            w, v = eigsh(H, k=k, M=S, sigma=sigma, which="LM", OPinv=op, ncv=ncv, tol=tol, v0=v0)
        except ArpackNoConvergence as exc:
            if attempt == 3:
                raise ConvergenceError("shift-invert Lanczos failed", len(exc.eigenvalues)) from exc
            extra += 8
            continue
        keep = (w >= lo) & (w < hi)
        if keep.sum() == n_expected:
            w, v = w[keep], v[:, keep]
            # Rayleigh-Ritz on the slice: restores S-orthonormality inside clusters
            hs = v.T @ (H @ v)
            ss = v.T @ (S @ v)
            w2, c = scipy.linalg.eigh(0.5 * (hs + hs.T), 0.5 * (ss + ss.T))
            return Eigenpairs(w2, v @ c)
        extra += max(8, n_expected // 4)
    raise ConvergenceError(f"slice [{lo}, {hi}) expected {n_expected} eigenvalues", int(keep.sum()))


def solve_lowest(m: GalerkinMatrices, cutoff: float | None = None, count: int | None = None, *,
                 dense: bool | None = None, max_slice: int = 80, tol: float = 0.0) -> Eigenpairs:
    """Every eigenvalue below ``cutoff`` (or the lowest ``count``), ascending.

    Eigenvectors are overlap-orthonormal. Problems with dimension up to
    ``DENSE_LIMIT`` go to LAPACK unless ``dense=False``. Larger ones are
    sliced by inertia counts and each slice is solved by shift-invert
    Lanczos, so completeness is checked rather than assumed.
    """
    if (cutoff is None) == (count is None):
        raise ValueError("give exactly one of cutoff or count")
    if dense is None:
        dense = m.dimension <= DENSE_LIMIT
    if dense:
        return solve_dense(m, cutoff, count)

    lo = _lower_bound(m)
    if count is not None:
        hi = lo + 1.0
        while sturm_count(m, hi) < count:
            hi = lo + 2 * (hi - lo)
        # shrink so that roughly `count` values are below hi
        a, b = lo, hi
        for _ in range(60):
            mid = 0.5 * (a + b)
            c = sturm_count(m, mid)
            if c >= count:
                b = mid
                if c == count:
                    break
            else:
                a = mid
        hi = b
    else:
        hi = float(cutoff)
    slices = _make_slices(m, lo, hi, max_slice)
    values, vectors = [], []
    for a, b, n in slices:
        if n == 0:
            continue
        res = _solve_slice(m, a, b, n, tol)
        values.append(res.values)
        vectors.append(res.vectors)
    if not values:
        return Eigenpairs(np.empty(0), np.empty((m.dimension, 0)))
    w = np.concatenate(values)
    v = np.hstack(vectors)
    order = np.argsort(w, kind="stable")
    w, v = w[order], v[:, order]
    if count is not None:
        w, v = w[:count], v[:, :count]
    return Eigenpairs(w, v)


def _make_slices(m, lo, hi, max_slice):
    counts = {lo: sturm_count(m, lo), hi: sturm_count(m, hi)}
    stack = [(lo, hi)]
    out = []
    while stack:
        a, b = stack.pop()
        n = counts[b] - counts[a]
        if n <= max_slice or (b - a) < 1e-9 * max(1.0, abs(b)):
            out.append((a, b, n))
            continue
        mid = 0.5 * (a + b)
        counts[mid] = sturm_count(m, mid)
        stack.append((mid, b))
        stack.append((a, mid))
    out.sort()
    return out
