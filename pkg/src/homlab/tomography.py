"""Inversion of outcome tables into state estimates.

All routines assume a flat reference of real amplitude ``c`` and work on the
undivided joint density stored in :class:`OutcomeTable`, so i == j cells
need no special casing.

Sign conventions (validated against the forward simulator):

* balanced splitter, ``cos(phi_i - phi_j) = s * (P[a,1] - P[a,2]) * (-1)**(a-1) / (c^2 |psi_i| |psi_j|)``
  for either port ``a``;
* general 2-mode ``U``, ``i != j``::

      P[a,i,b,j] = c^2 (|U[b,1]U[a,2]|^2 rho_jj + |U[b,2]U[a,1]|^2 rho_ii)
                   + 2 s c^2 Re(K[a,b] rho_ji)

* polarisation network, fixed first detector ``mu``: the four second
  detectors carry ``16 K = +1, -1, +i, -i``, i.e. ``+Re, -Re, +Im, -Im`` of
  ``rho_ij``.  The fermion sign multiplies the recovered element.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    DensityMatrix,
    Grid,
    InconsistentTableError,
    ParticleStatistics,
    ReconstructionError,
    ValidationError,
    WaveFunction,
    conjugate_state,
    density_diagnostics,
    physicality_problems,
)
from .interferometer import POLARIZED_REFERENCE, POLARIZED_UNKNOWN, OutcomeTable
from .optics import (
    POLARIZATION_OUTPUTS,
    TransferMatrix,
    exchange_kernel,
    polarization_network,
)

AMPLITUDE_MASK_RATIO = 1e-8
RADICAND_TOL = 1e-12
COS_TOL = 1e-8
CONSISTENCY_TOL = 1e-6
RANK_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class AmplitudeProfile:
    grid: Grid
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class CosPhaseMatrix:
    grid: Grid
    values: np.ndarray
    mask: np.ndarray

    @property
    def masked_fraction(self) -> float:
        return float(np.mean(self.mask))


@dataclass(frozen=True, eq=False)
class PureCandidates:
    first: WaveFunction
    second: WaveFunction
    anchor: int
    self_conjugate: bool
    undetermined: tuple = ()
    residual: float = 0.0

    def __iter__(self):
        return iter((self.first, self.second))


@dataclass(frozen=True, eq=False)
class RhoEstimate:
    """Raw linear-inversion estimate; absent components are ``None``."""

    grid: Grid
    re: Optional[np.ndarray]
    im: Optional[np.ndarray]
    physical: bool = False
    diagnostics: dict = field(default_factory=dict)
    missing: tuple = ()

    @property
    def complete(self) -> bool:
        return self.re is not None and self.im is not None

    def assemble(self, project: bool = False, method: str = "simplex") -> DensityMatrix:
        if not self.complete:
            raise ReconstructionError(f"estimate lacks components: {', '.join(self.missing)}")
        return assemble_density(self.re, self.im, self.grid, project=project, method=method)


def _require(t: OutcomeTable, m: int) -> None:
    if t.m != m:
        raise ValidationError(f"expected a {m}-output-mode table, got {t.m}")


def _check_present(t: OutcomeTable, pairs: Sequence[tuple[int, int]]) -> None:
    absent = []
    for a, b in pairs:
        block = t.density[a, :, b, :]
        if np.isnan(block).any():
            idx = np.argwhere(np.isnan(block))[:3]
            absent += [f"(({t.labels[a]},{i}),({t.labels[b]},{j}))" for i, j in idx]
    if absent:
        raise ValidationError("table is missing outcome rows, e.g. " + ", ".join(absent))


# --- pure states ------------------------------------------------------------

def reconstruct_amplitude(t: OutcomeTable, c: float, alpha: int = 1) -> AmplitudeProfile:
    """``|psi(x_i)| = sqrt(P[alpha,1](i,i) + P[alpha,2](i,i)) / c`` for a balanced-splitter table."""
    _require(t, 2)
    a = alpha - 1
    _check_present(t, [(a, 0), (a, 1)])
    radicand = np.diag(t.joint(a, 0)) + np.diag(t.joint(a, 1))
    if np.min(radicand) < -RADICAND_TOL:
        raise InconsistentTableError(f"negative radicand {np.min(radicand):.3g}")
    return AmplitudeProfile(t.grid, np.sqrt(np.clip(radicand, 0, None)) / abs(c))


def _interference_term(t: OutcomeTable, alpha: int) -> np.ndarray:
    """``s * sum_b (-1)**(alpha-b) P[alpha,b]`` = ``c^2 Re(psi_i conj(psi_j))`` for the balanced splitter."""
    a = alpha - 1
    _check_present(t, [(a, 0), (a, 1)])
    same, other = t.joint(a, a), t.joint(a, 1 - a)
    return t.statistics.sign * (same - other)


def reconstruct_cos_phase(t: OutcomeTable, amp: AmplitudeProfile, c: float,
                          statistics: Optional[ParticleStatistics] = None,
                          alpha: int = 1, tol: float = COS_TOL) -> CosPhaseMatrix:
    _require(t, 2)
    if statistics is not None and statistics is not t.statistics:
        raise ValidationError("statistics argument disagrees with the table")
    r = amp.values
    eps = AMPLITUDE_MASK_RATIO * float(np.max(r))
    low = r < eps
    mask = low[:, None] | low[None, :]
    denom = c ** 2 * np.outer(r, r)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(mask, np.nan, _interference_term(t, alpha) / denom)
    worst = np.nanmax(np.abs(cos)) if not mask.all() else 0.0
    if worst > 1 + tol:
        raise InconsistentTableError(f"|cos| = {worst:.12g} exceeds 1")
    cos = np.clip(cos, -1.0, 1.0)
    cos = (cos + cos.T) / 2
    return CosPhaseMatrix(t.grid, cos, mask)


def _sign_objective(phi: np.ndarray, k: int, fixed: np.ndarray, cos: np.ndarray,
                    w: np.ndarray) -> float:
    diff = np.cos(phi[k] - phi[fixed]) - cos[k, fixed]
    return float(np.sum(w[fixed] * diff ** 2))


def pure_candidates(amp: AmplitudeProfile, cosm: CosPhaseMatrix,
                    tol: float = CONSISTENCY_TOL) -> PureCandidates:
    """Two conjugate phase profiles consistent with the amplitude and cosine data.

    The phase is anchored to zero at the largest unmasked amplitude. Each
    other point gets ``+-arccos`` of its cosine against the anchor; the sign is
    chosen greedily (largest amplitude first) to best match the cosines
    against points already placed, then refined by single flips.
    """
    r = amp.values
    n = r.size
    valid = ~np.diag(cosm.mask)
    if not valid.any():
        raise ReconstructionError("every amplitude is below the masking threshold")
    order = [k for k in np.argsort(-r, kind="stable") if valid[k]]
    anchor = order[0]
    cos = np.nan_to_num(cosm.values, nan=0.0)
    theta = np.arccos(np.clip(cos[:, anchor], -1, 1))
    phi = np.zeros(n)
    phi[valid] = theta[valid]
    w = r ** 2
    degenerate = np.abs(np.sin(theta)) < 1e-7
    # near cos = +-1 arccos only amplifies rounding; those phases are 0 or pi
    phi[valid & degenerate] = np.where(theta[valid & degenerate] < np.pi / 2, 0.0, np.pi)

    fixed = [anchor]
    pivot = None
    undetermined = []
    for k in order[1:]:
        if degenerate[k]:
            fixed.append(k)
            continue
        if pivot is None:
            pivot = k  # conjugation freedom: the first non-degenerate phase is taken positive
            fixed.append(k)
            continue
        f = np.array(fixed)
        phi[k] = theta[k]
        plus = _sign_objective(phi, k, f, cos, w)
        phi[k] = -theta[k]
        minus = _sign_objective(phi, k, f, cos, w)
        if abs(plus - minus) <= 1e-14 * max(1.0, plus + minus):
            undetermined.append(int(k))
        phi[k] = theta[k] if plus <= minus else -theta[k]
        fixed.append(k)

    idx = np.array(order)

    def total(ph):
        d = np.cos(ph[idx][:, None] - ph[idx][None, :]) - cos[np.ix_(idx, idx)]
        return float(np.sum(np.outer(w[idx], w[idx]) * d ** 2))

    best = total(phi)
    for _ in range(3):
        improved = False
        for k in order[1:]:
            if degenerate[k] or k == pivot:
                continue
            phi[k] = -phi[k]
            trial = total(phi)
            if trial < best - 1e-15:
                best, improved = trial, True
            else:
                phi[k] = -phi[k]
        if not improved:
            break

    resid_mat = np.cos(phi[idx][:, None] - phi[idx][None, :]) - cos[np.ix_(idx, idx)]
    residual = float(np.max(np.abs(resid_mat))) if idx.size else 0.0
    if residual > tol:
        raise ReconstructionError(
            f"cosine matrix is inconsistent with any phase profile (residual {residual:.3g})")

    values = np.where(valid, r * np.exp(1j * phi), 0.0)
    norm = np.linalg.norm(values)
    psi = WaveFunction(amp.grid, values / norm if norm > 0 else values)
    return PureCandidates(psi, conjugate_state(psi), int(anchor), pivot is None,
                          tuple(undetermined), residual)


def reconstruct_pure(t: OutcomeTable, c: float, alpha: int = 1) -> PureCandidates:
    amp = reconstruct_amplitude(t, c, alpha)
    return pure_candidates(amp, reconstruct_cos_phase(t, amp, c, alpha=alpha))


# --- mixed states: generic 2-mode inversion ---------------------------------

def _pair_weights(u: np.ndarray, unknown: int, reference: int):
    cu, cr = u[:, unknown], u[:, reference]
    w_j = np.abs(cu[None, :] * cr[:, None]) ** 2   # multiplies rho_jj: |U[b,u] U[a,r]|^2
    w_i = np.abs(cr[None, :] * cu[:, None]) ** 2   # multiplies rho_ii: |U[b,r] U[a,u]|^2
    return w_j, w_i


def _exposure(rows: np.ndarray, tol: float) -> tuple[bool, bool, np.ndarray]:
    """Which of (Re, Im) the design matrix determines, plus its pseudo-inverse."""
    sv = np.linalg.svd(rows, compute_uv=False)
    scale = max(float(np.max(np.abs(rows))), 1e-300)
    rank = int(np.sum(sv > tol * scale)) if sv.size else 0
    re_col, im_col = np.abs(rows[:, 0]).max(), np.abs(rows[:, 1]).max()
    if rank == 2:
        return True, True, np.linalg.pinv(rows)
    if rank == 1 and im_col <= tol * scale:
        return True, False, np.linalg.pinv(rows[:, :1])
    if rank == 1 and re_col <= tol * scale:
        return False, True, np.linalg.pinv(rows[:, 1:])
    return False, False, np.zeros((0, rows.shape[0]))


def reconstruct_rho_general(t: OutcomeTable, u: TransferMatrix, c: float,
                            statistics: Optional[ParticleStatistics] = None,
                            tol: float = RANK_TOL) -> RhoEstimate:
    """Linear inversion through the exchange products of an arbitrary 2-mode setup.

    Diagonal elements come from the ``i == j`` cells; for ``i != j`` the four
    port pairs give a small least-squares system for ``Re rho_ji`` and
    ``Im rho_ji`` whose solvable components depend on the products ``K``.
    """
    _require(t, 2)
    if u.m != 2:
        raise ValidationError("reconstruct_rho_general needs a 2-mode transfer matrix")
    if statistics is not None and statistics is not t.statistics:
        raise ValidationError("statistics argument disagrees with the table")
    pairs = [(0, 0), (0, 1), (1, 0), (1, 1)]
    _check_present(t, pairs)
    s = t.statistics.sign
    U = u.entries
    K = exchange_kernel(U)
    w_j, w_i = _pair_weights(U, 0, 1)
    c2 = c ** 2
    n = t.n

    # P[a,i,b,i] = c^2 (w_j + w_i + 2 s Re K) rho_ii
    g = np.array([c2 * (w_j[a, b] + w_i[a, b] + 2 * s * K[a, b].real) for a, b in pairs])
    if np.max(np.abs(g)) < tol:
        raise ReconstructionError("setup gives no access to the diagonal of rho")
    diag_data = np.array([np.diag(t.joint(a, b)) for a, b in pairs])  # (4, n)
    rho_diag = g @ diag_data / (g @ g)

    # unknowns (Re rho_ji, Im rho_ji):  2 s c^2 (Re K * R - Im K * I)
    rows = np.array([[2 * s * c2 * K[a, b].real, -2 * s * c2 * K[a, b].imag] for a, b in pairs])
    has_re, has_im, pinv = _exposure(rows, tol)

    data = np.stack([t.joint(a, b) for a, b in pairs])  # (4, n, n) indexed [pair, i, j]
    known = np.stack([c2 * (w_j[a, b] * rho_diag[None, :] + w_i[a, b] * rho_diag[:, None])
                      for a, b in pairs])
    rhs = (data - known).reshape(4, -1)
    sol = pinv @ rhs

    re = im = None
    k = 0
    # solution is rho_ji at position [i, j]; transpose to rho_ij layout
    if has_re:
        re = sol[k].reshape(n, n).T.copy()
        np.fill_diagonal(re, rho_diag)
        k += 1
    if has_im:
        im = sol[k].reshape(n, n).T.copy()
        np.fill_diagonal(im, 0.0)
    missing = tuple(name for name, ok in (("re", has_re), ("im", has_im)) if not ok)
    return _estimate(t.grid, re, im, missing, extra={"diagonal": rho_diag.tolist()})


def _estimate(grid: Grid, re, im, missing, extra: Optional[dict] = None) -> RhoEstimate:
    diag = {}
    if re is not None:
        diag["re_asymmetry"] = float(np.max(np.abs(re - re.T)) / 2)
    if im is not None:
        diag["im_symmetry"] = float(np.max(np.abs(im + im.T)) / 2)
    if re is not None and im is not None:
        diag.update(density_diagnostics(re + 1j * im))
    if extra:
        diag.update(extra)
    return RhoEstimate(grid, re, im, False, diag, tuple(missing))


# --- mixed states: polarisation network -------------------------------------

def polarized_roles(first: int) -> dict:
    """Map ``+Re, -Re, +Im, -Im`` to the second-detector mode for a first detector mode."""
    u = polarization_network().entries
    K = exchange_kernel(u, POLARIZED_UNKNOWN, POLARIZED_REFERENCE)
    roles = {}
    for nu in range(4):
        k = 16 * K[first, nu]
        for name, target in (("+re", 1), ("-re", -1), ("+im", 1j), ("-im", -1j)):
            if abs(k - target) < 1e-9:
                roles[name] = nu
    if len(roles) != 4:
        raise AssertionError("polarisation network lost its exchange-product structure")
    return roles


def reconstruct_rho_polarized(t: OutcomeTable, c: float, variant: str = "four_detector",
                              first: Sequence = ("1h",)) -> RhoEstimate:
    """Density matrix from the polarisation-network table.

    With ``P+re``, ``P-re``, ``P+im``, ``P-im`` the densities sharing first
    detector ``first`` (``1h`` gives ``1h1h, 1h2h, 1h2v, 1h1v``)::

        four_detector:  (c^2/4) s rho_ij = P+re - P-re - i P-im + i P+im
        three_detector: (c^2/4) s rho_ij = (1-i) P+re - (1+i) P-re + 2i P+im

    Several first detectors (or ``"all"``) are averaged.
    """
    _require(t, 4)
    if variant not in ("four_detector", "three_detector"):
        raise ValidationError(f"unknown variant {variant!r}")
    if first == "all":
        first = POLARIZATION_OUTPUTS
    estimates = []
    for mu_label in first:
        mu = t.mode_index(mu_label)
        roles = polarized_roles(mu)
        need = ["+re", "-re", "+im"] + (["-im"] if variant == "four_detector" else [])
        _check_present(t, [(mu, roles[r]) for r in need])
        P = {r: t.joint(mu, roles[r]) for r in need}
        if variant == "four_detector":
            comb = P["+re"] - P["-re"] - 1j * P["-im"] + 1j * P["+im"]
        else:
            comb = (1 - 1j) * P["+re"] - (1 + 1j) * P["-re"] + 2j * P["+im"]
        estimates.append(t.statistics.sign * 4 / c ** 2 * comb)
    rho = np.mean(estimates, axis=0)
    return _estimate(t.grid, rho.real.copy(), rho.imag.copy(), ())


def combine_estimates(real_part: RhoEstimate, imag_part: RhoEstimate) -> RhoEstimate:
    """Take ``re`` from one estimate and ``im`` from another (two-setup route)."""
    if real_part.re is None:
        raise ReconstructionError("first estimate carries no real part")
    if imag_part.im is None:
        raise ReconstructionError("second estimate carries no imaginary part")
    if not real_part.grid.matches(imag_part.grid):
        raise ValidationError("estimates live on different grids")
    return _estimate(real_part.grid, real_part.re, imag_part.im, ())


# --- post-processing --------------------------------------------------------

def project_simplex(values: np.ndarray) -> np.ndarray:
    """Euclidean projection of a real vector onto ``{x >= 0, sum(x) = 1}``."""
    v = np.sort(values)[::-1]
    cumulative = np.cumsum(v) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(v - cumulative / k > 0)[0][-1]
    shift = cumulative[rho] / (rho + 1)
    return np.clip(values - shift, 0.0, None)


def assemble_density(re: np.ndarray, im: np.ndarray, grid: Grid, project: bool = False,
                     method: str = "simplex") -> DensityMatrix:
    """Hermitian matrix ``sym(re) + i antisym(im)``, optionally projected onto states.

    ``method="simplex"`` is the Frobenius-nearest trace-one PSD matrix, so it
    never moves the estimate away from any valid state. ``method="clip"``
    zeroes negative eigenvalues and rescales the trace.
    """
    re = np.asarray(re, dtype=float)
    im = np.asarray(im, dtype=float)
    if re.shape != (grid.n, grid.n) or im.shape != re.shape:
        raise ValidationError("re/im shapes do not match the grid")
    if method not in ("simplex", "clip"):
        raise ValidationError(f"unknown projection method {method!r}")
    defect = max(float(np.max(np.abs(re - re.T))), float(np.max(np.abs(im + im.T)))) / 2
    rho = (re + re.T) / 2 + 1j * (im - im.T) / 2
    raw_diag = density_diagnostics(rho)
    diagnostics = {"hermiticity_defect": defect,
                   "raw_min_eigenvalue": raw_diag["min_eigenvalue"],
                   "raw_trace": raw_diag["trace"]}
    if project:
        lam, vec = np.linalg.eigh(rho)
        if method == "simplex":
            lam = project_simplex(lam)
        else:
            lam = np.clip(lam, 0.0, None)
            tr = lam.sum()
            if tr <= 0:
                raise ReconstructionError("trace vanishes after eigenvalue clipping")
            lam = lam / tr
        rho = (vec * lam) @ vec.conj().T
        rho = (rho + rho.conj().T) / 2
    final = density_diagnostics(rho)
    diagnostics.update(min_eigenvalue=final["min_eigenvalue"], trace=final["trace"])
    physical = not physicality_problems(rho)
    return DensityMatrix(grid, rho, physical=physical, diagnostics=diagnostics)


def parallelogram_check(rho: DensityMatrix, i: int, j: int) -> float:
    """Defect of ``4 rho_ij = q(+) - q(-) - i q(+i) + i q(-i)``.

    ``q(+-)`` are quadratic forms on ``|x_i> +- |x_j>`` and ``q(+-i)`` on
    ``|x_i> +- i|x_j>``, taken in the bra-ket order of the identity.
    """
    R = rho.entries
    n = rho.n
    ei, ej = np.eye(n)[i], np.eye(n)[j]

    def form(bra, ket):
        return np.conj(bra) @ R @ ket

    q_plus = form(ei + ej, ei + ej)
    q_minus = form(ei - ej, ei - ej)
    q_pi = form(ei + 1j * ej, ei + 1j * ej)
    q_mi = form(ei - 1j * ej, ei - 1j * ej)
    return float(abs(4 * R[i, j] - (q_plus - q_minus - 1j * q_pi + 1j * q_mi)))
