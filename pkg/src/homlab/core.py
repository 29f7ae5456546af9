"""Domain types shared across the package: grids, states, density matrices.

The transverse coordinate is discretised into ``n`` orthonormal spatial
modes, so every probability below is a finite sum and normalisation is
exact rather than quadrature-approximate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class HomlabError(Exception):
    """Base class for package errors."""


class ValidationError(HomlabError, ValueError):
    """Raised when an input violates a documented precondition."""


class InconsistentTableError(HomlabError):
    """Raised when an outcome table cannot have come from the declared setup."""


class ReconstructionError(HomlabError):
    """Raised when an inversion has no consistent solution."""


HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
EIGEN_TOL = 1e-10


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid:
    n: int
    x_min: float
    x_max: float

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValidationError(f"grid needs n >= 2 modes, got {self.n}")
        if not (np.isfinite(self.x_min) and np.isfinite(self.x_max)):
            raise ValidationError("grid bounds must be finite")
        if not self.x_max > self.x_min:
            raise ValidationError(
                f"degenerate interval: x_max={self.x_max} <= x_min={self.x_min}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "x_min", float(self.x_min))
        object.__setattr__(self, "x_max", float(self.x_max))

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n

    @property
    def points(self) -> np.ndarray:
        """Midpoint sample positions ``x_min + (i + 1/2) dx``."""
        return self.x_min + (np.arange(self.n) + 0.5) * self.dx

    def matches(self, other: "Grid", rtol: float = 1e-9) -> bool:
        if self.n != other.n:
            return False
        scale = max(abs(self.x_min), abs(self.x_max), self.dx)
        return (abs(self.x_min - other.x_min) <= rtol * scale
                and abs(self.x_max - other.x_max) <= rtol * scale)

    def to_dict(self) -> dict:
        return {"n": self.n, "x_min": self.x_min, "x_max": self.x_max}


def make_grid(n: int, x_min: float, x_max: float) -> Grid:
    return Grid(n, x_min, x_max)


class ParticleStatistics(enum.Enum):
    """Exchange statistics; ``sign`` is +1 for bosons and -1 for fermions."""

    BOSON = 1
    FERMION = -1

    @property
    def sign(self) -> int:
        return self.value

    @classmethod
    def parse(cls, value) -> "ParticleStatistics":
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValidationError(
                f"statistics must be 'boson' or 'fermion', got {value!r}") from None


BOSON = ParticleStatistics.BOSON
FERMION = ParticleStatistics.FERMION


_POLARIZATION_SYMBOLS = {
    "h": "h", "v": "v",
    "cw": "\u21bb", "ccw": "\u21ba",
    "d": "\u2197", "a": "\u2198",
}


@dataclass(frozen=True)
class ModeLabel:
    """Port index plus an optional polarisation tag (``h``, ``v``, ``cw``, ``ccw``, ``d``, ``a``)."""

    port: int
    polarization: Optional[str] = None

    def __post_init__(self):
        if self.port not in (1, 2):
            raise ValidationError(f"port must be 1 or 2, got {self.port}")
        if self.polarization is not None and self.polarization not in _POLARIZATION_SYMBOLS:
            raise ValidationError(f"unknown polarization {self.polarization!r}")

    def __str__(self) -> str:
        return f"{self.port}{self.polarization or ''}"

    @property
    def symbol(self) -> str:
        if self.polarization is None:
            return str(self.port)
        return f"{self.port}{_POLARIZATION_SYMBOLS[self.polarization]}"

    @classmethod
    def parse(cls, text: str) -> "ModeLabel":
        text = str(text).strip()
        if not text or text[0] not in "12":
            raise ValidationError(f"bad mode label {text!r}")
        pol = text[1:] or None
        if pol is not None and pol not in _POLARIZATION_SYMBOLS:
            reverse = {v: k for k, v in _POLARIZATION_SYMBOLS.items()}
            pol = reverse.get(pol, pol)
        return cls(int(text[0]), pol)


def _check_same_grid(a: Grid, b: Grid) -> None:
    if not a.matches(b):
        raise ValidationError(f"grid mismatch: {a} vs {b}")


@dataclass(frozen=True, eq=False)
class WaveFunction:
    grid: Grid
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.shape != (self.grid.n,):
            raise ValidationError(
                f"expected {self.grid.n} amplitudes, got shape {amps.shape}")
        if not np.all(np.isfinite(amps)):
            raise ValidationError("amplitudes must be finite")
        object.__setattr__(self, "amplitudes", _frozen(amps))

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def is_normalized(self, tol: float = 1e-9) -> bool:
        return abs(self.norm - 1.0) < tol

    def projector(self) -> "DensityMatrix":
        psi = self.amplitudes
        rho = np.outer(psi, psi.conj())
        return DensityMatrix(self.grid, rho, physical=not physicality_problems(rho))


def flat_reference(grid: Grid) -> WaveFunction:
    """Reference state with the constant real amplitude ``1/sqrt(n)``."""
    return WaveFunction(grid, np.full(grid.n, 1.0 / np.sqrt(grid.n)))


def flat_amplitude(grid: Grid) -> float:
    return 1.0 / np.sqrt(grid.n)


def normalize(psi: WaveFunction) -> WaveFunction:
    norm = np.linalg.norm(psi.amplitudes)
    if norm == 0.0:
        raise ValidationError("cannot normalise the zero vector")
    return WaveFunction(psi.grid, psi.amplitudes / norm)


def conjugate_state(psi: WaveFunction) -> WaveFunction:
    return WaveFunction(psi.grid, psi.amplitudes.conj())


def global_phase_distance(psi: WaveFunction, phi: WaveFunction) -> float:
    """Max-entry distance between two states after optimal global phase alignment."""
    a, b = psi.amplitudes, phi.amplitudes
    overlap = np.vdot(b, a)
    phase = overlap / abs(overlap) if abs(overlap) > 0 else 1.0
    return float(np.max(np.abs(a - phase * b)))


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Density matrix in the spatial-mode basis.

    ``physical=True`` asserts (and is checked) Hermiticity, unit trace and
    positivity. Raw estimates carry ``physical=False``.
    """

    grid: Grid
    entries: np.ndarray
    physical: bool = True
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        rho = np.asarray(self.entries, dtype=complex)
        n = self.grid.n
        if rho.shape != (n, n):
            raise ValidationError(f"expected {n}x{n} matrix, got {rho.shape}")
        if not np.all(np.isfinite(rho)):
            raise ValidationError("density matrix entries must be finite")
        object.__setattr__(self, "entries", _frozen(rho))
        if self.physical:
            problems = physicality_problems(rho)
            if problems:
                raise ValidationError("non-physical density matrix: " + "; ".join(problems))

    @property
    def n(self) -> int:
        return self.grid.n

    def purity(self) -> float:
        return float(np.real(np.trace(self.entries @ self.entries)))


def physicality_problems(rho: np.ndarray) -> list[str]:
    problems = []
    herm = float(np.max(np.abs(rho - rho.conj().T)))
    if herm > HERMITIAN_TOL:
        problems.append(f"hermiticity defect {herm:.3g}")
    tr = np.trace(rho)
    if abs(tr - 1.0) > TRACE_TOL:
        problems.append(f"trace {tr.real:.15g}{tr.imag:+.3g}j")
    lam = np.linalg.eigvalsh((rho + rho.conj().T) / 2)
    if lam[0] < -EIGEN_TOL:
        problems.append(f"min eigenvalue {lam[0]:.3g}")
    return problems


def density_diagnostics(rho: np.ndarray) -> dict:
    rho = np.asarray(rho, dtype=complex)
    herm = (rho + rho.conj().T) / 2
    return {
        "hermiticity_defect": float(np.max(np.abs(rho - rho.conj().T)) / 2),
        "min_eigenvalue": float(np.linalg.eigvalsh(herm)[0]),
        "trace": float(np.real(np.trace(rho))),
    }


def maximally_mixed(grid: Grid) -> DensityMatrix:
    return DensityMatrix(grid, np.eye(grid.n) / grid.n)


def _complex_gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def random_density(n: int, rank: int, seed: int,
                   grid: Optional[Grid] = None) -> DensityMatrix:
    """Seeded random density matrix ``G G^dag / tr`` with ``G`` an ``n x rank`` Gaussian."""
    if grid is None:
        grid = Grid(n, 0.0, float(n))
    elif grid.n != n:
        raise ValidationError(f"grid has {grid.n} modes, expected {n}")
    if int(rank) != rank or not 1 <= rank <= n:
        raise ValidationError(f"rank must lie in [1, {n}], got {rank}")
    rng = np.random.default_rng(seed)
    g = _complex_gaussian(rng, (n, int(rank)))
    rho = g @ g.conj().T
    rho = (rho + rho.conj().T) / 2
    return DensityMatrix(grid, rho / np.trace(rho).real)


def random_state(grid: Grid, seed: int) -> WaveFunction:
    rng = np.random.default_rng(seed)
    return normalize(WaveFunction(grid, _complex_gaussian(rng, grid.n)))


def gaussian_state(grid: Grid, center: float, width: float) -> WaveFunction:
    if not width > 0:
        raise ValidationError(f"gaussian width must be positive, got {width}")
    x = grid.points
    return normalize(WaveFunction(grid, np.exp(-((x - center) ** 2) / (4 * width ** 2))))


def ramp_state(grid: Grid, k: float) -> WaveFunction:
    """Flat-modulus state with linear phase ``exp(i k x)``."""
    return normalize(WaveFunction(grid, np.exp(1j * k * grid.points)))


# --- JSON state files -------------------------------------------------------

def state_to_json(psi: WaveFunction) -> dict:
    return {**psi.grid.to_dict(),
            "re": psi.amplitudes.real.tolist(),
            "im": psi.amplitudes.imag.tolist()}


def state_from_json(data: dict) -> WaveFunction:
    grid = _grid_from_json(data)
    amps = _complex_from_json(data, grid.n)
    return WaveFunction(grid, amps)


def density_to_json(rho: DensityMatrix) -> dict:
    return {**rho.grid.to_dict(),
            "re": rho.entries.real.ravel().tolist(),
            "im": rho.entries.imag.ravel().tolist(),
            "physical": bool(rho.physical)}


def density_from_json(data: dict) -> DensityMatrix:
    grid = _grid_from_json(data)
    entries = _complex_from_json(data, grid.n * grid.n).reshape(grid.n, grid.n)
    return DensityMatrix(grid, entries, physical=bool(data.get("physical", True)))


def _grid_from_json(data: dict) -> Grid:
    try:
        return Grid(data["n"], data["x_min"], data["x_max"])
    except KeyError as exc:
        raise ValidationError(f"state file is missing key {exc.args[0]!r}") from None


def _complex_from_json(data: dict, size: int) -> np.ndarray:
    try:
        re = np.asarray(data["re"], dtype=float)
        im = np.asarray(data.get("im", np.zeros(size)), dtype=float)
    except KeyError as exc:
        raise ValidationError(f"state file is missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError):
        raise ValidationError("'re'/'im' must be numeric arrays") from None
    if re.shape != (size,) or im.shape != (size,):
        raise ValidationError(f"expected {size} values in 're' and 'im'")
    return re + 1j * im
