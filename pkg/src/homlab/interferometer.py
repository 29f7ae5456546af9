"""Forward simulation of two-particle interference.

The unknown particle enters input mode ``u`` and the reference enters
input mode ``r`` of a transfer matrix ``U``. For output slots
``(a, x_i)`` and ``(b, x_j)`` the joint amplitude is

    U[b,u] U[a,r] psi_r(i) psi_u(j)  +  s U[b,r] U[a,u] psi_r(j) psi_u(i)

with ``s = +1`` for bosons and ``-1`` for fermions.

Tables store the *undivided* joint density ``P[a, i, b, j]`` for every
ordered slot pair. Exclusive outcome probabilities are read off the upper
triangle of the slot matrix, with same-slot cells halved: in the discrete
basis that halving is what makes a lossless table sum to exactly one.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Optional, TextIO

import numpy as np

from .core import (
    DensityMatrix,
    Grid,
    InconsistentTableError,
    ModeLabel,
    ParticleStatistics,
    ValidationError,
    WaveFunction,
    _check_same_grid,
    _frozen,
    flat_reference,
)
from .optics import POLARIZATION_OUTPUTS, TransferMatrix, polarization_network

NEGATIVE_CLAMP = 1e-14

# input-mode columns of the 4-mode network carrying the unknown and reference
POLARIZED_UNKNOWN = 0
POLARIZED_REFERENCE = 2


@dataclass(frozen=True)
class DetectionCoefficients:
    """Detection state ``a |x_j> + b |x_i>`` probing the unknown particle."""

    a: complex
    b: complex


@dataclass(frozen=True, eq=False)
class OutcomeTable:
    grid: Grid
    statistics: ParticleStatistics
    labels: tuple
    density: np.ndarray
    setup_id: str = ""

    def __post_init__(self):
        d = np.asarray(self.density, dtype=float)
        m, n = len(self.labels), self.grid.n
        if d.shape != (m, n, m, n):
            raise ValidationError(f"density must have shape {(m, n, m, n)}, got {d.shape}")
        neg = np.nanmin(d) if np.any(np.isfinite(d)) else 0.0
        if neg < -NEGATIVE_CLAMP:
            raise InconsistentTableError(f"negative probability {neg:.3g} in outcome table")
        d = np.where(d < 0, 0.0, d)
        # P[a,i,b,j] and P[b,j,a,i] describe one outcome; keep the upper-triangle copy
        mat = np.array(d.reshape(m * n, m * n))
        s1, s2 = np.triu_indices(m * n, 1)
        mat[s2, s1] = mat[s1, s2]
        object.__setattr__(self, "density", _frozen(mat.reshape(m, n, m, n)))
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def m(self) -> int:
        return len(self.labels)

    @property
    def n(self) -> int:
        return self.grid.n

    def mode_index(self, label) -> int:
        if isinstance(label, int):
            return label
        lab = ModeLabel.parse(label) if isinstance(label, str) else label
        try:
            return self.labels.index(lab)
        except ValueError:
            raise ValidationError(f"table has no output mode {label!r}") from None

    def slot_matrix(self) -> np.ndarray:
        mn = self.m * self.n
        return self.density.reshape(mn, mn)

    def outcome_keys(self) -> np.ndarray:
        """Ordered exclusive outcomes as rows ``(a, i, b, j)`` with ``(a, i) <= (b, j)``."""
        s1, s2 = np.triu_indices(self.m * self.n)
        return np.stack([s1 // self.n, s1 % self.n, s2 // self.n, s2 % self.n], axis=1)

    def exclusive_probabilities(self) -> np.ndarray:
        s1, s2 = np.triu_indices(self.m * self.n)
        p = self.slot_matrix()[s1, s2]
        return np.where(s1 == s2, p / 2, p)

    def probability(self, a, i: int, b, j: int) -> float:
        """Exclusive probability of one outcome (either slot order)."""
        p = self.density[self.mode_index(a), i, self.mode_index(b), j]
        same = self.mode_index(a) == self.mode_index(b) and i == j
        return float(p / 2 if same else p)

    def joint(self, a, b) -> np.ndarray:
        """The ``n x n`` undivided density ``P[a, i, b, j]`` for a pair of output modes."""
        return self.density[self.mode_index(a), :, self.mode_index(b), :]

    @property
    def probabilities(self) -> dict:
        keys = self.outcome_keys()
        p = self.exclusive_probabilities()
        return {((self.labels[a], i), (self.labels[b], j)): float(v)
                for (a, i, b, j), v in zip(keys.tolist(), p)}

    def max_abs_difference(self, other: "OutcomeTable") -> float:
        return float(np.nanmax(np.abs(self.density - other.density)))


@dataclass(frozen=True, eq=False)
class CountTable:
    table: OutcomeTable
    shots: int
    counts: np.ndarray
    discarded: int

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.sum() + self.discarded != self.shots:
            raise ValidationError("counts plus discarded must equal shots")
        object.__setattr__(self, "counts", _frozen(counts))

    @property
    def count_map(self) -> dict:
        labels = self.table.labels
        return {((labels[a], i), (labels[b], j)): int(c)
                for (a, i, b, j), c in zip(self.table.outcome_keys().tolist(), self.counts)}

    def empirical_table(self) -> OutcomeTable:
        """Outcome table of raw frequencies ``count / shots`` (no renormalisation)."""
        return table_from_exclusive(self.table.grid, self.table.statistics, self.table.labels,
                                    self.counts / self.shots, setup_id=self.table.setup_id)


def table_from_exclusive(grid: Grid, statistics: ParticleStatistics, labels: tuple,
                         p: np.ndarray, setup_id: str = "") -> OutcomeTable:
    m, n = len(labels), grid.n
    s1, s2 = np.triu_indices(m * n)
    full = np.where(s1 == s2, 2 * p, p)
    mat = np.full((m * n, m * n), np.nan)
    mat[s1, s2] = full
    mat[s2, s1] = full
    return OutcomeTable(grid, statistics, labels, mat.reshape(m, n, m, n), setup_id)


# --- kernels ----------------------------------------------------------------

def pure_density(u: np.ndarray, psi_u: np.ndarray, psi_r: np.ndarray, sign: int,
                 unknown: int = 0, reference: int = 1) -> np.ndarray:
    """Closed-form ``|amplitude|^2`` for every ordered slot pair, shape ``(m, n, m, n)``."""
    cu, cr = u[:, unknown], u[:, reference]
    # direct[a, i, b, j] = U[b,u] U[a,r] psi_r(i) psi_u(j)
    direct = (cr[:, None, None, None] * psi_r[None, :, None, None]
              * cu[None, None, :, None] * psi_u[None, None, None, :])
    exchanged = (cu[:, None, None, None] * psi_u[None, :, None, None]
                 * cr[None, None, :, None] * psi_r[None, None, None, :])
    amp = direct + sign * exchanged
    return amp.real ** 2 + amp.imag ** 2


def detection_kernel(u: np.ndarray, psi_r: np.ndarray, sign: int,
                     unknown: int = 0, reference: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Detection-state coefficients ``a[a, b, i]`` (on ``|x_j>``) and ``b[a, b, j]`` (on ``|x_i>``)."""
    cu, cr = u[:, unknown], u[:, reference]
    pair_direct = cu[None, :] * cr[:, None]      # U[b,u] U[a,r]
    pair_exchanged = cr[None, :] * cu[:, None]   # U[b,r] U[a,u]
    a = np.conj(pair_direct[:, :, None] * psi_r[None, None, :])
    b = sign * np.conj(pair_exchanged[:, :, None] * psi_r[None, None, :])
    return a, b


def mixed_density(u: np.ndarray, rho: np.ndarray, psi_r: np.ndarray, sign: int,
                  unknown: int = 0, reference: int = 1) -> np.ndarray:
    """``<phi|rho|phi>`` for the detection state of every ordered slot pair."""
    a, b = detection_kernel(u, psi_r, sign, unknown, reference)
    diag = np.real(np.diag(rho))
    A = a[:, :, :, None]
    B = b[:, :, None, :]
    p = (np.abs(A) ** 2 * diag[None, None, None, :]
         + np.abs(B) ** 2 * diag[None, None, :, None]
         + 2 * np.real(np.conj(A) * B * rho.T[None, None, :, :]))
    # (a, b, i, j) -> (a, i, b, j)
    return p.transpose(0, 2, 1, 3)


# --- public operations ------------------------------------------------------

def _require_two_mode(u: TransferMatrix) -> None:
    if u.m != 2:
        raise ValidationError(f"expected a 2-mode transfer matrix, got m={u.m}")


def _require_normalized(psi: WaveFunction, what: str) -> None:
    if not psi.is_normalized():
        raise ValidationError(f"{what} is not normalised (norm {psi.norm:.12g})")


def detection_coefficients(u: TransferMatrix, psi_r: WaveFunction, alpha: int, beta: int,
                           i: int, j: int, statistics: ParticleStatistics) -> DetectionCoefficients:
    """Coefficients for output ports ``alpha``, ``beta`` (1-based) and modes ``i``, ``j`` (0-based)."""
    _require_two_mode(u)
    n = psi_r.grid.n
    if alpha not in (1, 2) or beta not in (1, 2):
        raise ValidationError(f"ports must be 1 or 2, got {alpha}, {beta}")
    if not (0 <= i < n and 0 <= j < n):
        raise ValidationError(f"mode indices must lie in [0, {n}), got {i}, {j}")
    U, r = u.entries, psi_r.amplitudes
    al, be = alpha - 1, beta - 1
    a = np.conj(U[be, 0] * U[al, 1] * r[i])
    b = statistics.sign * np.conj(U[be, 1] * U[al, 0] * r[j])
    return DetectionCoefficients(complex(a), complex(b))


def joint_probabilities_pure(u: TransferMatrix, psi_u: WaveFunction, psi_r: WaveFunction,
                             statistics: ParticleStatistics) -> OutcomeTable:
    _require_two_mode(u)
    _check_same_grid(psi_u.grid, psi_r.grid)
    _require_normalized(psi_u, "unknown state")
    _require_normalized(psi_r, "reference state")
    d = pure_density(u.entries, psi_u.amplitudes, psi_r.amplitudes, statistics.sign)
    return OutcomeTable(psi_u.grid, statistics, u.output_labels, d, setup_id=u.name)


def _require_physical(rho: DensityMatrix, allow_unphysical: bool) -> None:
    if not rho.physical and not allow_unphysical:
        raise ValidationError("density matrix is not flagged physical; pass allow_unphysical=True")


def joint_probabilities_mixed(u: TransferMatrix, rho: DensityMatrix, psi_r: WaveFunction,
                              statistics: ParticleStatistics, *,
                              allow_unphysical: bool = False) -> OutcomeTable:
    _require_two_mode(u)
    _check_same_grid(rho.grid, psi_r.grid)
    _require_normalized(psi_r, "reference state")
    _require_physical(rho, allow_unphysical)
    d = mixed_density(u.entries, rho.entries, psi_r.amplitudes, statistics.sign)
    return OutcomeTable(rho.grid, statistics, u.output_labels, d, setup_id=u.name)


def joint_probabilities_polarized(rho: DensityMatrix, statistics: ParticleStatistics,
                                  psi_r: Optional[WaveFunction] = None, *,
                                  allow_unphysical: bool = False) -> OutcomeTable:
    """Four-output-mode table: unknown in ``1cw``, reference in ``2d``, other inputs empty."""
    _require_physical(rho, allow_unphysical)
    if psi_r is None:
        psi_r = flat_reference(rho.grid)
    _check_same_grid(rho.grid, psi_r.grid)
    _require_normalized(psi_r, "reference state")
    u = polarization_network()
    d = mixed_density(u.entries, rho.entries, psi_r.amplitudes, statistics.sign,
                      unknown=POLARIZED_UNKNOWN, reference=POLARIZED_REFERENCE)
    return OutcomeTable(rho.grid, statistics, u.output_labels, d, setup_id=u.name)


def total_probability(t: OutcomeTable) -> float:
    return float(np.nansum(t.exclusive_probabilities()))


def sample_counts(t: OutcomeTable, shots: int, seed: int) -> CountTable:
    """Multinomial draw over exclusive outcomes plus a ``discarded`` bin for lost flux."""
    if int(shots) != shots or shots < 1:
        raise ValidationError(f"shots must be a positive integer, got {shots}")
    p = np.nan_to_num(t.exclusive_probabilities(), nan=0.0)
    total = p.sum()
    if total > 1 + 1e-9:
        raise InconsistentTableError(f"table probabilities sum to {total:.12g} > 1")
    if total > 1:
        p = p / total
    lost = max(0.0, 1.0 - p.sum())
    rng = np.random.default_rng(seed)
    draw = rng.multinomial(int(shots), np.append(p, lost))
    return CountTable(t, int(shots), draw[:-1], int(draw[-1]))


# --- CSV exchange -----------------------------------------------------------

TABLE_HEADER = ["alpha", "beta", "i", "j", "x_i", "x_j", "p"]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_table_csv(t: OutcomeTable, fh: TextIO, counts: Optional[CountTable] = None) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(TABLE_HEADER + (["count"] if counts is not None else []))
    x = t.grid.points
    p = t.exclusive_probabilities()
    for row, (a, i, b, j) in enumerate(t.outcome_keys().tolist()):
        if np.isnan(p[row]):
            continue
        fields = [str(t.labels[a]), str(t.labels[b]), i, j, _fmt(x[i]), _fmt(x[j]), _fmt(p[row])]
        if counts is not None:
            fields.append(int(counts.counts[row]))
        writer.writerow(fields)
    if counts is not None:
        fh.write(f"# discarded={counts.discarded} shots={counts.shots}\n")


def table_csv_text(t: OutcomeTable, counts: Optional[CountTable] = None) -> str:
    buf = io.StringIO()
    write_table_csv(t, buf, counts)
    return buf.getvalue()


def _parse_labels(names: Iterable[str]) -> tuple:
    parsed = {ModeLabel.parse(x) for x in names}
    if any(lab.polarization is not None for lab in parsed):
        unknown = parsed - set(POLARIZATION_OUTPUTS)
        if unknown:
            raise ValidationError(f"unexpected output modes {sorted(map(str, unknown))}")
        return POLARIZATION_OUTPUTS
    return (ModeLabel(1), ModeLabel(2))


def read_table_csv(fh: TextIO, statistics: ParticleStatistics, grid: Optional[Grid] = None,
                   setup_id: str = ""):
    """Parse a table CSV. Returns ``(OutcomeTable, CountTable | None)``.

    When a ``count`` column is present the returned table holds raw
    frequencies ``count / shots``. The grid is inferred from the positions
    unless given.
    """
    lines = fh.read().splitlines()
    meta = {}
    body = []
    for line in lines:
        if line.startswith("#"):
            for part in line[1:].split():
                if "=" in part:
                    k, v = part.split("=", 1)
                    meta[k] = v
        elif line.strip():
            body.append(line)
    reader = csv.DictReader(body)
    missing = [h for h in TABLE_HEADER if h not in (reader.fieldnames or [])]
    if missing:
        raise ValidationError(f"table CSV is missing columns {missing}")
    rows = list(reader)
    if not rows:
        raise ValidationError("table CSV has no rows")
    has_counts = "count" in reader.fieldnames
    labels = _parse_labels([r["alpha"] for r in rows] + [r["beta"] for r in rows])
    positions = {}
    for r in rows:
        positions[int(r["i"])] = float(r["x_i"])
        positions[int(r["j"])] = float(r["x_j"])
    if grid is None:
        n = max(positions) + 1
        if n < 2 or 0 not in positions or n - 1 not in positions:
            raise ValidationError("cannot infer grid from table positions")
        dx = (positions[n - 1] - positions[0]) / (n - 1)
        grid = Grid(n, positions[0] - dx / 2, positions[n - 1] + dx / 2)
    m, n = len(labels), grid.n
    index = {lab: k for k, lab in enumerate(labels)}
    mat = np.full((m * n, m * n), np.nan)
    count_mat = np.zeros((m * n, m * n), dtype=np.int64)
    for r in rows:
        a, b = index[ModeLabel.parse(r["alpha"])], index[ModeLabel.parse(r["beta"])]
        i, j = int(r["i"]), int(r["j"])
        if not (0 <= i < n and 0 <= j < n):
            raise ValidationError(f"mode index out of range in row {r}")
        s1, s2 = sorted((a * n + i, b * n + j))
        if has_counts:
            count_mat[s1, s2] = int(r["count"])
        val = float(r["p"])
        mat[s1, s2] = mat[s2, s1] = 2 * val if s1 == s2 else val
    table = OutcomeTable(grid, statistics, labels, mat.reshape(m, n, m, n), setup_id)
    if not has_counts:
        return table, None
    if "shots" not in meta or "discarded" not in meta:
        raise ValidationError("count CSV lacks the '# discarded=... shots=...' trailer")
    s1, s2 = np.triu_indices(m * n)
    counts = CountTable(table, int(meta["shots"]), count_mat[s1, s2], int(meta["discarded"]))
    return counts.empirical_table(), counts
