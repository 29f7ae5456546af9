"""Mode-transfer matrices: construction, composition and phase classification.

A transfer matrix ``U`` maps input annihilation operators onto output ones,
``b = U a``. Passive optics means every singular value is at most one; loss
shows up as singular values strictly below one.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import ModeLabel, ValidationError, _frozen

UNITARY_TOL = 1e-10
PASSIVE_TOL = 1e-10
DEFAULT_PHASE_TOL = 1e-10

_PORT_LABELS = (ModeLabel(1), ModeLabel(2))


@dataclass(frozen=True, eq=False)
class TransferMatrix:
    entries: np.ndarray
    input_labels: tuple = _PORT_LABELS
    output_labels: tuple = _PORT_LABELS
    name: str = "custom"

    def __post_init__(self):
        u = np.asarray(self.entries, dtype=complex)
        if u.ndim != 2 or u.shape[0] != u.shape[1] or u.shape[0] not in (2, 4):
            raise ValidationError(f"transfer matrix must be 2x2 or 4x4, got shape {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValidationError("transfer matrix entries must be finite")
        m = u.shape[0]
        labels_in = tuple(ModeLabel.parse(x) if isinstance(x, str) else x for x in self.input_labels)
        labels_out = tuple(ModeLabel.parse(x) if isinstance(x, str) else x for x in self.output_labels)
        if len(labels_in) != m or len(labels_out) != m:
            raise ValidationError(f"need {m} input and {m} output labels")
        for lab in labels_in + labels_out:
            if (lab.polarization is not None) != (m == 4):
                raise ValidationError(
                    "polarization labels are required for 4-mode matrices and forbidden for 2-mode ones")
        smax = float(np.linalg.svd(u, compute_uv=False)[0])
        if smax > 1 + PASSIVE_TOL:
            raise ValidationError(
                f"transfer matrix has gain (largest singular value {smax:.12g} > 1)")
        object.__setattr__(self, "entries", _frozen(u))
        object.__setattr__(self, "input_labels", labels_in)
        object.__setattr__(self, "output_labels", labels_out)

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    def __getitem__(self, idx):
        return self.entries[idx]

    def unitarity_defect(self) -> float:
        u = self.entries
        return float(np.max(np.abs(u @ u.conj().T - np.eye(self.m))))

    def is_unitary(self, tol: float = UNITARY_TOL) -> bool:
        return self.unitarity_defect() < tol

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.entries, compute_uv=False)

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "re": self.entries.real.ravel().tolist(),
            "im": self.entries.imag.ravel().tolist(),
            "labels": {"inputs": [str(x) for x in self.input_labels],
                       "outputs": [str(x) for x in self.output_labels]},
            "name": self.name,
        }

    @classmethod
    def from_json(cls, data: dict) -> "TransferMatrix":
        try:
            m = int(data["m"])
            re = np.asarray(data["re"], dtype=float)
            im = np.asarray(data.get("im", [0.0] * (m * m)), dtype=float)
        except KeyError as exc:
            raise ValidationError(f"matrix file is missing key {exc.args[0]!r}") from None
        except (TypeError, ValueError):
            raise ValidationError("matrix 'm', 're', 'im' must be numeric") from None
        if re.shape != (m * m,) or im.shape != (m * m,):
            raise ValidationError(f"expected {m * m} row-major values in 're' and 'im'")
        labels = data.get("labels")
        kwargs = {}
        if isinstance(labels, dict):
            kwargs = {"input_labels": tuple(labels["inputs"]),
                      "output_labels": tuple(labels["outputs"])}
        elif isinstance(labels, list):
            kwargs = {"input_labels": tuple(labels), "output_labels": tuple(labels)}
        elif m == 4:
            raise ValidationError("4-mode matrices need explicit labels")
        return cls((re + 1j * im).reshape(m, m), name=data.get("name", "custom"), **kwargs)


def balanced_splitter() -> TransferMatrix:
    return TransferMatrix(np.array([[1, 1], [1, -1]]) / math.sqrt(2), name="balanced")


def rotation(theta: float) -> TransferMatrix:
    c, s = math.cos(theta), math.sin(theta)
    return TransferMatrix(np.array([[c, s], [-s, c]]), name=f"rotation({theta!r})")


def quarter_wave() -> TransferMatrix:
    return TransferMatrix(np.diag([1, 1j]), name="quarter_wave")


def brewster(eta: float) -> TransferMatrix:
    """Polarisation-dependent attenuator ``diag(1, eta)``."""
    eta = _check_eta(eta)
    return TransferMatrix(np.diag([1.0, eta]), name=f"brewster({eta!r})")


def _check_eta(eta: float) -> float:
    eta = float(eta)
    if not 0.0 <= eta <= 1.0:
        raise ValidationError(f"damping factor eta must lie in [0, 1], got {eta}")
    return eta


def optical_element(kind: str, param: Optional[float] = None) -> TransferMatrix:
    """Build a 2x2 element by name: ``balanced_splitter``, ``rotation``, ``quarter_wave``, ``brewster``."""
    if kind == "balanced_splitter":
        return balanced_splitter()
    if kind == "quarter_wave":
        return quarter_wave()
    if kind in ("rotation", "brewster"):
        if param is None:
            raise ValidationError(f"{kind} needs a parameter")
        return rotation(param) if kind == "rotation" else brewster(param)
    raise ValidationError(f"unknown optical element {kind!r}")


def compose(elements: Sequence[TransferMatrix]) -> TransferMatrix:
    """Chain elements in optical order: ``elements[0]`` acts first.

    The returned matrix is ``elements[-1] @ ... @ elements[0]``.
    """
    if not elements:
        raise ValidationError("compose needs at least one element")
    first = elements[0]
    m = first.m
    u = np.eye(m, dtype=complex)
    for el in elements:
        if el.m != m:
            raise ValidationError(f"mode-count mismatch: {el.m} vs {m}")
        u = el.entries @ u
    return TransferMatrix(u, input_labels=first.input_labels,
                          output_labels=elements[-1].output_labels,
                          name=" -> ".join(el.name for el in elements))


def lossy_tomography_matrix(eta: float) -> TransferMatrix:
    """Rotation(pi/4) . Brewster(eta) . quarter-wave . rotation(-pi/4).

    Unitary only at ``eta = 1``; at ``eta = sqrt(2) - 1`` the coincidence
    exchange products become purely imaginary.
    """
    eta = _check_eta(eta)
    u = compose([rotation(-math.pi / 4), quarter_wave(), brewster(eta), rotation(math.pi / 4)])
    return TransferMatrix(u.entries, name=f"lossy(eta={eta!r})")


def _polarization_factors() -> tuple[np.ndarray, np.ndarray]:
    s = 1 / math.sqrt(2)
    u_bs = s * np.array([[1, 0, 1, 0],
                         [0, 1, 0, 1],
                         [1, 0, -1, 0],
                         [0, 1, 0, -1]], dtype=complex)
    u_basis = s * np.array([[1, 1, 0, 0],
                            [-1j, 1j, 0, 0],
                            [0, 0, 1, 1],
                            [0, 0, 1, -1]], dtype=complex)
    return u_bs, u_basis


POLARIZATION_INPUTS = (ModeLabel(1, "cw"), ModeLabel(1, "ccw"), ModeLabel(2, "d"), ModeLabel(2, "a"))
POLARIZATION_OUTPUTS = (ModeLabel(1, "h"), ModeLabel(1, "v"), ModeLabel(2, "h"), ModeLabel(2, "v"))


def polarization_network() -> TransferMatrix:
    """Beam splitter times the circular/diagonal input-basis change (4 modes)."""
    u_bs, u_basis = _polarization_factors()
    return TransferMatrix(u_bs @ u_basis, input_labels=POLARIZATION_INPUTS,
                          output_labels=POLARIZATION_OUTPUTS, name="polarization")


def haar_unitary(seed: int, m: int = 2) -> np.ndarray:
    """Haar-distributed unitary via phase-fixed QR of a complex Gaussian matrix."""
    rng = np.random.default_rng(seed)
    z = (rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))) / math.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def haar_transfer(seed: int) -> TransferMatrix:
    return TransferMatrix(haar_unitary(seed), name=f"haar(seed={seed})")


# --- exchange products ------------------------------------------------------

def exchange_kernel(u: np.ndarray, unknown: int = 0, reference: int = 1) -> np.ndarray:
    """``K[a, b] = U[b,u] U[a,r] conj(U[b,r]) conj(U[a,u])`` for all output pairs."""
    cu, cr = u[:, unknown], u[:, reference]
    K = cu[None, :] * cr[:, None] * np.conj(cr[None, :]) * np.conj(cu[:, None])
    # same-port products are |U[a,u]|^2 |U[a,r]|^2; write them without rounding noise
    K[np.diag_indices_from(K)] = np.abs(cu) ** 2 * np.abs(cr) ** 2
    return K


@dataclass(frozen=True, eq=False)
class ExchangeProducts:
    K: np.ndarray

    def __getitem__(self, key):
        a, b = key
        return self.K[a - 1, b - 1]


def exchange_products(u: TransferMatrix) -> ExchangeProducts:
    """Exchange products for a 2-mode matrix; ``K[a, b]`` is 1-based via ``__getitem__``."""
    if u.m != 2:
        raise ValidationError(f"exchange products need a 2-mode matrix, got m={u.m}")
    return ExchangeProducts(_frozen(exchange_kernel(u.entries)))


class PhaseCondition(enum.Enum):
    REAL_ACCESS = "RealAccess"
    IMAGINARY_COINCIDENCE_ACCESS = "ImaginaryCoincidenceAccess"
    MIXED = "Mixed"


def classify_phase_condition(u: TransferMatrix, tol: float = DEFAULT_PHASE_TOL) -> PhaseCondition:
    """Which part of the off-diagonal density-matrix elements the setup exposes.

    Same-port products ``K[a, a]`` are real for every matrix, so imaginary
    access can only come from the coincidence entries.
    """
    k = exchange_products(u).K
    if np.max(np.abs(k.imag)) < tol:
        return PhaseCondition.REAL_ACCESS
    coincidence = np.array([k[0, 1], k[1, 0]])
    if np.all(np.abs(coincidence.real) < tol) and np.min(np.abs(coincidence.imag)) > tol:
        return PhaseCondition.IMAGINARY_COINCIDENCE_ACCESS
    return PhaseCondition.MIXED
