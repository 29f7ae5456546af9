"""Two-particle interference simulation and single-particle state tomography."""

from .core import (
    BOSON,
    FERMION,
    DensityMatrix,
    Grid,
    HomlabError,
    InconsistentTableError,
    ModeLabel,
    ParticleStatistics,
    ReconstructionError,
    ValidationError,
    WaveFunction,
    conjugate_state,
    flat_reference,
    make_grid,
    normalize,
    random_density,
    random_state,
)
from .interferometer import (
    CountTable,
    OutcomeTable,
    detection_coefficients,
    joint_probabilities_mixed,
    joint_probabilities_polarized,
    joint_probabilities_pure,
    sample_counts,
    total_probability,
)
from .optics import (
    PhaseCondition,
    TransferMatrix,
    balanced_splitter,
    classify_phase_condition,
    compose,
    exchange_products,
    lossy_tomography_matrix,
    optical_element,
    polarization_network,
)
from .tomography import (
    assemble_density,
    parallelogram_check,
    pure_candidates,
    reconstruct_amplitude,
    reconstruct_cos_phase,
    reconstruct_rho_general,
    reconstruct_rho_polarized,
)

__version__ = "0.1.0"
