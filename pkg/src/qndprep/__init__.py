"""Adaptive QND preparation of macroscopic entangled states, at desk scale.

Simulates the repeat-until-success protocol that drives two N-atom
ensembles toward the maximally entangled diagonal Fock state via
alternating-basis QND band measurements and adaptive spin rotations,
with exact outcome-tree enumeration and Monte Carlo cross-checks.
"""

from .fock import (
    FockBasis,
    RotationSpec,
    TwoModeState,
    apply_local_rotation,
    coherent_state,
    entanglement_entropy,
    inner_product,
    mmes_state,
    overlap_magnitude,
    product_state,
    rotation_matrix,
    rotation_matrix_closed_form,
    sbar_tot_squared_apply,
    singlet_state,
    spin_operator,
    stot_squared_apply,
    x_polarized_state,
)
from .measurement import (
    MeasurementRecord,
    PovmParams,
    ProjectorSpec,
    modulating_amplitude,
    outcome_probabilities,
    povm_apply,
    povm_projector_discrepancy,
    projector_apply,
    sample_outcome,
)
from .protocol import (
    ProtocolConfig,
    SequenceRecord,
    SubSequenceRecord,
    adaptive_angle,
    apply_correction,
    optimized_angle,
    repeat_until_success,
    run_protocol,
)
from .analysis import (
    ChannelResult,
    CorrectionSpec,
    EnumerationResult,
    MonteCarloResult,
    SequenceTreeNode,
    average_fidelity,
    channel_statistics,
    enumerate_tree,
    first_success_probability,
    fock_grid,
    marginal_probability,
    monte_carlo_estimates,
    success_probability,
)

__version__ = "0.1.0"
