"""Adaptive repeat-until-success preparation of the maximally entangled state.

One round applies a repeat-until-success measurement sequence in the z basis
and then in the x basis: measure the band offset Delta, and while Delta != 0
rotate ensemble 1 by the adaptive angle and measure again.  Rounds repeat up
to a configured maximum; convergence is declared on the first round whose
sequences both open with Delta = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from .fock import (
    FockBasis,
    TwoModeState,
    inner_product,
    mmes_state,
    rotation_matrix,
)
from .measurement import (
    BasisSpec,
    MeasurementRecord,
    SignRule,
    from_measurement_frame,
    sample_outcome,
    to_measurement_frame,
)

__all__ = [
    "ProtocolConfig",
    "SubSequenceRecord",
    "SequenceRecord",
    "adaptive_angle",
    "optimized_angle",
    "resolve_angle",
    "apply_correction",
    "repeat_until_success",
    "run_protocol",
]

AngleRule = Union[str, Callable[[int, int], float]]


def adaptive_angle(delta: int, n_atoms: int) -> float:
    """Default correction angle pi * Delta / N for the S^y rotation."""
    if not 0 <= delta <= n_atoms:
        raise ValueError(f"delta must lie in [0, {n_atoms}], got {delta}")
    return np.pi * delta / n_atoms


def optimized_angle(
    delta: int,
    n_atoms: int,
    state: Optional[TwoModeState] = None,
    basis: BasisSpec = "z",
    grid_points: int = 241,
) -> float:
    """Angle that maximizes the next-step Delta=0 probability for ``state``.

    Falls back to the linear rule when no state is supplied.  Used for
    comparison experiments; the linear rule is the protocol default.
    """
    if delta == 0:
        return 0.0
    if state is None:
        return adaptive_angle(delta, n_atoms)
    thetas = np.linspace(0.0, np.pi, grid_points)
    framed = to_measurement_frame(state, basis).amplitudes
    best_theta, best_p0 = 0.0, -1.0
    for theta in thetas:
        rot = rotation_matrix(-theta, state.basis)  # exp(+i S^y theta / 2)
        corrected = rot @ framed
        p0 = float(np.sum(np.abs(np.diagonal(corrected)) ** 2))
        if p0 > best_p0:
            best_theta, best_p0 = float(theta), p0
    return best_theta


@dataclass(frozen=True)
class ProtocolConfig:
    """Knobs of one protocol run.

    ``tau`` and ``alpha`` describe the optical probe; they matter for the
    exact-POVM experiments and are recorded in manifests, while the
    protocol itself operates at the projective (band-measurement) level.
    """

    n_atoms: int
    alpha: float = 100.0
    tau: Optional[float] = None
    max_repeats: int = 25
    max_rounds: int = 3
    basis_order: Tuple[BasisSpec, ...] = ("z", "x")
    angle_rule: AngleRule = "line"
    seed: Optional[int] = None
    sign_rule: SignRule = "split"
    prune_threshold: float = 1e-10
    node_cap: int = 2_000_000

    def __post_init__(self):
        if self.n_atoms < 1:
            raise ValueError("n_atoms must be at least 1")
        if self.max_repeats < 1 or self.max_rounds < 1:
            raise ValueError("max_repeats and max_rounds must be at least 1")
        if self.tau is None:
            object.__setattr__(self, "tau", np.pi / (2 * self.n_atoms))

    @property
    def basis(self) -> FockBasis:
        return FockBasis(self.n_atoms)


def resolve_angle(
    rule: AngleRule,
    delta: int,
    n_atoms: int,
    state: Optional[TwoModeState] = None,
    basis: BasisSpec = "z",
) -> float:
    if callable(rule):
        return float(rule(delta, n_atoms))
    if rule == "line":
        return adaptive_angle(delta, n_atoms)
    if rule == "optimized":
        return optimized_angle(delta, n_atoms, state, basis)
    raise ValueError(f"unknown angle rule {rule!r}")


def apply_correction(
    state: TwoModeState, delta: int, basis: BasisSpec, theta: Optional[float] = None
) -> TwoModeState:
    """Corrective unitary exp(+i S^y_1 theta/2) in the measurement frame.

    Acts on ensemble 1 only; in a rotated basis the rotation is conjugated
    by the same frame unitary as the measurement that produced Delta.
    """
    if theta is None:
        theta = adaptive_angle(delta, state.n_atoms)
    if theta == 0.0:
        return state
    rot = rotation_matrix(-theta, state.basis)  # exp(+i S^y theta / 2)
    framed = to_measurement_frame(state, basis)
    corrected = TwoModeState(state.basis, rot @ framed.amplitudes)
    return from_measurement_frame(corrected, basis)


@dataclass
class SubSequenceRecord:
    """One repeat-until-success sequence in a fixed basis."""

    basis: BasisSpec
    records: List[MeasurementRecord] = field(default_factory=list)
    capped: bool = False

    @property
    def first_delta(self) -> int:
        return self.records[0].spec.delta

    @property
    def deltas(self) -> Tuple[int, ...]:
        return tuple(rec.spec.delta for rec in self.records)

    @property
    def probability(self) -> float:
        p = 1.0
        for rec in self.records:
            p *= rec.born_probability
        return p


@dataclass
class SequenceRecord:
    """Full trajectory of a protocol run."""

    config: ProtocolConfig
    rounds: List[List[SubSequenceRecord]]
    terminal_state: TwoModeState
    round_fidelities: List[float]
    converged_at: Optional[int]

    @property
    def probability(self) -> float:
        p = 1.0
        for rnd in self.rounds:
            for sub in rnd:
                p *= sub.probability
        return p

    @property
    def any_capped(self) -> bool:
        return any(sub.capped for rnd in self.rounds for sub in rnd)


def repeat_until_success(
    state: TwoModeState,
    basis: BasisSpec,
    config: ProtocolConfig,
    rng: np.random.Generator,
) -> Tuple[TwoModeState, SubSequenceRecord]:
    """Measure and correct in one basis until Delta = 0 (or the repeat cap).

    The returned state is normalized.  Hitting the cap is flagged, not an
    error; the last correction is still applied so the state stays usable.
    """
    sub = SubSequenceRecord(basis=basis)
    current = state
    for _ in range(config.max_repeats):
        record, current = sample_outcome(current, basis, rng, config.sign_rule)
        sub.records.append(record)
        if record.spec.delta == 0:
            return current, sub
        theta = resolve_angle(
            config.angle_rule, record.spec.delta, config.n_atoms, current, basis
        )
        current = apply_correction(current, record.spec.delta, basis, theta)
    sub.capped = True
    return current, sub


def run_protocol(
    initial: TwoModeState,
    config: ProtocolConfig,
    rng: Optional[np.random.Generator] = None,
) -> SequenceRecord:
    """Alternate basis sequences for up to max_rounds rounds.

    Non-convergence within the round budget is a flagged outcome carried in
    ``converged_at = None``, not an error.
    """
    if initial.n_atoms != config.n_atoms:
        raise ValueError("initial state and config disagree on n_atoms")
    if not initial.is_normalized(tol=1e-9):
        raise ValueError("initial state must be normalized")
    if rng is None:
        rng = np.random.default_rng(config.seed)

    target = mmes_state(initial.basis)
    current = initial
    rounds: List[List[SubSequenceRecord]] = []
    round_fidelities: List[float] = []
    converged_at: Optional[int] = None
    for r in range(config.max_rounds):
        round_subs: List[SubSequenceRecord] = []
        for basis in config.basis_order:
            current, sub = repeat_until_success(current, basis, config, rng)
            round_subs.append(sub)
        rounds.append(round_subs)
        round_fidelities.append(abs(inner_product(target, current)) ** 2)
        if converged_at is None and all(
            sub.first_delta == 0 for sub in round_subs
        ):
            converged_at = r + 1
    return SequenceRecord(
        config=config,
        rounds=rounds,
        terminal_state=current,
        round_fidelities=round_fidelities,
        converged_at=converged_at,
    )
