"""Exact and statistical analysis of the preparation protocol.

Three engines compute the same statistics:

* ``enumerate_tree`` expands every (Delta, sign) branch of the outcome tree
  depth-first, carrying unnormalized states whose squared norms are the
  branch probabilities.  Branch mass below the pruning threshold is dropped
  but tallied, so terminal + capped + pruned mass always accounts for the
  full unit of probability.  Exact for small systems; at N = 10 the tree
  fragments (roughly 40% of the mass sits in branches below 1e-10), so
  path-level enumeration cannot be both exact and bounded.
* ``channel_statistics`` evolves the branch-ensemble density matrix through
  the measurement-and-correction channel.  All aggregate statistics
  (marginals, success probabilities, average fidelity) are linear in the
  density matrix, so this is exact with no pruning at all, at the cost of
  not resolving individual outcome paths.
* ``monte_carlo_estimates`` cross-checks both by Born-rule sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .fock import TwoModeState, mmes_state, rotation_matrix
from .measurement import (
    BasisSpec,
    ProjectorSpec,
    _band_project_z,
    basis_unitary,
    from_measurement_frame,
    to_measurement_frame,
)
from .protocol import ProtocolConfig, resolve_angle, run_protocol

__all__ = [
    "CorrectionSpec",
    "StepKey",
    "SequenceTreeNode",
    "EnumerationResult",
    "ChannelResult",
    "MonteCarloResult",
    "fock_grid",
    "enumerate_tree",
    "channel_statistics",
    "marginal_probability",
    "success_probability",
    "first_success_probability",
    "average_fidelity",
    "monte_carlo_estimates",
]


@dataclass(frozen=True)
class CorrectionSpec:
    """Adaptive S^y rotation on ensemble 1, in the given measurement frame."""

    delta: int
    basis: BasisSpec = "z"
    theta: Optional[float] = None  # defaults to pi * delta / N


OperatorSpec = Union[ProjectorSpec, CorrectionSpec]

# (round index, basis index within the round, repeat index), all 0-based.
StepKey = Tuple[int, int, int]


@dataclass
class SequenceTreeNode:
    """A terminal branch of the enumerated outcome tree."""

    mass: float
    fidelity: float
    path: Tuple[Tuple[int, int, int, int], ...]  # (round, basis_idx, delta, sign)
    capped: bool
    converged_at: Optional[int]
    state: Optional[TwoModeState] = None


@dataclass
class EnumerationResult:
    """Aggregated statistics of one exact tree enumeration."""

    config: ProtocolConfig
    terminals: List[SequenceTreeNode]
    terminal_mass: float
    pruned_mass: float
    unexplored_mass: float
    capped_mass: float
    node_cap_hit: bool
    # step_marginals[(r, b, j)][delta] = probability mass (signs aggregated)
    step_marginals: Dict[StepKey, np.ndarray]
    # round_success[r] = mass whose round-r sequences all terminated with
    # Delta = 0 (the sequence-end marginal; capped sequences are failures)
    round_success: np.ndarray
    # round_first_success[r] = mass whose round-r sequences all opened with
    # Delta = 0 (the convergence criterion)
    round_first_success: np.ndarray
    # round_fidelity[r] = sum over branches of |<MMES|psi_tilde>|^2 at round end
    round_fidelity: np.ndarray

    def accounted_mass(self) -> float:
        return self.terminal_mass + self.pruned_mass + self.unexplored_mass

    def step_mass(self, key: StepKey) -> float:
        return float(self.step_marginals[key].sum())


def _correction_matrix(theta: float, state_basis) -> np.ndarray:
    return rotation_matrix(-theta, state_basis)  # exp(+i S^y theta / 2)


def fock_grid(
    operator_string: Sequence[OperatorSpec],
    initial: TwoModeState,
    grid_basis: BasisSpec = "z",
) -> np.ndarray:
    """Probability grid |psi(k1, k2)|^2 after an operator string.

    Operators are applied in list order (first element acts first).  The
    grid is reported in the frame of ``grid_basis``.
    """
    state = initial
    for op in operator_string:
        if isinstance(op, ProjectorSpec):
            framed = to_measurement_frame(state, op.basis)
            projected = _band_project_z(framed.amplitudes, op.delta, op.branch_sign)
            state = from_measurement_frame(
                TwoModeState(state.basis, projected), op.basis
            )
        elif isinstance(op, CorrectionSpec):
            theta = op.theta
            if theta is None:
                theta = np.pi * op.delta / state.n_atoms
            rot = _correction_matrix(theta, state.basis)
            framed = to_measurement_frame(state, op.basis)
            state = from_measurement_frame(
                TwoModeState(state.basis, rot @ framed.amplitudes), op.basis
            )
        else:
            raise TypeError(f"unsupported operator spec {op!r}")
    return to_measurement_frame(state, grid_basis).probability_grid()


@dataclass
class _LiveNode:
    amps: np.ndarray  # unnormalized, lab frame
    round_idx: int
    basis_idx: int
    repeat_idx: int
    first_deltas: Tuple[Optional[int], ...]
    path: Tuple[Tuple[int, int, int, int], ...]
    capped: bool
    round_capped: bool
    converged_at: Optional[int]


def enumerate_tree(
    initial: TwoModeState,
    config: ProtocolConfig,
    prune_threshold: Optional[float] = None,
    store_states: bool = False,
    store_paths: bool = True,
) -> EnumerationResult:
    """Exact expansion of the protocol's stochastic outcome tree.

    Depth-first, so live memory stays proportional to tree depth.  Branches
    below ``prune_threshold`` (absolute probability) are dropped and their
    mass reported in ``pruned_mass``.
    """
    if prune_threshold is None:
        prune_threshold = config.prune_threshold
    if prune_threshold < 0:
        raise ValueError("prune_threshold must be non-negative")
    if initial.n_atoms != config.n_atoms:
        raise ValueError("initial state and config disagree on n_atoms")

    n = config.n_atoms
    d = n + 1
    n_bases = len(config.basis_order)

    marginals: Dict[StepKey, np.ndarray] = {}
    round_success = np.zeros(config.max_rounds)
    round_first_success = np.zeros(config.max_rounds)
    round_fidelity = np.zeros(config.max_rounds)
    terminals: List[SequenceTreeNode] = []
    pruned_mass = 0.0
    terminal_mass = 0.0
    capped_mass = 0.0
    unexplored_mass = 0.0
    node_cap_hit = False
    expansions = 0

    split = config.sign_rule == "split"
    fixed_sign = {"plus": +1, "minus": -1}.get(config.sign_rule)
    state_dependent_angle = config.angle_rule == "optimized"

    # frame matrices, applied directly to amplitude grids in the hot loop
    eye = np.eye(d, dtype=complex)
    frame_u = {
        basis: (basis_unitary(basis, initial.basis) if basis != "z" else eye)
        for basis in config.basis_order
    }
    if not state_dependent_angle:
        cached_rot = {
            delta: _correction_matrix(
                resolve_angle(config.angle_rule, delta, n), initial.basis
            )
            for delta in range(1, d)
        }

    def fidelity_contribution(amps: np.ndarray) -> float:
        # |<MMES|psi_tilde>|^2 = |sum_k psi(k,k)|^2 / (N+1)
        return abs(np.trace(amps)) ** 2 / d

    def advance(node: _LiveNode) -> Optional[_LiveNode]:
        """Move past completed sequences/rounds; record boundary statistics.

        Returns the node positioned at its next measurement, or None if the
        trajectory is terminal (all rounds done).
        """
        while True:
            if node.basis_idx < n_bases:
                return node
            # round boundary
            r = node.round_idx
            mass = float(np.sum(np.abs(node.amps) ** 2))
            round_fidelity[r] += fidelity_contribution(node.amps)
            if not node.round_capped:
                round_success[r] += mass
            all_zero = all(fd == 0 for fd in node.first_deltas)
            if all_zero:
                round_first_success[r] += mass
                if node.converged_at is None:
                    node.converged_at = r + 1
            node.round_idx += 1
            node.basis_idx = 0
            node.repeat_idx = 0
            node.round_capped = False
            node.first_deltas = (None,) * n_bases
            if node.round_idx >= config.max_rounds:
                return None

    stack: List[_LiveNode] = []
    root = _LiveNode(
        amps=np.array(initial.amplitudes, dtype=complex),
        round_idx=0,
        basis_idx=0,
        repeat_idx=0,
        first_deltas=(None,) * n_bases,
        path=(),
        capped=False,
        round_capped=False,
        converged_at=None,
    )
    stack.append(root)

    while stack:
        node = stack.pop()
        if node_cap_hit:
            unexplored_mass += float(np.sum(np.abs(node.amps) ** 2))
            continue
        expansions += 1
        if expansions > config.node_cap:
            node_cap_hit = True
            unexplored_mass += float(np.sum(np.abs(node.amps) ** 2))
            continue

        r, b, j = node.round_idx, node.basis_idx, node.repeat_idx
        basis = config.basis_order[b]
        u = frame_u[basis]
        uh = u.conj().T
        framed = uh @ node.amps @ uh.T  # == to_measurement_frame

        key = (r, b, j)
        if key not in marginals:
            marginals[key] = np.zeros(d)
        step_marg = marginals[key]

        for delta in range(d):
            if delta == 0:
                branches = ((+1, 1.0),)
            elif split:
                branches = ((+1, 0.5), (-1, 0.5))
            else:
                branches = ((fixed_sign, 1.0),)
            for sign, weight in branches:
                child_framed = _band_project_z(framed, delta, sign) * np.sqrt(weight)
                mass = float(np.sum(np.abs(child_framed) ** 2))
                step_marg[delta] += mass
                if mass <= 0.0 or mass < prune_threshold:
                    pruned_mass += mass
                    continue
                first_deltas = node.first_deltas
                if j == 0:
                    fd = list(first_deltas)
                    fd[b] = delta
                    first_deltas = tuple(fd)
                path = node.path
                if store_paths:
                    path = path + ((r, b, delta, sign),)
                capped = node.capped
                round_capped = node.round_capped
                if delta == 0:
                    basis_idx, repeat_idx = b + 1, 0
                else:
                    if state_dependent_angle:
                        # child_framed already sits in the measurement frame
                        theta = resolve_angle(
                            config.angle_rule,
                            delta,
                            n,
                            TwoModeState(initial.basis, child_framed / np.sqrt(mass)),
                            "z",
                        )
                        rot = _correction_matrix(theta, initial.basis)
                    else:
                        rot = cached_rot[delta]
                    child_framed = rot @ child_framed
                    if j + 1 >= config.max_repeats:
                        capped = True
                        round_capped = True
                        basis_idx, repeat_idx = b + 1, 0
                    else:
                        basis_idx, repeat_idx = b, j + 1
                child_lab = u @ child_framed @ u.T  # == from_measurement_frame
                child = _LiveNode(
                    amps=np.asarray(child_lab),
                    round_idx=r,
                    basis_idx=basis_idx,
                    repeat_idx=repeat_idx,
                    first_deltas=first_deltas,
                    path=path,
                    capped=capped,
                    round_capped=round_capped,
                    converged_at=node.converged_at,
                )
                advanced = advance(child)
                if advanced is None:
                    terminal_mass += mass
                    if child.capped:
                        capped_mass += mass
                    terminals.append(
                        SequenceTreeNode(
                            mass=mass,
                            fidelity=fidelity_contribution(child.amps) / mass,
                            path=child.path,
                            capped=child.capped,
                            converged_at=child.converged_at,
                            state=(
                                TwoModeState(initial.basis, child.amps)
                                if store_states
                                else None
                            ),
                        )
                    )
                else:
                    stack.append(advanced)

    return EnumerationResult(
        config=config,
        terminals=terminals,
        terminal_mass=terminal_mass,
        pruned_mass=pruned_mass,
        unexplored_mass=unexplored_mass,
        capped_mass=capped_mass,
        node_cap_hit=node_cap_hit,
        step_marginals=marginals,
        round_success=round_success,
        round_first_success=round_first_success,
        round_fidelity=round_fidelity,
    )


@dataclass
class ChannelResult:
    """Exact aggregate statistics from density-matrix channel evolution.

    Carries the same round-level arrays as EnumerationResult but with no
    pruning: the branch ensemble is evolved as a density matrix, which is
    exact for every statistic linear in the branch probabilities.
    """

    config: ProtocolConfig
    step_marginals: Dict[StepKey, np.ndarray]
    round_success: np.ndarray
    round_first_success: np.ndarray
    round_fidelity: np.ndarray
    total_mass: float

    # channel evolution never prunes or caps; mirror the enumeration API
    pruned_mass: float = 0.0
    unexplored_mass: float = 0.0
    node_cap_hit: bool = False

    def accounted_mass(self) -> float:
        return self.total_mass

    def step_mass(self, key: StepKey) -> float:
        return float(self.step_marginals[key].sum())


def _frame_vec_unitary(basis: BasisSpec, fock_basis) -> np.ndarray:
    """Unitary on vec(psi) implementing the measurement-frame transform."""
    d = fock_basis.dim
    if basis == "z":
        return np.eye(d * d, dtype=complex)
    u_dag = basis_unitary(basis, fock_basis).conj().T
    # framed psi = U^dag psi U^dag^T, so vec(psi) -> kron(U^dag, U^dag) vec(psi)
    return np.kron(u_dag, u_dag)


def channel_statistics(
    initial: TwoModeState,
    config: ProtocolConfig,
) -> ChannelResult:
    """Exact protocol statistics via branch-ensemble (density matrix) evolution.

    Each measurement step is a Kraus channel over (Delta, sign) outcomes;
    sequence bookkeeping (termination at Delta = 0, the repeat cap) is a
    classical label tracked as separate density-matrix components.  Only
    outcome-indexed angle rules are supported, since a state-dependent rule
    breaks the linearity this engine relies on.
    """
    if initial.n_atoms != config.n_atoms:
        raise ValueError("initial state and config disagree on n_atoms")
    if config.angle_rule == "optimized":
        raise ValueError(
            "channel_statistics requires an outcome-indexed angle rule; "
            "the state-dependent 'optimized' rule is not linear in the "
            "branch ensemble"
        )

    n = config.n_atoms
    d = n + 1
    dim = d * d
    n_bases = len(config.basis_order)
    split = config.sign_rule == "split"
    fixed_sign = {"plus": +1, "minus": -1}.get(config.sign_rule)

    # band masks on vec(psi): +1 on k2 - k1 = delta, sign on k1 - k2 = delta
    k1, k2 = np.divmod(np.arange(dim), d)
    masks = {}
    for delta in range(d):
        for sign in ((+1,) if delta == 0 else (+1, -1)):
            m = np.zeros(dim)
            m[k2 - k1 == delta] = 1.0
            m[k1 - k2 == delta] = float(sign)
            masks[(delta, sign)] = m

    # correction on vec(psi): psi -> R psi with R = exp(+i S^y theta/2)
    corrections = {}
    eye = np.eye(d)
    for delta in range(1, d):
        theta = resolve_angle(config.angle_rule, delta, n)
        corrections[delta] = np.kron(_correction_matrix(theta, initial.basis), eye)

    frames = {b: _frame_vec_unitary(b, initial.basis) for b in config.basis_order}
    mmes_vec = mmes_state(initial.basis).amplitudes.reshape(dim)

    marginals: Dict[StepKey, np.ndarray] = {}
    round_success = np.zeros(config.max_rounds)
    round_first_success = np.zeros(config.max_rounds)
    round_fidelity = np.zeros(config.max_rounds)

    def run_sequence(rho: np.ndarray, r: int, b: int):
        """One repeat-until-success sequence on a branch-ensemble component.

        Returns (first_zero, late_zero, capped) components in the lab frame:
        terminated at Delta=0 on the first try, terminated later, or hit the
        repeat cap (with the last correction applied).
        """
        w = frames[config.basis_order[b]]
        active = w @ rho @ w.conj().T
        first_zero = np.zeros_like(active)
        late_zero = np.zeros_like(active)
        for j in range(config.max_repeats):
            key = (r, b, j)
            if key not in marginals:
                marginals[key] = np.zeros(d)
            nxt = np.zeros_like(active)
            for delta in range(d):
                if delta == 0:
                    branches = ((+1, 1.0),)
                elif split:
                    branches = ((+1, 0.5), (-1, 0.5))
                else:
                    branches = ((fixed_sign, 1.0),)
                for sign, weight in branches:
                    m = masks[(delta, sign)]
                    comp = weight * (np.outer(m, m) * active)
                    marginals[key][delta] += float(np.trace(comp).real)
                    if delta == 0:
                        if j == 0:
                            first_zero += comp
                        else:
                            late_zero += comp
                    else:
                        rot = corrections[delta]
                        nxt += rot @ comp @ rot.conj().T
            active = nxt
        wc = w.conj().T
        return (
            wc @ first_zero @ w,
            wc @ late_zero @ w,
            wc @ active @ w,  # capped, last correction already applied
        )

    rho = np.outer(
        initial.amplitudes.reshape(dim), initial.amplitudes.reshape(dim).conj()
    )
    total_mass = float(np.trace(rho).real)
    for r in range(config.max_rounds):
        # label: (all sequences so far opened with 0, none hit the cap)
        components = {(True, True): rho}
        for b in range(n_bases):
            updated: Dict[Tuple[bool, bool], np.ndarray] = {}
            for (first_ok, clean), comp in components.items():
                first_zero, late_zero, capped = run_sequence(comp, r, b)
                for lbl, part in (
                    ((first_ok, clean), first_zero),
                    ((False, clean), late_zero),
                    ((False, False), capped),
                ):
                    if lbl in updated:
                        updated[lbl] += part
                    else:
                        updated[lbl] = part.copy()
            components = updated
        rho = np.zeros_like(rho)
        for (first_ok, clean), comp in components.items():
            mass = float(np.trace(comp).real)
            if first_ok:
                round_first_success[r] += mass
            if clean:
                round_success[r] += mass
            rho += comp
        round_fidelity[r] = float(
            np.real(mmes_vec.conj() @ rho @ mmes_vec)
        )

    return ChannelResult(
        config=config,
        step_marginals=marginals,
        round_success=round_success,
        round_first_success=round_first_success,
        round_fidelity=round_fidelity,
        total_mass=float(np.trace(rho).real),
    )


AnalysisResult = Union[EnumerationResult, "ChannelResult"]


def marginal_probability(
    result: AnalysisResult,
    delta: int,
    round_idx: int = 0,
    basis_idx: int = 0,
    repeat_idx: int = 0,
) -> float:
    """Total probability of outcome Delta at one measurement step.

    Aggregated over branch signs and over all histories reaching that step;
    summing over Delta gives the mass that reached the step.
    """
    key = (round_idx, basis_idx, repeat_idx)
    if key not in result.step_marginals:
        raise KeyError(f"enumeration did not reach step {key}")
    return float(result.step_marginals[key][delta])


def success_probability(result: AnalysisResult, round_idx: int) -> float:
    """Mass whose round-r sequences all terminated with Delta = 0.

    This is the sequence-end marginal p(Delta_L = 0): a sequence succeeds
    when it reaches Delta = 0 within the repeat cap, and the round succeeds
    when every one of its sequences does.
    """
    return float(result.round_success[round_idx])


def first_success_probability(result: AnalysisResult, round_idx: int) -> float:
    """Mass whose round opened with Delta = 0 in every basis of the round.

    This is the protocol's convergence criterion; it is strictly more
    demanding than success_probability.
    """
    return float(result.round_first_success[round_idx])


def average_fidelity(result: AnalysisResult, round_idx: int = -1) -> float:
    """Probability-weighted fidelity to the MMES at a round boundary."""
    return float(result.round_fidelity[round_idx])


@dataclass
class MonteCarloResult:
    """Sampled protocol statistics with binomial/sample standard errors."""

    config: ProtocolConfig
    n_trajectories: int
    round_success: np.ndarray
    round_success_se: np.ndarray
    round_first_success: np.ndarray
    round_first_success_se: np.ndarray
    round_fidelity: np.ndarray
    round_fidelity_se: np.ndarray
    # first_z_marginals[r, delta]: frequency of Delta on the round's first
    # measurement in the first basis
    first_marginals: np.ndarray
    first_marginals_se: np.ndarray
    converged_fraction: float
    capped_fraction: float


def monte_carlo_estimates(
    n_trajectories: int,
    initial: TwoModeState,
    config: ProtocolConfig,
    rng: Optional[np.random.Generator] = None,
) -> MonteCarloResult:
    """Born-rule sampling cross-check of the enumeration statistics."""
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be at least 1")
    if rng is None:
        rng = np.random.default_rng(config.seed)

    m = config.max_rounds
    d = config.n_atoms + 1
    success_counts = np.zeros(m)
    first_success_counts = np.zeros(m)
    fidelity_sum = np.zeros(m)
    fidelity_sq_sum = np.zeros(m)
    first_counts = np.zeros((m, d))
    converged = 0
    capped = 0
    for _ in range(n_trajectories):
        rec = run_protocol(initial, config, rng)
        for r, subs in enumerate(rec.rounds):
            if not any(sub.capped for sub in subs):
                success_counts[r] += 1
            if all(sub.first_delta == 0 for sub in subs):
                first_success_counts[r] += 1
            first_counts[r, subs[0].first_delta] += 1
        f = np.asarray(rec.round_fidelities)
        fidelity_sum += f
        fidelity_sq_sum += f**2
        if rec.converged_at is not None:
            converged += 1
        if rec.any_capped:
            capped += 1

    nt = float(n_trajectories)
    p_suc = success_counts / nt
    p_suc_se = np.sqrt(np.maximum(p_suc * (1 - p_suc), 0.0) / nt)
    p_first = first_success_counts / nt
    p_first_se = np.sqrt(np.maximum(p_first * (1 - p_first), 0.0) / nt)
    f_avg = fidelity_sum / nt
    f_var = np.maximum(fidelity_sq_sum / nt - f_avg**2, 0.0)
    f_se = np.sqrt(f_var / nt)
    marg = first_counts / nt
    marg_se = np.sqrt(np.maximum(marg * (1 - marg), 0.0) / nt)
    return MonteCarloResult(
        config=config,
        n_trajectories=n_trajectories,
        round_success=p_suc,
        round_success_se=p_suc_se,
        round_first_success=p_first,
        round_first_success_se=p_first_se,
        round_fidelity=f_avg,
        round_fidelity_se=f_se,
        first_marginals=marg,
        first_marginals_se=marg_se,
        converged_fraction=converged / nt,
        capped_fraction=capped / nt,
    )
