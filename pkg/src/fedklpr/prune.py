"""Global unstructured magnitude pruning, the two-stage recovery gate and the ratio controller."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .params import ParamVector, PruneMask, check_structure, prunable_count, pruning_ratio


class InvalidTarget(ValueError):
    pass


class ProtocolOrderError(RuntimeError):
    """Stage 2 was evaluated without a recorded stage-1 accuracy."""


class Decision(str, enum.Enum):
    PROCEED = "proceed"
    SKIP = "skip"
    COMMIT = "commit"
    ROLLBACK = "rollback"


HALT = "halt"


def target_count(target: float, n: int) -> int:
    return min(n, math.ceil(target * n - 1e-9))


def magnitude_prune(p: ParamVector, m: PruneMask, target: float) -> PruneMask:
    """Clear the smallest-magnitude surviving prunable weights until ``target`` is met.

    Bits already cleared stay cleared. Equal magnitudes are pruned in
    (layer, coordinate) order.
    """
    check_structure(p, m)
    n = prunable_count(m)
    bits = m.flat().copy()
    prunable = m.prunable_flat()
    cleared = int(np.count_nonzero(prunable & ~bits))
    # compared in count space so a rounded-up ratio can be re-requested
    if not 0.0 <= target <= 1.0 or target_count(target, n) < cleared:
        raise InvalidTarget(f"target {target} outside [{pruning_ratio(m)}, 1]")
    need = target_count(target, n) - cleared
    if need == 0:
        return m.copy()
    candidates = np.flatnonzero(prunable & bits)
    mags = np.abs(p.flat().astype(np.float64))[candidates]
    order = np.argsort(mags, kind="stable")
    bits[candidates[order[:need]]] = False
    return m.with_flat(bits)


@dataclass
class CrrState:
    acc_threshold: float = 0.55
    delta_rd: float = 0.01
    delta_ep: float = 0.03
    window: int = 3
    recent_accs: list[float] = field(default_factory=list)
    pre_prune_acc: float | None = None
    pruning_halted: bool = False

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("history window must be >= 2")


def crr_stage1(state: CrrState, train_acc: float) -> tuple[Decision, CrrState]:
    """Prune only above threshold and once the round-to-round gain has flattened."""
    history = (state.recent_accs + [float(train_acc)])[-state.window:]
    plateau = len(history) >= 2 and float(np.max(np.diff(history))) < state.delta_rd
    if not state.pruning_halted and train_acc > state.acc_threshold and plateau:
        return Decision.PROCEED, replace(state, recent_accs=history, pre_prune_acc=float(train_acc))
    return Decision.SKIP, replace(state, recent_accs=history, pre_prune_acc=None)


def crr_stage2(state: CrrState, post_prune_acc: float) -> tuple[Decision, CrrState]:
    if state.pre_prune_acc is None:
        raise ProtocolOrderError("crr_stage2 called before a proceeding crr_stage1")
    drop = state.pre_prune_acc - post_prune_acc
    decision = Decision.COMMIT if drop < state.delta_ep else Decision.ROLLBACK
    return decision, replace(state, pre_prune_acc=None)


@dataclass
class PruneControllerState:
    target_ratio: float = 0.70
    per_event_cap: float = 0.09
    current_increment: float | None = None
    eval_epochs_used: int = 0
    eval_epochs_max: int = 10
    consecutive_rejects: int = 0
    saturation_rejects: int = 2
    min_increment: float = 0.01

    def __post_init__(self):
        if self.current_increment is None:
            self.current_increment = self.per_event_cap
        if not 0 < self.current_increment <= self.per_event_cap:
            raise ValueError("increment must lie in (0, per_event_cap]")
        if self.eval_epochs_used > self.eval_epochs_max:
            raise ValueError("eval_epochs_used exceeds eval_epochs_max")


def controller_step(state: PruneControllerState, current_ratio: float, last_decision=None):
    """Account for the last stage-2 outcome and return ``(next_target | HALT, state)``."""
    s = replace(state)
    if last_decision in (Decision.COMMIT, Decision.ROLLBACK):
        s.eval_epochs_used += 1
    if last_decision == Decision.ROLLBACK:
        s.consecutive_rejects += 1
        if s.consecutive_rejects >= s.saturation_rejects:
            s.current_increment = max(s.min_increment, s.current_increment / 2)
            s.consecutive_rejects = 0
    elif last_decision == Decision.COMMIT:
        s.consecutive_rejects = 0
    if current_ratio >= s.target_ratio - 1e-12 or s.eval_epochs_used >= s.eval_epochs_max:
        return HALT, s
    return min(s.target_ratio, current_ratio + s.current_increment), s
