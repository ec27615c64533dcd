"""Cognitive states and the legal transitions between them."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class CognitiveState(str, Enum):
    EXPLORATION = "Exploration"
    TARGET_VERIFICATION = "TargetVerification"
    TARGET_APPROACHING = "TargetApproaching"
    CHECK_READY_TO_ANSWER = "CheckReadyToAnswer"


E = CognitiveState.EXPLORATION
TV = CognitiveState.TARGET_VERIFICATION
TA = CognitiveState.TARGET_APPROACHING
CRA = CognitiveState.CHECK_READY_TO_ANSWER

# self-loops cover steps that make progress without changing state; CRA->CRA is the terminal answer
LEGAL_EDGES = frozenset(
    {(E, E), (E, TV), (TV, TA), (TV, E), (TA, TA), (TA, CRA), (CRA, E), (CRA, CRA)}
    | {(s, CRA) for s in CognitiveState}
)


@dataclass(frozen=True)
class Signals:
    target_candidate_found: bool = False
    target_confirmed: bool = False
    at_target: bool = False
    ready_to_answer: bool = False
    budget_exhausted: bool = False


def transition(state: CognitiveState, signals: Signals) -> CognitiveState:
    """Next state; total over every (state, signals) pair.

    In TargetVerification a false ``target_confirmed`` means rejection.
    """
    if signals.budget_exhausted:
        return CRA
    if state is E:
        return TV if signals.target_candidate_found else E
    if state is TV:
        return TA if signals.target_confirmed else E
    if state is TA:
        return CRA if signals.at_target else TA
    return CRA if signals.ready_to_answer else E


def is_legal(src: CognitiveState, dst: CognitiveState) -> bool:
    return (src, dst) in LEGAL_EDGES
