"""The two-strike client filtering state machine.

Clients evaluated as poor are warned; a second consecutive poor evaluation
disconnects them permanently. Recovering in between resets the strike
count. Disconnects that would leave fewer than ``min_active`` participating
clients are suppressed (in ascending client id order) and logged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

log = logging.getLogger(__name__)

ACTIVE = "active"
WARNED = "warned"
DISCONNECTED = "disconnected"

POLICY_LOWEST_PRECISION = "lowest_precision"
POLICY_THRESHOLD = "threshold"


class ProtocolError(RuntimeError):
    """Metrics missing for a client the filter still tracks."""


@dataclass(frozen=True)
class DropPolicy:
    kind: str = POLICY_LOWEST_PRECISION
    threshold: float = 0.7
    # immediate=True skips the warning round and disconnects on first strike;
    # kept as an explicit override of the default two-strike protocol.
    immediate: bool = False

    def validate(self) -> None:
        if self.kind not in (POLICY_LOWEST_PRECISION, POLICY_THRESHOLD):
            raise ValueError(f"unknown drop policy '{self.kind}'")
        if self.kind == POLICY_THRESHOLD and not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")

    def label(self) -> str:
        if self.kind == POLICY_THRESHOLD:
            return f"threshold_{self.threshold:g}"
        return self.kind


@dataclass
class FilterState:
    status: dict[int, str]
    poor_streak: dict[int, int]
    policy: DropPolicy
    min_active: int = 2

    @classmethod
    def fresh(cls, client_ids, policy: DropPolicy, min_active: int = 2) -> "FilterState":
        policy.validate()
        ids = list(client_ids)
        return cls(
            status={i: ACTIVE for i in ids},
            poor_streak={i: 0 for i in ids},
            policy=policy,
            min_active=min_active,
        )

    def participating(self) -> list[int]:
        return sorted(i for i, s in self.status.items() if s != DISCONNECTED)

    def copy(self) -> "FilterState":
        return replace(self, status=dict(self.status), poor_streak=dict(self.poor_streak))


def _poor_clients(
    state: FilterState,
    metrics: dict[int, tuple[float, float]],
    tracked: list[int],
) -> set[int]:
    missing = [i for i in tracked if i not in metrics]
    if missing:
        raise ProtocolError(f"no metrics for participating clients {missing}")
    if not tracked:
        return set()
    if state.policy.kind == POLICY_LOWEST_PRECISION:
        # exactly one client per round; ties break to the lowest id
        worst = min(tracked, key=lambda i: (metrics[i][0], i))
        return {worst}
    return {i for i in tracked if metrics[i][0] < state.policy.threshold}


def filter_step(
    state: FilterState,
    metrics: dict[int, tuple[float, float]],
    round_no: int,
    exempt: frozenset[int] | set[int] = frozenset(),
) -> tuple[FilterState, list[int], list[int]]:
    """Advance the machine one evaluation round.

    Clients in ``exempt`` were not evaluated this round (e.g. they faulted);
    their status and strike count carry over unchanged. Returns (new state,
    clients disconnected this round, clients whose disconnect was suppressed
    by the participation floor).
    """
    new = state.copy()
    tracked = [i for i in state.participating() if i not in exempt]
    poor = _poor_clients(state, metrics, tracked)
    candidates = []
    for cid in tracked:
        if cid in poor:
            strikes = 2 if state.policy.immediate else new.poor_streak[cid] + 1
            new.poor_streak[cid] = min(strikes, 2)
            new.status[cid] = WARNED
            if new.poor_streak[cid] >= 2:
                candidates.append(cid)
        else:
            new.poor_streak[cid] = 0
            new.status[cid] = ACTIVE
    disconnected = []
    suppressed = []
    for cid in sorted(candidates):
        if len(new.participating()) - 1 >= new.min_active:
            new.status[cid] = DISCONNECTED
            new.poor_streak[cid] = 2
            disconnected.append(cid)
        else:
            # cannot drop below the participation floor; strike not recorded
            new.poor_streak[cid] = 1
            suppressed.append(cid)
            log.warning(
                "round %d: suppressed disconnect of client %d (min_active=%d)",
                round_no, cid, new.min_active,
            )
    return new, disconnected, suppressed
