"""Online per-user hardness monitoring.

Each user owns one integer histogram over hardness degrees. Every query adds
one count; when a window of ``num_s`` queries completes, the histogram is
compared with the calibrated normal histogram and the user is flagged if the
distance is strictly above the threshold. Flags never clear on their own.

Nothing about a query survives ingestion except its degree bin, so memory per
user is ``num_bins`` integers plus a few counters.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationResult, distances_to_normal
from .hardness import HardnessError, hardness_degree

WINDOW_POLICIES = ("tumbling", "cumulative")
FLAG_ACTIONS = ("flag_only", "reject_user")


@dataclass
class UserState:
    user_id: str
    counts: np.ndarray
    samples_seen: int = 0
    flagged: bool = False
    windows_completed: int = 0
    last_distance: float | None = None

    @classmethod
    def fresh(cls, user_id: str, num_bins: int) -> "UserState":
        return cls(str(user_id), np.zeros(num_bins, dtype=np.int64))

    def summary(self) -> dict:
        return {
            "user_id": self.user_id,
            "histogram": [int(c) for c in self.counts],
            "samples_seen": self.samples_seen,
            "flagged": self.flagged,
            "windows_completed": self.windows_completed,
            "last_distance": self.last_distance,
        }

    def copy(self) -> "UserState":
        return UserState(self.user_id, self.counts.copy(), self.samples_seen, self.flagged, self.windows_completed, self.last_distance)


@dataclass(frozen=True)
class MonitorConfig:
    calibration: CalibrationResult
    num_s: int | None = None
    window_policy: str = "tumbling"
    action_on_flag: str = "flag_only"

    def __post_init__(self):
        if self.num_s is None:
            object.__setattr__(self, "num_s", self.calibration.num_s)
        problems = []
        if self.num_s != self.calibration.num_s:
            problems.append(f"window num_s={self.num_s} differs from the calibration's num_s={self.calibration.num_s}")
        if self.window_policy not in WINDOW_POLICIES:
            problems.append(f"window_policy must be one of {WINDOW_POLICIES}")
        if self.action_on_flag not in FLAG_ACTIONS:
            problems.append(f"action_on_flag must be one of {FLAG_ACTIONS}")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def num_bins(self) -> int:
        return self.calibration.num_bins


@dataclass(frozen=True)
class QueryVerdict:
    hardness: int
    evaluated: bool
    distance: float | None
    flagged: bool

    def to_dict(self) -> dict:
        return {"hardness": self.hardness, "window_evaluated": self.evaluated, "distance": self.distance, "flagged": self.flagged}


def ingest(state: UserState, trace, cfg: MonitorConfig) -> QueryVerdict:
    """Add one query's label trace to ``state`` (mutated in place) and return the verdict."""
    if len(trace) != cfg.num_bins:
        raise HardnessError(f"trace has {len(trace)} labels, calibration has {cfg.num_bins} bins")
    d = hardness_degree(trace)
    state.counts[d] += 1
    state.samples_seen += 1
    in_window = int(state.counts.sum())
    if cfg.window_policy == "tumbling":
        boundary = in_window == cfg.num_s
    else:
        boundary = in_window % cfg.num_s == 0
    if not boundary:
        return QueryVerdict(d, False, None, state.flagged)
    # same code path as calibration, so replayed calibration sequences reproduce their distances exactly
    dist = float(distances_to_normal(state.counts[None, :], cfg.calibration.normal)[0])
    state.windows_completed += 1
    state.last_distance = dist
    if dist > cfg.calibration.delta:
        state.flagged = True
    if cfg.window_policy == "tumbling":
        state.counts[:] = 0
    return QueryVerdict(d, True, dist, state.flagged)


@dataclass
class _Slot:
    state: UserState
    lock: threading.Lock = field(default_factory=threading.Lock)


class HardnessMonitor:
    """Thread-safe map of user states; one lock per user, one for the map itself."""

    def __init__(self, cfg: MonitorConfig):
        self.cfg = cfg
        self._users: dict[str, _Slot] = {}
        self._lock = threading.Lock()

    def _slot(self, user_id: str) -> _Slot:
        with self._lock:
            slot = self._users.get(user_id)
            if slot is None:
                slot = self._users[user_id] = _Slot(UserState.fresh(user_id, self.cfg.num_bins))
            return slot

    def ingest(self, user_id: str, trace) -> QueryVerdict:
        if len(trace) != self.cfg.num_bins:
            raise HardnessError(f"trace has {len(trace)} labels, calibration has {self.cfg.num_bins} bins")
        slot = self._slot(str(user_id))
        with slot.lock:
            return ingest(slot.state, trace, self.cfg)

    def is_flagged(self, user_id: str) -> bool:
        with self._lock:
            slot = self._users.get(str(user_id))
        if slot is None:
            return False
        with slot.lock:
            return slot.state.flagged

    def user(self, user_id: str) -> UserState | None:
        with self._lock:
            slot = self._users.get(str(user_id))
        if slot is None:
            return None
        with slot.lock:
            return slot.state.copy()

    def snapshot_users(self) -> list[UserState]:
        """Copies of every user state, sorted by user id, each taken under its own lock."""
        with self._lock:
            slots = sorted(self._users.items())
        out = []
        for _, slot in slots:
            with slot.lock:
                out.append(slot.state.copy())
        return out

    def __len__(self) -> int:
        with self._lock:
            return len(self._users)
