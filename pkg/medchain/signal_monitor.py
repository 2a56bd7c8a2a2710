"""
Edge-side patient monitoring.

Per-window time-domain features, the per-channel statistic delta, the cohort
baseline, the percent change indicator kappa and the Major/Minor/Repeat rule
that decides what the edge node shares on chain.
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import numpy.typing as npt
from scipy import stats

from .errors import BaselineDegenerate, IncompleteData, InvalidInput
from .payload import PayloadKind, SharePayload

DEFAULT_ZETA = 30.0
DEFAULT_WINDOW_LENGTH = 1920
MAJOR_CHANNEL_COUNT = 2

logger = logging.getLogger(__name__)


class Session(Enum):
    Before = "before"
    During = "during"
    After = "after"


SESSIONS: tuple[Session, Session, Session] = (Session.Before, Session.During, Session.After)


class PatientStatus(Enum):
    Major = "major"
    Minor = "minor"
    Repeat = "repeat"


@dataclass(frozen=True, eq=False)
class SignalWindow:
    patient_id: str
    channel_id: int
    session: Session
    samples: npt.NDArray[np.float64]

    def __post_init__(self) -> None:
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInput(f"Window samples must be one-dimensional, got shape {samples.shape}")
        if len(samples) < 2:
            raise InvalidInput(f"Window needs at least 2 samples, got {len(samples)}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInput(f"Window {self.patient_id}/{self.channel_id}/{self.session.value} has non-finite samples")
        if self.channel_id < 1:
            raise InvalidInput(f"Channel ids start at 1, got {self.channel_id}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class FeatureVector:
    mean: float
    variance: float
    rms: float
    kurtosis: float
    min: float
    max: float
    degenerate: bool = False

    def dict(self) -> dict[str, Any]:
        return {
            "mean": self.mean,
            "variance": self.variance,
            "rms": self.rms,
            "kurtosis": self.kurtosis,
            "min": self.min,
            "max": self.max,
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class ChangeProfile:
    patient_id: str
    kappa: tuple[float, ...]
    channel_ids: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.channel_ids:
            object.__setattr__(self, "channel_ids", tuple(range(1, len(self.kappa) + 1)))
        if len(self.channel_ids) != len(self.kappa):
            raise InvalidInput(f"{len(self.kappa)} kappa values for {len(self.channel_ids)} channels")
        if not all(math.isfinite(k) and k >= 0 for k in self.kappa):
            raise InvalidInput(f"Change indicators must be finite and non-negative: {self.kappa}")

    @property
    def channel_count(self) -> int:
        return len(self.kappa)

    def exceeding(self, zeta: float) -> tuple[int, ...]:
        return tuple(c for c, k in zip(self.channel_ids, self.kappa) if k > zeta)


@dataclass(frozen=True)
class CohortBaseline:
    delta_bar: float
    channel_count: int
    patient_count: int


@dataclass(frozen=True)
class PatientAssessment:
    patient_id: str
    deltas: Mapping[int, tuple[float, float, float]]
    profile: ChangeProfile
    status: PatientStatus
    payload: SharePayload
    degenerate_windows: int = 0
    features: tuple[tuple[SignalWindow, FeatureVector], ...] = ()


def extract_features(window: SignalWindow) -> FeatureVector:
    x = window.samples
    lowest = float(x.min())
    highest = float(x.max())

    if lowest == highest:
        # Flat-lined channel: kurtosis is 0/0, reported as 0 and flagged.
        logger.warning(
            f"Degenerate window for patient {window.patient_id} channel {window.channel_id} "
            f"session {window.session.value}: constant value {lowest}"
        )
        return FeatureVector(lowest, 0.0, abs(lowest), 0.0, lowest, highest, degenerate=True)

    mean = float(np.clip(np.mean(x), lowest, highest))
    variance = float(np.var(x))
    rms = float(np.sqrt(np.mean(np.square(x))))
    kurtosis = float(stats.kurtosis(x, fisher=False, bias=True))
    return FeatureVector(mean, variance, rms, kurtosis, lowest, highest)


def delta(fv: FeatureVector) -> float:
    return fv.mean + fv.variance + fv.rms + fv.kurtosis + fv.min + fv.max


def cohort_baseline(deltas: Sequence[float] | npt.NDArray[np.float64], channel_count: int, patient_count: int) -> CohortBaseline:
    if channel_count < 1 or patient_count < 1:
        raise InvalidInput(f"Cohort needs C >= 1 and P >= 1, got C={channel_count} P={patient_count}")

    values = np.asarray(deltas, dtype=np.float64)
    expected = 3 * channel_count * patient_count
    if values.size != expected:
        raise InvalidInput(f"Cohort baseline expects 3*C*P = {expected} deltas, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise InvalidInput("Cohort deltas must be finite")

    delta_bar = float(np.mean(values))
    if delta_bar <= 0:
        raise BaselineDegenerate(f"Cohort mean delta is {delta_bar}; kappa needs a positive baseline")

    logger.info(f"Cohort baseline delta_bar={delta_bar} over C={channel_count} P={patient_count}")
    return CohortBaseline(delta_bar, channel_count, patient_count)


def change_indicator(delta_b: float, delta_d: float, delta_a: float, baseline: CohortBaseline) -> float:
    if not all(math.isfinite(v) for v in (delta_b, delta_d, delta_a, baseline.delta_bar)):
        raise InvalidInput(f"Non-finite change indicator input: {(delta_b, delta_d, delta_a, baseline.delta_bar)}")
    if baseline.delta_bar <= 0:
        raise BaselineDegenerate(f"Cohort mean delta is {baseline.delta_bar}")
    return (abs(delta_b - delta_d) + abs(delta_d - delta_a)) / baseline.delta_bar * 100.0


def classify(profile: ChangeProfile, zeta: float = DEFAULT_ZETA) -> PatientStatus:
    if not zeta > 0:
        raise InvalidInput(f"zeta must be positive, got {zeta}")

    # ||[K - zeta]+||_0: only strictly positive entries count
    exceeding = int(np.count_nonzero(np.asarray(profile.kappa) > zeta))
    if exceeding > MAJOR_CHANNEL_COUNT:
        return PatientStatus.Major
    if exceeding == 0:
        return PatientStatus.Minor
    return PatientStatus.Repeat


def share_decision(
    status: PatientStatus,
    features: Sequence[FeatureVector],
    raw: Sequence[SignalWindow],
    profile: ChangeProfile | None = None,
    zeta: float = DEFAULT_ZETA,
) -> SharePayload:
    patient_id = profile.patient_id if profile is not None else (raw[0].patient_id if raw else None)

    if status is PatientStatus.Major:
        return SharePayload(PayloadKind.EmergencyNotificationWithRaw, patient_id, features=features, raw=raw)
    if status is PatientStatus.Minor:
        return SharePayload(PayloadKind.FeaturesOnly, patient_id, features=features)

    if profile is None:
        raise InvalidInput("A repeat notice needs the change profile to name the offending channels")
    return SharePayload(PayloadKind.PhysicianRepeatNotice, patient_id, channel_ids=profile.exceeding(zeta))


def session_deltas(scored: Iterable[tuple[SignalWindow, FeatureVector]]) -> dict[tuple[int, Session], float]:
    """Mean delta per (channel, session) over all windows of that session."""
    grouped: dict[tuple[int, Session], list[float]] = defaultdict(list)
    for window, fv in scored:
        grouped[(window.channel_id, window.session)].append(delta(fv))
    return {key: math.fsum(values) / len(values) for key, values in grouped.items()}


def _score(windows: Iterable[SignalWindow]) -> list[tuple[SignalWindow, FeatureVector]]:
    return [(w, extract_features(w)) for w in windows]


def _session_table(
    patient_id: str, scored: Sequence[tuple[SignalWindow, FeatureVector]]
) -> dict[int, tuple[float, float, float]]:
    per_session = session_deltas(scored)
    table: dict[int, tuple[float, float, float]] = {}
    for channel in sorted({channel for channel, _ in per_session}):
        missing = [s.value for s in SESSIONS if (channel, s) not in per_session]
        if missing:
            raise IncompleteData(
                f"Patient {patient_id} channel {channel} has no {', '.join(missing)} session",
                patient_id=patient_id,
                channel_id=channel,
            )
        before, during, after = (per_session[(channel, s)] for s in SESSIONS)
        table[channel] = (before, during, after)
    return table


def _assess(
    patient_id: str,
    scored: Sequence[tuple[SignalWindow, FeatureVector]],
    table: Mapping[int, tuple[float, float, float]],
    baseline: CohortBaseline,
    zeta: float,
) -> PatientAssessment:
    channels = tuple(table)
    kappa = tuple(change_indicator(*table[c], baseline) for c in channels)
    profile = ChangeProfile(patient_id, kappa, channels)
    status = classify(profile, zeta)

    payload = share_decision(status, [fv for _, fv in scored], [w for w, _ in scored], profile, zeta)
    degenerate = sum(1 for _, fv in scored if fv.degenerate)

    logger.debug(f"Patient {patient_id}: {status.value}, exceeding channels {profile.exceeding(zeta)}")
    return PatientAssessment(patient_id, dict(table), profile, status, payload, degenerate, tuple(scored))


def monitor_patient(
    patient_id: str,
    windows: Sequence[SignalWindow],
    baseline: CohortBaseline,
    zeta: float = DEFAULT_ZETA,
) -> PatientAssessment:
    scored = _score(w for w in windows if w.patient_id == patient_id)
    if not scored:
        raise IncompleteData(f"No windows for patient {patient_id}", patient_id=patient_id)
    return _assess(patient_id, scored, _session_table(patient_id, scored), baseline, zeta)


def monitor_cohort(
    windows: Sequence[SignalWindow],
    zeta: float = DEFAULT_ZETA,
    baseline: CohortBaseline | None = None,
) -> tuple[CohortBaseline, list[PatientAssessment]]:
    """
    Assess every patient of a cohort.

    Without an explicit baseline, delta_bar is trained on the same cohort and frozen
    before any patient is classified.
    """
    by_patient: dict[str, list[SignalWindow]] = defaultdict(list)
    for window in windows:
        by_patient[window.patient_id].append(window)
    patients = sorted(by_patient)

    scored = {p: _score(by_patient[p]) for p in patients}
    tables = {p: _session_table(p, scored[p]) for p in patients}

    if baseline is None:
        channel_sets = {tuple(t) for t in tables.values()}
        if len(channel_sets) != 1:
            raise IncompleteData("Patients do not share the same channel set; cannot train the cohort baseline")
        channel_count = len(next(iter(channel_sets)))
        deltas = [d for table in tables.values() for triple in table.values() for d in triple]
        baseline = cohort_baseline(deltas, channel_count, len(patients))

    assessments = [_assess(p, scored[p], tables[p], baseline, zeta) for p in patients]
    return baseline, assessments
