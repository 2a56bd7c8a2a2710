"""
Signal CSV ingestion and synthetic cohorts.

CSV format, one sample per row, header required:

    patient,channel,session,sample_index,value

(patient, channel, session, sample_index) is unique and sample_index runs 0..n-1 in
each (patient, channel, session) group. Row numbers in errors are file lines, the
header being row 1.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import InvalidInput, SignalParseError
from .helpers import StreamPurpose, spawn_generator
from .signal_monitor import DEFAULT_WINDOW_LENGTH, DEFAULT_ZETA, SESSIONS, Session, SignalWindow

COLUMNS = ["patient", "channel", "session", "sample_index", "value"]
KEY = ["patient", "channel", "session", "sample_index"]

# Gaussian kurtosis; delta of a quiet channel is about 4*level + noise^2 + 3
GAUSSIAN_KURTOSIS = 3.0

logger = logging.getLogger(__name__)


@dataclass
class SignalSet:
    windows: dict[tuple[str, int, Session], list[SignalWindow]] = field(default_factory=dict)
    dropped_samples: int = 0

    def groups(self) -> list[tuple[tuple[str, int, Session], list[SignalWindow]]]:
        """Groups ordered by patient, channel, then before/during/after."""
        return [(key, self.windows[key]) for key in sorted(self.windows, key=_group_order)]

    def all_windows(self) -> list[SignalWindow]:
        return [w for _, windows in self.groups() for w in windows]

    @property
    def patients(self) -> list[str]:
        return sorted({patient for patient, _, _ in self.windows})


def _group_order(key: tuple[str, int, Session]) -> tuple[str, int, int]:
    patient, channel, session = key
    return patient, channel, SESSIONS.index(session)


def _first_bad(mask: "pd.Series[bool] | np.ndarray") -> int | None:
    bad = np.flatnonzero(np.asarray(mask, dtype=bool))
    return int(bad[0]) if bad.size else None


def _row(index: int) -> int:
    return index + 2


def _parse(frame: pd.DataFrame) -> pd.DataFrame:
    parsed = pd.DataFrame({"patient": frame["patient"].str.strip()})

    bad = _first_bad(parsed["patient"] == "")
    if bad is not None:
        raise SignalParseError(f"Row {_row(bad)}: empty patient id", row=_row(bad))

    for column in ("channel", "sample_index"):
        values = pd.to_numeric(frame[column], errors="coerce")
        lowest = 1 if column == "channel" else 0
        bad = _first_bad(values.isna() | (values % 1 != 0) | (values < lowest))
        if bad is not None:
            raise SignalParseError(
                f"Row {_row(bad)}: {column} must be an integer >= {lowest}, got {frame[column].iloc[bad]!r}",
                row=_row(bad),
            )
        parsed[column] = values.astype(np.int64)

    sessions = frame["session"].str.strip().str.lower()
    bad = _first_bad(~sessions.isin([s.value for s in SESSIONS]))
    if bad is not None:
        raise SignalParseError(
            f"Row {_row(bad)}: session must be before, during or after, got {frame['session'].iloc[bad]!r}",
            row=_row(bad),
        )
    parsed["session"] = sessions

    values = pd.to_numeric(frame["value"], errors="coerce")
    bad = _first_bad(~np.isfinite(values.to_numpy(dtype=np.float64, na_value=np.nan)))
    if bad is not None:
        raise SignalParseError(f"Row {_row(bad)}: value is not a finite number: {frame['value'].iloc[bad]!r}", row=_row(bad))
    parsed["value"] = values.astype(np.float64)
    return parsed


def _check_keys(parsed: pd.DataFrame) -> None:
    bad = _first_bad(parsed.duplicated(subset=KEY))
    if bad is not None:
        key = tuple(parsed[KEY].iloc[bad])
        raise SignalParseError(f"Row {_row(bad)}: duplicate sample {key}", row=_row(bad))

    ordered = parsed.sort_values(KEY, kind="stable")
    expected = ordered.groupby(KEY[:3], sort=False).cumcount()
    gaps = ordered.index[(ordered["sample_index"] != expected).to_numpy()]
    if len(gaps):
        bad = int(gaps[0])
        raise SignalParseError(
            f"Row {_row(bad)}: sample_index {parsed['sample_index'].iloc[bad]} breaks the 0..n-1 sequence "
            f"of patient {parsed['patient'].iloc[bad]} channel {parsed['channel'].iloc[bad]} "
            f"session {parsed['session'].iloc[bad]}",
            row=_row(bad),
        )


def signal_windows(frame: pd.DataFrame, window_length: int = DEFAULT_WINDOW_LENGTH) -> SignalSet:
    """Cut every (patient, channel, session) recording into consecutive windows, dropping the tail."""
    if window_length < 2:
        raise InvalidInput(f"Window length must be >= 2, got {window_length}")

    ordered = frame.sort_values(KEY, kind="stable")
    result = SignalSet()
    for (patient, channel, session), group in ordered.groupby(KEY[:3], sort=True):
        samples = group["value"].to_numpy(dtype=np.float64)
        count = len(samples) // window_length
        result.dropped_samples += len(samples) - count * window_length
        result.windows[(str(patient), int(channel), Session(session))] = [
            SignalWindow(str(patient), int(channel), Session(session), samples[i * window_length : (i + 1) * window_length])
            for i in range(count)
        ]

    if result.dropped_samples:
        logger.warning(f"Dropped {result.dropped_samples} trailing samples that do not fill a {window_length}-sample window")
    return result


def ingest_signals(path: str | Path, window_length: int = DEFAULT_WINDOW_LENGTH) -> SignalSet:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise SignalParseError(f"{path}: {e}") from e

    header = [c.strip() for c in frame.columns]
    if header != COLUMNS:
        raise SignalParseError(f"{path}: header must be {','.join(COLUMNS)}, got {','.join(header)}", row=1)
    frame.columns = pd.Index(header)

    parsed = _parse(frame)
    _check_keys(parsed)
    signals = signal_windows(parsed, window_length)
    logger.info(
        f"Ingested {len(parsed)} samples from {path}: {len(signals.patients)} patients, "
        f"{sum(len(w) for w in signals.windows.values())} windows"
    )
    return signals


def quiet_delta(level: float, noise: float) -> float:
    """Approximate delta of a window of Gaussian noise around a DC level."""
    return 4.0 * level + noise**2 + GAUSSIAN_KURTOSIS


def injection_offset(
    zeta: float,
    level: float,
    noise: float,
    channels: int,
    injected: int,
    margin: float = 2.0,
) -> float:
    """
    Offset that lifts kappa on an injected channel to about margin*zeta.

    Shifting During and After by d moves mean, rms, min and max by d each, so an
    injected channel changes delta by 4d and lifts the cohort mean by 8dk/(3C).
    """
    base = quiet_delta(level, noise)
    denominator = 400.0 - 8.0 * margin * zeta * injected / (3.0 * channels)
    if denominator <= 0:
        raise InvalidInput(f"No offset reaches kappa={margin * zeta}% with {injected} of {channels} channels injected")
    return margin * zeta * base / denominator


def _check_cohort(patients: int, channels: int, length: int, injected: int) -> None:
    if patients < 1 or channels < 1:
        raise InvalidInput(f"Cohort needs P >= 1 and C >= 1, got P={patients} C={channels}")
    if length < 2:
        raise InvalidInput(f"Recordings need at least 2 samples, got {length}")
    if not 0 <= injected <= channels:
        raise InvalidInput(f"Cannot inject {injected} of {channels} channels")


def patient_ids(patients: int) -> list[str]:
    width = len(str(patients))
    return [f"P{p:0{width}d}" for p in range(1, patients + 1)]


def synthetic_windows(
    patients: int,
    channels: int,
    length: int = DEFAULT_WINDOW_LENGTH,
    injected: int = 0,
    offset: float | None = None,
    seed: int = 0,
    level: float = 100.0,
    noise: float = 1.0,
    zeta: float = DEFAULT_ZETA,
) -> tuple[list[SignalWindow], dict[str, tuple[int, ...]]]:
    """One window per (patient, channel, session) and the injected channels of each patient."""
    _check_cohort(patients, channels, length, injected)
    shift = injection_offset(zeta, level, noise, channels, injected) if offset is None else offset

    windows: list[SignalWindow] = []
    changed: dict[str, tuple[int, ...]] = {}
    for p, patient in enumerate(patient_ids(patients), start=1):
        chooser = spawn_generator(seed, p, StreamPurpose.Signal)
        picked = chooser.choice(channels, size=injected, replace=False) + 1 if injected else np.array([], dtype=np.int64)
        changed[patient] = tuple(sorted(int(c) for c in picked))

        for channel in range(1, channels + 1):
            for s, session in enumerate(SESSIONS):
                generator = spawn_generator(seed, p, channel, s, StreamPurpose.Signal)
                samples = level + noise * generator.standard_normal(length)
                if channel in changed[patient] and session is not Session.Before:
                    samples += shift
                windows.append(SignalWindow(patient, channel, session, samples))

    logger.info(f"Synthetic cohort: P={patients} C={channels} length={length} k={injected} offset={shift}")
    return windows, changed


def generate_synthetic_cohort(
    patients: int,
    channels: int,
    length: int = DEFAULT_WINDOW_LENGTH,
    injected: int = 0,
    offset: float | None = None,
    seed: int = 0,
    level: float = 100.0,
    noise: float = 1.0,
    zeta: float = DEFAULT_ZETA,
) -> pd.DataFrame:
    """Signal records in the ingestion CSV layout."""
    windows, _ = synthetic_windows(patients, channels, length, injected, offset, seed, level, noise, zeta)
    columns: dict[str, list[np.ndarray]] = defaultdict(list)
    for w in windows:
        columns["patient"].append(np.full(len(w), w.patient_id, dtype=object))
        columns["channel"].append(np.full(len(w), w.channel_id, dtype=np.int64))
        columns["session"].append(np.full(len(w), w.session.value, dtype=object))
        columns["sample_index"].append(np.arange(len(w), dtype=np.int64))
        columns["value"].append(w.samples)
    return pd.DataFrame({c: np.concatenate(columns[c]) for c in COLUMNS})


def write_csv(frame: pd.DataFrame, path: str | Path) -> None:
    frame.to_csv(path, index=False, lineterminator="\n")
