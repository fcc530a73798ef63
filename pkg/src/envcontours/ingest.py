"""Sea-state ingestion, storm-peak declustering and covariate binning.

Input series are three-hourly (by default) records of significant wave height
``hs`` and peak period ``tp``, optionally tagged with a directional covariate
in degrees.  Declustering isolates near-independent storm peak events from
threshold exceedance runs.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import AllocationError, InputError, SchemaError

SECONDS_PER_YEAR = 365.25 * 24.0 * 3600.0
DEFAULT_CADENCE = 3.0 * 3600.0


@dataclass(frozen=True)
class SeaStateRecord:
    """One sea state: UTC epoch seconds, hs (m, >=0), tp (s, >0), covariate (deg)."""

    time: float
    hs: float
    tp: float
    covariate: float | None = None


@dataclass(frozen=True)
class StormPeak:
    """Declustered storm event summarised at its hs peak.

    ``n_sea_states`` counts the records between the first and last threshold
    exceedance of the cluster (inclusive), so it includes sub-threshold dips
    interior to the storm.
    """

    peak_hs: float
    assoc_tp: float
    n_sea_states: int
    start: float
    end: float
    covariate: float | None = None


@dataclass(frozen=True)
class CovariateBinning:
    """Partition of the covariate domain and the per-observation allocation."""

    n_bins: int
    edges: np.ndarray | None
    allocation: np.ndarray

    def counts(self) -> np.ndarray:
        return np.bincount(self.allocation, minlength=self.n_bins)


@dataclass
class LoadReport:
    """Row-level outcome of a CSV load."""

    n_loaded: int = 0
    n_rejected: int = 0
    reasons: list[str] = field(default_factory=list)

    def write(self, path) -> None:
        lines = [f"loaded {self.n_loaded} rows, rejected {self.n_rejected}"]
        lines += self.reasons
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_time(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        pass
    try:
        stamp = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    except ValueError as exc:
        raise ValueError(f"unparseable time {text!r}") from exc
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


def load_csv(path, schema: dict | None = None, reject_report_path=None):
    """Load sea states from CSV, rejecting malformed rows.

    Parameters
    ----------
    path : path-like
        CSV file with a header row.
    schema : dict, optional
        Column mapping with keys ``time``, ``hs``, ``tp`` and optionally
        ``covariate``; values are column names in the file.  Defaults to
        ``{"time": "time", "hs": "hs", "tp": "tp", "covariate": "dir"}`` with
        the covariate column optional.
    reject_report_path : path-like, optional
        If given, a sidecar text file listing rejected rows is written there.

    Returns
    -------
    (records, report)
        Records sorted ascending in time and a :class:`LoadReport`.
    """
    mapping = {"time": "time", "hs": "hs", "tp": "tp", "covariate": "dir"}
    if schema:
        mapping.update(schema)
    path = Path(path)
    if not path.exists():
        raise InputError(f"input file not found: {path}")

    report = LoadReport()
    records: list[SeaStateRecord] = []
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise InputError(f"empty input file: {path}")
        for key in ("time", "hs", "tp"):
            if mapping[key] not in reader.fieldnames:
                raise SchemaError(f"missing column {mapping[key]!r} for field {key!r}")
        has_cov = mapping.get("covariate") in reader.fieldnames

        for i, row in enumerate(reader, start=2):
            try:
                t = _parse_time(row[mapping["time"]])
                hs = float(row[mapping["hs"]])
                tp = float(row[mapping["tp"]])
                cov = float(row[mapping["covariate"]]) if has_cov else None
            except (ValueError, TypeError) as exc:
                report.n_rejected += 1
                report.reasons.append(f"line {i}: {exc}")
                continue
            if not (math.isfinite(t) and math.isfinite(hs) and math.isfinite(tp)):
                report.n_rejected += 1
                report.reasons.append(f"line {i}: non-finite value")
                continue
            if hs < 0.0 or tp <= 0.0:
                report.n_rejected += 1
                report.reasons.append(f"line {i}: hs/tp outside physical range")
                continue
            records.append(SeaStateRecord(t, hs, tp, cov))

    if not records:
        raise InputError(f"no valid rows in {path}")

    records.sort(key=lambda r: r.time)
    deduped: list[SeaStateRecord] = []
    for rec in records:
        if deduped and rec.time == deduped[-1].time:
            report.n_rejected += 1
            report.reasons.append(f"duplicate timestamp {rec.time}")
            continue
        deduped.append(rec)
    report.n_loaded = len(deduped)
    if reject_report_path is not None:
        report.write(reject_report_path)
    return deduped, report


def records_to_arrays(records) -> dict[str, np.ndarray]:
    """Column arrays (time, hs, tp, covariate) from a record collection."""
    return {
        "time": np.array([r.time for r in records], dtype=float),
        "hs": np.array([r.hs for r in records], dtype=float),
        "tp": np.array([r.tp for r in records], dtype=float),
        "covariate": np.array(
            [np.nan if r.covariate is None else r.covariate for r in records],
            dtype=float,
        ),
    }


def decluster(
    records,
    threshold_q: float = 0.95,
    min_gap: float = 24.0 * 3600.0,
    cadence: float | None = None,
    threshold_value: float | None = None,
):
    """Isolate storm peak events from threshold exceedance runs.

    Exceedances of the hs quantile at ``threshold_q`` are grouped into
    clusters; clusters separated by at least ``min_gap`` seconds of
    below-threshold duration (or by a missing-data gap longer than one
    sampling cadence) form distinct storms.  Each storm is summarised by the
    sea state at its hs maximum.

    Parameters
    ----------
    records : sequence of SeaStateRecord
    threshold_q : float
        Non-exceedance probability defining the declustering threshold.
    min_gap : float
        Minimum below-threshold separation between storms, seconds.
    cadence : float, optional
        Sampling cadence in seconds; inferred as the median spacing if None.
    threshold_value : float, optional
        Absolute hs threshold overriding ``threshold_q``.

    Returns
    -------
    (storms, rate)
        List of :class:`StormPeak` and the occurrence rate in storms/year.
    """
    if not 0.0 < threshold_q < 1.0:
        raise ValueError("threshold_q must lie in (0, 1)")
    if min_gap <= 0.0:
        raise ValueError("min_gap must be positive")
    cols = records_to_arrays(records)
    t, hs = cols["time"], cols["hs"]
    if cadence is None:
        cadence = float(np.median(np.diff(t))) if len(t) > 1 else DEFAULT_CADENCE

    u = float(np.quantile(hs, threshold_q)) if threshold_value is None else threshold_value
    exc = np.flatnonzero(hs > u)
    span_years = (t[-1] - t[0] + cadence) / SECONDS_PER_YEAR
    if exc.size == 0:
        warnings.warn("no exceedances above the declustering threshold", stacklevel=2)
        return [], 0.0

    # data gap after record i terminates any open cluster
    gap_after = np.diff(t) > 1.5 * cadence

    clusters: list[tuple[int, int]] = []
    start = prev = exc[0]
    for i in exc[1:]:
        broken = (t[i] - t[prev]) >= min_gap or bool(np.any(gap_after[prev:i]))
        if broken:
            clusters.append((start, prev))
            start = i
        prev = i
    clusters.append((start, prev))

    storms = []
    for ia, ib in clusters:
        window = slice(ia, ib + 1)
        k = ia + int(np.argmax(hs[window]))
        cov = cols["covariate"][k]
        storms.append(
            StormPeak(
                peak_hs=float(hs[k]),
                assoc_tp=float(cols["tp"][k]),
                n_sea_states=ib - ia + 1,
                start=float(t[ia]),
                end=float(t[ib]),
                covariate=None if np.isnan(cov) else float(cov),
            )
        )
    return storms, len(storms) / span_years


def peaks_to_arrays(storms) -> dict[str, np.ndarray]:
    """Column arrays (hs, tp, n_sea_states, covariate) from storm peaks."""
    return {
        "hs": np.array([s.peak_hs for s in storms], dtype=float),
        "tp": np.array([s.assoc_tp for s in storms], dtype=float),
        "n_sea_states": np.array([s.n_sea_states for s in storms], dtype=int),
        "covariate": np.array(
            [np.nan if s.covariate is None else s.covariate for s in storms],
            dtype=float,
        ),
    }


def allocate_bins(values=None, edges=None, n_obs: int | None = None, periodic: bool = True):
    """Assign covariate values to bins delimited by ``edges``.

    With no covariate (``values`` is None) every observation lands in a single
    bin; ``n_obs`` must then be given.  For a periodic (angular) domain,
    values are wrapped into ``[edges[0], edges[-1])`` first, so e.g. 360 maps
    to the first bin of an ``(0, 180, 360)`` binning.
    """
    if values is None:
        if n_obs is None:
            raise ValueError("n_obs required when no covariate is supplied")
        return CovariateBinning(1, None, np.zeros(n_obs, dtype=int))

    values = np.asarray(values, dtype=float)
    if edges is None:
        return CovariateBinning(1, None, np.zeros(values.size, dtype=int))
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("edges must be a strictly increasing 1-D sequence")
    if np.any(~np.isfinite(values)):
        raise AllocationError("covariate values must be finite")

    lo, hi = edges[0], edges[-1]
    v = values
    if periodic:
        v = lo + np.mod(values - lo, hi - lo)
    idx = np.searchsorted(edges, v, side="right") - 1
    # non-periodic: allow the closed top edge
    idx[v == hi] = edges.size - 2
    if np.any(idx < 0) or np.any(idx > edges.size - 2):
        bad = values[(idx < 0) | (idx > edges.size - 2)][0]
        raise AllocationError(f"covariate value {bad} outside binning domain")
    return CovariateBinning(edges.size - 1, edges, idx.astype(int))
