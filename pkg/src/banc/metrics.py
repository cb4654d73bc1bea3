"""Spatial and room-acoustic evaluation: ITD/ILD errors and BIR parameters.

Sign convention for ITD: positive means the left channel leads, i.e. the
value is ``t_right - t_left``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import next_fast_len

from .dsp import AudioBuffer, Bir

EDC_FLOOR_DB = -120.0
DRR_CAP_DB = 100.0
DIRECT_HALF_WINDOW = 0.0025
ONSET_DB = -20.0


@dataclass(frozen=True)
class SpatialErrors:
    e_itd: float
    e_ildl: float
    e_ildr: float


@dataclass(frozen=True)
class AcousticParams:
    """Seconds for times, dB for ratios; ``None`` marks an undefined value."""

    t60: float | None
    drr: float
    edt: float | None
    cte: float
    c50: float


def _energy(x: np.ndarray) -> float:
    return float(np.dot(x, x))


# ---------------------------------------------------------------------------
# interaural cues
# ---------------------------------------------------------------------------
def gcc_phat_itd(left, right, sample_rate: int, max_lag: int | None = None) -> float:
    """Interaural time difference in seconds via GCC-PHAT.

    ``max_lag`` (samples) bounds the peak search; ``None`` searches every lag.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape or left.ndim != 1:
        raise ValueError(f"channels must be equal-length vectors, got {left.shape} / {right.shape}")
    if _energy(left) == 0.0 or _energy(right) == 0.0:
        raise ValueError("gcc_phat_itd: zero-energy channel")
    n = len(left)
    nfft = next_fast_len(2 * n, real=True)
    cross = np.fft.rfft(right, nfft) * np.conj(np.fft.rfft(left, nfft))
    mag = np.abs(cross)
    cross = cross / np.maximum(mag, 1e-12 * mag.max())
    cc = np.fft.irfft(cross, nfft)
    max_lag = n - 1 if max_lag is None else min(int(max_lag), n - 1)
    # lags -max_lag..max_lag
    window = np.concatenate([cc[nfft - max_lag :], cc[: max_lag + 1]])
    k = int(np.argmax(window))
    shift = 0.0
    if 0 < k < len(window) - 1:
        a, b, c = window[k - 1], window[k], window[k + 1]
        denom = a - 2.0 * b + c
        if denom != 0.0:
            shift = 0.5 * (a - c) / denom
    return (k - max_lag + shift) / sample_rate


def _require_binaural(buf: AudioBuffer, what: str):
    if buf.channels != 2:
        raise ValueError(f"{what} must have 2 channels, got {buf.channels}")


def itd_error(ref: AudioBuffer, rec: AudioBuffer, max_lag: int | None = None) -> float:
    _require_binaural(ref, "ref")
    _require_binaural(rec, "rec")
    a = gcc_phat_itd(ref.samples[0], ref.samples[1], ref.sample_rate, max_lag)
    b = gcc_phat_itd(rec.samples[0], rec.samples[1], rec.sample_rate, max_lag)
    return abs(a - b)


def ild_errors(ref: AudioBuffer, rec: AudioBuffer) -> tuple[float, float]:
    """``|20 log10(||rec_ch||^2 / ||ref_ch||^2)|`` for the left and right channel."""
    _require_binaural(ref, "ref")
    _require_binaural(rec, "rec")
    out = []
    for ch in (0, 1):
        e_ref = _energy(ref.samples[ch])
        if e_ref == 0.0:
            raise ValueError(f"ild_errors: zero reference energy in channel {ch}")
        e_rec = _energy(rec.samples[ch])
        out.append(math.inf if e_rec == 0.0 else abs(20.0 * math.log10(e_rec / e_ref)))
    return out[0], out[1]


def spatial_errors(ref: AudioBuffer, rec: AudioBuffer, max_lag: int | None = None) -> SpatialErrors:
    return SpatialErrors(itd_error(ref, rec, max_lag), *ild_errors(ref, rec))


# ---------------------------------------------------------------------------
# room acoustics
# ---------------------------------------------------------------------------
def schroeder_edc(h, floor_db: float = EDC_FLOOR_DB) -> np.ndarray:
    """Energy decay curve in dB, normalized to 0 dB at the first sample."""
    h = np.asarray(h, dtype=np.float64)
    peak = np.max(np.abs(h)) if h.size else 0.0
    if peak == 0.0:
        raise ValueError("schroeder_edc: zero-energy impulse response")
    # power-of-two rescale is exact and keeps squares clear of underflow and overflow
    h = np.ldexp(h, -int(np.frexp(peak)[1]))
    sq = h * h
    remaining = np.cumsum(sq[::-1])[::-1]
    ratio = remaining / remaining[0]
    with np.errstate(divide="ignore"):
        edc = 10.0 * np.log10(ratio)
    return np.maximum(edc, floor_db)


def _decay_time(edc: np.ndarray, sample_rate: int, upper: float, lower: float) -> float | None:
    """Least-squares slope of the EDC between ``upper`` and ``lower`` dB, as time to fall 60 dB."""
    if edc.min() > lower:
        return None
    idx = np.flatnonzero((edc <= upper) & (edc >= lower))
    if idx.size < 2:
        return None
    t = idx / sample_rate
    slope = np.polyfit(t, edc[idx], 1)[0]
    if slope >= 0.0:
        return None
    return -60.0 / slope


def _onset(h: np.ndarray) -> int:
    sq = h * h
    return int(np.argmax(sq >= sq.max() * 10.0 ** (ONSET_DB / 10.0)))


def _ratio_db(num: float, den: float) -> float:
    if den == 0.0:
        return DRR_CAP_DB
    if num == 0.0:
        return -DRR_CAP_DB
    return float(np.clip(10.0 * math.log10(num / den), -DRR_CAP_DB, DRR_CAP_DB))


def channel_params(h, sample_rate: int) -> AcousticParams:
    h = np.asarray(h, dtype=np.float64)
    sq = h * h
    total = float(sq.sum())
    if total == 0.0:
        raise ValueError("acoustic parameters undefined for a zero-energy channel")
    # decay fits start at the ISO-style onset (first sample within 20 dB of the peak)
    edc = schroeder_edc(h[_onset(h) :])
    t60 = _decay_time(edc, sample_rate, -5.0, -25.0)
    edt = _decay_time(edc, sample_rate, 0.0, -10.0)

    peak = int(np.argmax(np.abs(h)))
    half = int(round(DIRECT_HALF_WINDOW * sample_rate))
    lo, hi = max(0, peak - half), peak + half + 1
    direct = float(sq[lo:hi].sum())
    late = float(sq[:lo].sum() + sq[hi:].sum())
    drr = _ratio_db(direct, late)

    weights = sq / total
    cte = float(np.dot(np.arange(len(h)), weights)) / sample_rate

    split = _onset(h) + int(round(0.05 * sample_rate))
    c50 = _ratio_db(float(sq[:split].sum()), float(sq[split:].sum()))
    return AcousticParams(t60=t60, drr=drr, edt=edt, cte=cte, c50=c50)


def acoustic_params(bir: Bir) -> tuple[AcousticParams, AcousticParams]:
    """Per-channel (left, right) parameters of a binaural impulse response."""
    return channel_params(bir.left, bir.sample_rate), channel_params(bir.right, bir.sample_rate)


# ---------------------------------------------------------------------------
# dataset report
# ---------------------------------------------------------------------------
ACOUSTIC_FIELDS = (("t60", "t60_ms", 1e3), ("drr", "drr_db", 1.0), ("edt", "edt_ms", 1e3), ("cte", "cte_ms", 1e3))
COLUMNS = ["item", "e_itd_ms", "e_ildl_db", "e_ildr_db"] + [
    f"{col}_{side}" for side in ("l", "r") for _, col, _ in ACOUSTIC_FIELDS
]


@dataclass
class EvalItem:
    item: str
    ref: AudioBuffer
    rec: AudioBuffer
    bir_ref: list[Bir] = field(default_factory=list)
    bir_rec: list[Bir] = field(default_factory=list)


@dataclass
class EvalReport:
    rows: list[dict]
    mean: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows + [self.mean]:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        def clean(row):
            return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}

        return json.dumps({"columns": COLUMNS, "items": [clean(r) for r in self.rows], "mean": clean(self.mean)},
                          indent=2)


def _param_error(a, b) -> float:
    if a is None or b is None:
        return math.nan
    return abs(a - b)


def _item_row(item: EvalItem, max_lag: int | None) -> dict:
    errs = spatial_errors(item.ref, item.rec, max_lag)
    row = {"item": item.item, "e_itd_ms": errs.e_itd * 1e3, "e_ildl_db": errs.e_ildl, "e_ildr_db": errs.e_ildr}
    if len(item.bir_ref) != len(item.bir_rec):
        raise ValueError(f"{item.item}: {len(item.bir_ref)} reference BIRs vs {len(item.bir_rec)} reconstructed")
    for side_idx, side in enumerate(("l", "r")):
        for attr, col, scale in ACOUSTIC_FIELDS:
            vals = []
            for br, bh in zip(item.bir_ref, item.bir_rec):
                pr, ph = acoustic_params(br)[side_idx], acoustic_params(bh)[side_idx]
                vals.append(_param_error(getattr(pr, attr), getattr(ph, attr)) * scale)
            # averaged over speakers; NaN when undefined or no BIRs given
            row[f"{col}_{side}"] = float(np.mean(vals)) if vals else math.nan
    return row


def eval_report(items, max_lag: int | None = None) -> EvalReport:
    """Per-item and mean absolute errors; undefined entries are NaN and skipped in the mean."""
    items = list(items)
    if not items:
        raise ValueError("eval_report: empty dataset")
    rows = [_item_row(it, max_lag) for it in items]
    mean = {"item": "mean"}
    for col in COLUMNS[1:]:
        vals = np.array([r[col] for r in rows], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        mean[col] = float(vals.mean()) if vals.size else math.nan
    return EvalReport(rows, mean)

