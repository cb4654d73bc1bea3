"""Synthetic binaural dataset factory.

Items are a pure function of ``(profile, seed, item index, clean listing)``:
each item draws its own generator from ``default_rng([seed, index])``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import AudioBuffer, Bir

logger = logging.getLogger(__name__)

CLEAN_KINDS = ("tone_complex", "filtered_noise", "chirp")
SPLITS = ("train", "valid", "test")
BAND_EDGE = 0.45
PEAK = 0.9
TAIL_SIGMA = 0.05  # at 48 kHz; scaled by sqrt(48000 / fs) to keep tail energy rate-independent
MAX_ITD_48K = 40


@dataclass(frozen=True)
class Profile:
    name: str
    sample_rate: int
    counts: tuple[int, int, int]
    chunk_seconds: float = 2.0
    bir_seconds: float = 1.0

    @property
    def chunk_samples(self) -> int:
        return int(round(self.chunk_seconds * self.sample_rate))

    @property
    def bir_samples(self) -> int:
        return int(round(self.bir_seconds * self.sample_rate))


PROFILES = {
    "desk": Profile("desk", 6000, (80, 10, 10)),
    "reference": Profile("reference", 48000, (33975, 750, 752)),
}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


# ---------------------------------------------------------------------------
# BIRs
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class BirSpec:
    """Parametric BIR description.

    ``level_db`` is the left-minus-right direct-path level; reflections are
    ``(time_s, gain_left, gain_right)`` relative to each channel's direct path.
    """

    t60: float
    delay_left: int
    delay_right: int
    level_db: float = 0.0
    reflections: tuple[tuple[float, float, float], ...] = ()
    seed: int = 0
    sample_rate: int = 48000
    length: int = 48000

    def __post_init__(self):
        object.__setattr__(self, "reflections", tuple(tuple(float(v) for v in r) for r in self.reflections))
        self.validate()

    @property
    def max_itd(self) -> int:
        return int(round(MAX_ITD_48K * self.sample_rate / 48000))

    def validate(self):
        if not 0.1 <= self.t60 <= 1.0:
            raise ValueError(f"t60 {self.t60} outside [0.1, 1.0] s")
        if self.delay_left < 0 or self.delay_right < 0:
            raise ValueError("delays must be non-negative")
        if max(self.delay_left, self.delay_right) >= self.length:
            raise ValueError("direct delay beyond BIR length")
        if abs(self.delay_right - self.delay_left) > self.max_itd:
            raise ValueError(f"ITD {self.delay_right - self.delay_left} samples exceeds +-{self.max_itd}")
        if abs(self.level_db) > 6.0:
            raise ValueError(f"level offset {self.level_db} dB outside [-6, 6]")
        for t, _, _ in self.reflections:
            if not 0.005 <= t <= 0.05:
                raise ValueError(f"reflection time {t} s outside [5, 50] ms")

    @property
    def arrival(self) -> int:
        return min(self.delay_left, self.delay_right)

    def to_json(self) -> dict:
        d = asdict(self)
        d["reflections"] = [list(r) for r in self.reflections]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "BirSpec":
        return cls(**{**d, "reflections": tuple(tuple(r) for r in d["reflections"])})


def random_bir_spec(rng: np.random.Generator, sample_rate: int, length: int, base_delay: int | None = None) -> BirSpec:
    max_itd = int(round(MAX_ITD_48K * sample_rate / 48000))
    itd = int(rng.integers(-max_itd, max_itd + 1))
    if base_delay is None:
        base_delay = int(rng.integers(0, max(1, sample_rate // 500)))
    n_refl = int(rng.integers(3, 9))
    refl = tuple(
        (float(rng.uniform(0.005, 0.05)), float(rng.uniform(0.1, 0.5) * rng.choice([-1, 1])),
         float(rng.uniform(0.1, 0.5) * rng.choice([-1, 1])))
        for _ in range(n_refl)
    )
    return BirSpec(
        t60=float(rng.uniform(0.2, 0.9)),
        delay_left=base_delay + max(0, -itd),
        delay_right=base_delay + max(0, itd),
        level_db=float(rng.uniform(-6.0, 6.0)),
        reflections=refl,
        seed=int(rng.integers(0, 2**31)),
        sample_rate=sample_rate,
        length=length,
    )


def synth_bir(spec: BirSpec) -> Bir:
    """Direct impulse, sparse early reflections and an exponentially decaying Gaussian tail."""
    spec.validate()
    fs, n = spec.sample_rate, spec.length
    rng = np.random.default_rng(spec.seed)
    sigma = TAIL_SIGMA * np.sqrt(48000.0 / fs)
    gains = (10.0 ** (spec.level_db / 40.0), 10.0 ** (-spec.level_db / 40.0))
    channels = []
    for ch, (delay, gain) in enumerate(zip((spec.delay_left, spec.delay_right), gains)):
        h = np.zeros(n)
        h[delay] = gain
        for t, gl, gr in spec.reflections:
            pos = delay + int(round(t * fs))
            if pos < n:
                h[pos] += gain * (gl, gr)[ch]
        # tail starts one sample after the direct path so the direct level is exact
        t = np.arange(1, n - delay) / fs
        h[delay + 1 :] += gain * sigma * rng.standard_normal(n - delay - 1) * np.exp(-6.9078 * t / spec.t60)
        channels.append(h)
    data = np.stack(channels)
    data /= np.max(np.abs(data))
    return Bir(data[0], data[1], fs)


# ---------------------------------------------------------------------------
# clean surrogates
# ---------------------------------------------------------------------------
def _bandlimit(x: np.ndarray, sample_rate: int, low_hz: float = 0.0) -> np.ndarray:
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / sample_rate)
    spec[(freqs >= BAND_EDGE * sample_rate) | (freqs < low_hz)] = 0.0
    return np.fft.irfft(spec, len(x))


def _syllables(rng, n: int, sample_rate: int) -> np.ndarray:
    """Slow amplitude modulation around 4 Hz, loosely speech-like."""
    t = np.arange(n) / sample_rate
    rate = rng.uniform(3.0, 5.0)
    return 0.6 + 0.4 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))


def synth_clean(kind: str, seconds: float, seed: int, sample_rate: int = 48000,
                f_start: float | None = None, f_end: float | None = None) -> AudioBuffer:
    """Mono surrogate for clean speech, band-limited below 0.45 fs with peak 0.9."""
    if seconds <= 0:
        raise ValueError(f"duration must be positive, got {seconds}")
    if kind not in CLEAN_KINDS:
        raise ValueError(f"unknown clean kind {kind!r}; choose from {CLEAN_KINDS}")
    n = int(round(seconds * sample_rate))
    if n < 2:
        raise ValueError(f"duration {seconds} s yields fewer than 2 samples")
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sample_rate
    nyq_band = BAND_EDGE * sample_rate
    if kind == "tone_complex":
        f0 = rng.uniform(100.0, 300.0)
        x = np.zeros(n)
        for k in range(1, 21):
            if k * f0 >= nyq_band:
                break
            x += np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k
        x *= _syllables(rng, n, sample_rate)
    elif kind == "filtered_noise":
        x = _bandlimit(rng.standard_normal(n), sample_rate, low_hz=50.0)
        x *= _syllables(rng, n, sample_rate)
    else:
        from scipy.signal import chirp

        f0 = 100.0 if f_start is None else f_start
        f1 = 0.4 * sample_rate if f_end is None else f_end
        if not (0 < f0 < nyq_band and 0 < f1 < nyq_band):
            raise ValueError(f"chirp endpoints must lie in (0, {nyq_band}) Hz")
        x = chirp(t, f0=f0, t1=t[-1], f1=f1, method="linear", phi=-90)
    x = _bandlimit(x, sample_rate)
    return AudioBuffer(PEAK * x / np.max(np.abs(x)), sample_rate)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------
@dataclass
class DatasetItem:
    item_id: str
    split: str
    mix: AudioBuffer
    cleans: list[AudioBuffer]
    birs: list[Bir]
    specs: list[BirSpec] = field(default_factory=list)
    sources: list[dict] = field(default_factory=list)

    @property
    def speakers(self) -> int:
        return len(self.cleans)


@dataclass
class DatasetManifest:
    profile: str
    speakers: int
    seed: int
    sample_rate: int
    items: list[dict]

    @property
    def counts(self) -> dict[str, int]:
        return {s: sum(1 for it in self.items if it["split"] == s) for s in SPLITS}


def split_counts(profile: Profile, n_items: int | None = None) -> tuple[int, int, int]:
    """Per-split counts; ``n_items`` rescales the profile proportions by largest remainder."""
    if n_items is None:
        return profile.counts
    total = sum(profile.counts)
    raw = [c * n_items / total for c in profile.counts]
    out = [int(np.floor(r)) for r in raw]
    for i in np.argsort([-(r - f) for r, f in zip(raw, out)], kind="stable")[: n_items - sum(out)]:
        out[i] += 1
    return tuple(out)


def list_clean_source(path: str | os.PathLike) -> list[Path]:
    files = sorted(p for p in Path(path).rglob("*.wav"))
    if not files:
        raise ValueError(f"clean source {path} contains no .wav files")
    return files


def _load_segment(path: Path, rng, n: int, sample_rate: int) -> AudioBuffer:
    buf = dsp.wav_read(path)
    x = buf.samples.mean(axis=0)
    if buf.sample_rate != sample_rate:
        from math import gcd

        from scipy.signal import resample_poly

        g = gcd(sample_rate, buf.sample_rate)
        x = resample_poly(x, sample_rate // g, buf.sample_rate // g)
    if len(x) < n:
        x = np.pad(x, (0, n - len(x)))
    start = int(rng.integers(0, len(x) - n + 1))
    x = x[start : start + n]
    peak = np.max(np.abs(x))
    if peak == 0.0:
        raise ValueError(f"{path}: silent segment")
    return AudioBuffer(PEAK * x / peak, sample_rate)


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def make_item(profile: Profile, index: int, seed: int, speakers: int = 1, split: str = "train",
              clean_files: list[Path] | None = None) -> DatasetItem:
    """Generate one item; components are rounded to float32 so stored files re-render exactly."""
    if speakers not in (1, 2):
        raise ValueError(f"speakers must be 1 or 2, got {speakers}")
    rng = np.random.default_rng([seed, index])
    n, fs = profile.chunk_samples, profile.sample_rate
    cleans, sources = [], []
    for _ in range(speakers):
        if clean_files:
            path = clean_files[int(rng.integers(0, len(clean_files)))]
            cleans.append(_load_segment(path, rng, n, fs))
            sources.append({"path": str(path)})
        else:
            kind = str(rng.choice(CLEAN_KINDS))
            cseed = int(rng.integers(0, 2**31))
            cleans.append(synth_clean(kind, profile.chunk_seconds, cseed, fs))
            sources.append({"kind": kind, "seed": cseed})
    specs = [random_bir_spec(rng, fs, profile.bir_samples) for _ in range(speakers)]
    if speakers == 2:
        # speaker 1 is the earlier direct arrival; ties are broken by delaying speaker 2
        if specs[1].arrival < specs[0].arrival:
            specs.reverse()
        if specs[1].arrival == specs[0].arrival:
            s = specs[1]
            specs[1] = replace(s, delay_left=s.delay_left + 1, delay_right=s.delay_right + 1)
        rms = [np.sqrt(np.mean(c.samples**2)) for c in cleans]
        cleans[1] = AudioBuffer(cleans[1].samples * (rms[0] / rms[1]), fs)
    birs = [Bir.from_array(_f32(synth_bir(s).data), fs) for s in specs]
    mix = dsp.mix_overlapped(list(zip(cleans, birs)))
    gain = min(1.0, PEAK / np.max(np.abs(mix.samples)))
    cleans = [AudioBuffer(_f32(c.samples * gain), fs) for c in cleans]
    mix = dsp.mix_overlapped(list(zip(cleans, birs)))
    return DatasetItem(f"{index:06d}", split, mix, cleans, birs, specs, sources)


def _assign_splits(profile: Profile, n_items: int | None, seed: int) -> list[str]:
    counts = split_counts(profile, n_items)
    tags = np.array([s for s, c in zip(SPLITS, counts) for _ in range(c)])
    return list(np.random.default_rng([seed, 2**31]).permutation(tags))


def item_files(speakers: int) -> list[str]:
    files = ["mix.wav"]
    for i in range(1, speakers + 1):
        files += [f"clean_{i}.wav", f"bir_{i}.wav"]
    return files


def build_dataset(profile: str | Profile, out_dir: str | os.PathLike, speakers: int = 1, seed: int = 0,
                  clean_source: str | os.PathLike | None = None, n_items: int | None = None) -> DatasetManifest:
    """Write ``out/{split}/{item_id}/*.wav`` plus ``manifest.jsonl`` and ``dataset.json``."""
    profile = get_profile(profile) if isinstance(profile, str) else profile
    clean_files = list_clean_source(clean_source) if clean_source is not None else None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = _assign_splits(profile, n_items, seed)
    records = []
    for index, split in enumerate(splits):
        item = make_item(profile, index, seed, speakers, split, clean_files)
        d = out / split / item.item_id
        d.mkdir(parents=True, exist_ok=True)
        dsp.wav_write(d / "mix.wav", item.mix)
        for i, (c, b) in enumerate(zip(item.cleans, item.birs), start=1):
            dsp.wav_write(d / f"clean_{i}.wav", c)
            dsp.wav_write(d / f"bir_{i}.wav", b.to_buffer())
        records.append({
            "id": item.item_id,
            "split": split,
            "dir": f"{split}/{item.item_id}",
            "files": item_files(speakers),
            "bir_specs": [s.to_json() for s in item.specs],
            "sources": item.sources,
        })
    manifest = DatasetManifest(profile.name, speakers, seed, profile.sample_rate, records)
    with open(out / "manifest.jsonl", "w") as fh:
        for r in sorted(records, key=lambda r: r["id"]):
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    meta = {"profile": profile.name, "speakers": speakers, "seed": seed, "sample_rate": profile.sample_rate,
            "chunk_samples": profile.chunk_samples, "bir_samples": profile.bir_samples, "counts": manifest.counts}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %d items to %s", len(records), out)
    return manifest


def load_manifest(out_dir: str | os.PathLike) -> DatasetManifest:
    out = Path(out_dir)
    meta = json.loads((out / "dataset.json").read_text())
    with open(out / "manifest.jsonl") as fh:
        items = [json.loads(line) for line in fh if line.strip()]
    return DatasetManifest(meta["profile"], meta["speakers"], meta["seed"], meta["sample_rate"], items)


def load_dataset(out_dir: str | os.PathLike, split: str | None = None) -> list[DatasetItem]:
    out = Path(out_dir)
    manifest = load_manifest(out)
    items = []
    for r in manifest.items:
        if split is not None and r["split"] != split:
            continue
        d = out / r["dir"]
        cleans = [dsp.wav_read(d / f"clean_{i}.wav") for i in range(1, manifest.speakers + 1)]
        birs = [Bir.from_array(dsp.wav_read(d / f"bir_{i}.wav").samples, manifest.sample_rate)
                for i in range(1, manifest.speakers + 1)]
        specs = [BirSpec.from_json(s) for s in r["bir_specs"]]
        items.append(DatasetItem(r["id"], r["split"], dsp.wav_read(d / "mix.wav"), cleans, birs, specs, r["sources"]))
    if not items:
        raise ValueError(f"no items found in {out}" + (f" for split {split!r}" if split else ""))
    return items


def make_dataset(profile: str | Profile, n_items: int, speakers: int = 1, seed: int = 0) -> list[DatasetItem]:
    """In-memory items, all tagged ``train``."""
    profile = get_profile(profile) if isinstance(profile, str) else profile
    if n_items <= 0:
        raise ValueError("n_items must be positive")
    return [make_item(profile, i, seed, speakers) for i in range(n_items)]


def stack_items(items: list[DatasetItem]) -> dict[str, np.ndarray]:
    """Arrays ``mix [N,2,L]``, ``clean [N,S,L]``, ``bir [N,S,2,Lb]``."""
    if not items:
        raise ValueError("dataset is empty")
    return {
        "mix": np.stack([it.mix.samples for it in items]),
        "clean": np.stack([np.concatenate([c.samples for c in it.cleans]) for it in items]),
        "bir": np.stack([np.stack([b.data for b in it.birs]) for it in items]),
    }
