"""Synthetic I/Q frames for eleven modulation schemes over an AWGN channel.

Frames are ``(2, N)`` float32 matrices: row 0 in-phase, row 1 quadrature.
Every clean frame is scaled to unit mean power before noise is added, so the
noise variance for a given SNR is simply ``10 ** (-snr_db / 10)``.

Waveform constants (all schemes):

* digital PSK/PAM/QAM: Gray-mapped symbols, root-raised-cosine shaping with
  rolloff 0.35 over 8 symbols, 8 samples per symbol;
* GFSK: Gaussian frequency pulse BT = 0.35, modulation index 0.5;
* CPFSK: rectangular frequency pulse, modulation index 0.5;
* analog message: three tones at 0.01, 0.023 and 0.041 cycles/sample with
  random phases, plus low-pass Gaussian noise 10 dB below the tones, scaled
  to unit peak; AM-DSB uses ``1 + 0.5 m``, AM-SSB the analytic signal of
  ``m``, WBFM a peak deviation of 0.1 of the sample rate.

Dataset file layout (little-endian)::

    magic  b"AMC1" | version u16 | record count u64 | frame length u32
    record: scheme u8 | snr_db i8 | seed u64 | I row f32 * N | Q row f32 * N
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal as sps_signal

FORMAT_MAGIC = b"AMC1"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHQI")

ANALOG_TONES = (0.01, 0.023, 0.041)
ANALOG_NOISE_DB = -10.0
ANALOG_NOISE_CUTOFF = 0.05
AM_INDEX = 0.5
WBFM_DEVIATION = 0.1
GFSK_BT = 0.35
FSK_INDEX = 0.5
GAUSS_SPAN = 4


class Modulation(IntEnum):
    BPSK = 0
    QPSK = 1
    PSK8 = 2
    PAM4 = 3
    QAM16 = 4
    QAM64 = 5
    GFSK = 6
    CPFSK = 7
    WBFM = 8
    AM_DSB = 9
    AM_SSB = 10

    @property
    def display(self) -> str:
        return _DISPLAY.get(self, self.name)

    @property
    def is_digital(self) -> bool:
        return self <= Modulation.CPFSK

    @classmethod
    def parse(cls, name: "str | int | Modulation") -> "Modulation":
        if isinstance(name, (int, np.integer)):
            return cls(int(name))
        key = str(name).upper()
        for m in cls:
            if key in (m.name, m.display):
                return m
        raise ValueError(f"unknown modulation {name!r}; known: {[m.display for m in cls]}")


_DISPLAY = {Modulation.PSK8: "8PSK", Modulation.AM_DSB: "AM-DSB", Modulation.AM_SSB: "AM-SSB"}

DIGITAL_SCHEMES = [m for m in Modulation if m.is_digital]
CONSTELLATION_SCHEMES = [m for m in DIGITAL_SCHEMES if m not in (Modulation.GFSK, Modulation.CPFSK)]
DEFAULT_SNRS = list(range(-20, 20, 2))


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class CountMismatchError(DatasetFormatError):
    pass


# --------------------------------------------------------------------------
# constellations
# --------------------------------------------------------------------------

BITS_PER_SYMBOL = {
    Modulation.BPSK: 1,
    Modulation.QPSK: 2,
    Modulation.PSK8: 3,
    Modulation.PAM4: 2,
    Modulation.QAM16: 4,
    Modulation.QAM64: 6,
}


def _gray_to_position(v: int) -> int:
    pos = v
    shift = v >> 1
    while shift:
        pos ^= shift
        shift >>= 1
    return pos


def _pam_level(bits: int, m: int) -> int:
    return 2 * _gray_to_position(bits) - (2**m - 1)


@lru_cache(maxsize=None)
def _constellation(scheme: Modulation) -> np.ndarray:
    """Table indexed by the symbol's bit pattern (MSB first), unit mean energy."""
    m = BITS_PER_SYMBOL[scheme]
    pts = []
    for v in range(2**m):
        if scheme is Modulation.BPSK:
            pt = 1.0 - 2.0 * v
        elif scheme is Modulation.QPSK:
            pt = complex(1 - 2 * (v >> 1), 1 - 2 * (v & 1))
        elif scheme is Modulation.PSK8:
            pt = np.exp(2j * np.pi * _gray_to_position(v) / 8)
        elif scheme is Modulation.PAM4:
            pt = _pam_level(v, 2)
        else:
            half = m // 2
            pt = complex(_pam_level(v >> half, half), _pam_level(v & (2**half - 1), half))
        pts.append(pt)
    pts = np.asarray(pts, dtype=np.complex128)
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


def constellation(scheme) -> np.ndarray:
    scheme = Modulation.parse(scheme)
    if scheme not in BITS_PER_SYMBOL:
        raise ValueError(f"{scheme.display} has no point constellation")
    return _constellation(scheme).copy()


def map_symbols(scheme, bits) -> np.ndarray:
    """Gray-map a bit sequence to unit-energy constellation points."""
    scheme = Modulation.parse(scheme)
    if scheme not in BITS_PER_SYMBOL:
        kind = "an analog scheme" if not scheme.is_digital else "frequency-modulated"
        raise ValueError(
            f"{scheme.display} is {kind}; it has no symbol map, use modulate_frame instead"
        )
    bits = np.asarray(bits, dtype=np.int64)
    m = BITS_PER_SYMBOL[scheme]
    if bits.size % m:
        raise ValueError(f"{bits.size} bits is not a multiple of {m} bits per {scheme.display} symbol")
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bits must be 0 or 1")
    weights = 1 << np.arange(m - 1, -1, -1)
    idx = bits.reshape(-1, m) @ weights
    return _constellation(scheme)[idx]


# --------------------------------------------------------------------------
# pulse shaping
# --------------------------------------------------------------------------


def rrc_taps(sps: int, rolloff: float, span: int) -> np.ndarray:
    """Root-raised-cosine impulse response, ``span * sps + 1`` taps, unit energy."""
    if not 0 < rolloff <= 1:
        raise ValueError(f"rolloff must lie in (0, 1], got {rolloff}")
    if sps < 2:
        raise ValueError(f"need at least 2 samples per symbol, got {sps}")
    t = (np.arange(span * sps + 1) - span * sps / 2) / sps
    b = rolloff
    taps = np.empty_like(t)
    for n, tn in enumerate(t):
        if abs(tn) < 1e-12:
            taps[n] = 1 + b * (4 / np.pi - 1)
        elif abs(abs(tn) - 1 / (4 * b)) < 1e-9:
            taps[n] = (b / np.sqrt(2)) * (
                (1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b))
            )
        else:
            num = np.sin(np.pi * tn * (1 - b)) + 4 * b * tn * np.cos(np.pi * tn * (1 + b))
            den = np.pi * tn * (1 - (4 * b * tn) ** 2)
            taps[n] = num / den
    return taps / np.sqrt(np.sum(taps**2))


def upsample(symbols, sps: int) -> np.ndarray:
    """Symbols at indices 0, sps, 2*sps, ...; no trailing zeros."""
    symbols = np.asarray(symbols)
    out = np.zeros((len(symbols) - 1) * sps + 1 if len(symbols) else 0, dtype=np.result_type(symbols, float))
    out[::sps] = symbols
    return out


def rrc_filter(symbols, sps: int = 8, rolloff: float = 0.35, span: int = 8) -> np.ndarray:
    taps = rrc_taps(sps, rolloff, span)
    return np.convolve(upsample(symbols, sps), taps)


def gaussian_taps(sps: int, bt: float = GFSK_BT, span: int = GAUSS_SPAN) -> np.ndarray:
    """Gaussian frequency pulse normalised to unit DC gain."""
    t = (np.arange(span * sps + 1) - span * sps / 2) / sps
    h = np.exp(-2 * np.pi**2 * bt**2 * t**2 / np.log(2))
    return h / h.sum()


# --------------------------------------------------------------------------
# waveforms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    frame_length: int = 128
    samples_per_symbol: int = 8
    rolloff: float = 0.35
    rrc_span: int = 8
    silence_prob: float = 0.0


def normalize_rms(x) -> np.ndarray:
    """Scale so that mean(|x|^2) == 1; phase of every sample is kept."""
    x = np.asarray(x)
    power = np.mean(np.abs(x) ** 2)
    if not power > 0:
        raise ValueError("cannot normalise an all-zero signal")
    return x / np.sqrt(power)


def add_awgn(x, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise of total variance 10**(-snr_db/10)."""
    sigma2 = 10.0 ** (-snr_db / 10.0)
    noise = rng.standard_normal(len(x)) + 1j * rng.standard_normal(len(x))
    return np.asarray(x) + np.sqrt(sigma2 / 2) * noise


def _digital_waveform(scheme, n_out, rng, cfg: GeneratorConfig):
    sps = cfg.samples_per_symbol
    n_sym = n_out // sps + 2 * cfg.rrc_span + 4
    if scheme in (Modulation.GFSK, Modulation.CPFSK):
        bits = rng.integers(0, 2, n_sym)
        freq = np.repeat(1.0 - 2.0 * bits, sps)
        if scheme is Modulation.GFSK:
            freq = np.convolve(freq, gaussian_taps(sps), mode="same")
        phase = np.cumsum(np.pi * FSK_INDEX * freq / sps) + rng.uniform(0, 2 * np.pi)
        wave = np.exp(1j * phase)
        guard = GAUSS_SPAN * sps
    else:
        bits = rng.integers(0, 2, n_sym * BITS_PER_SYMBOL[scheme])
        wave = rrc_filter(map_symbols(scheme, bits), sps, cfg.rolloff, cfg.rrc_span)
        guard = cfg.rrc_span * sps
    # crop away filter transients at a random offset
    start = int(rng.integers(guard, len(wave) - guard - n_out + 1))
    return wave[start : start + n_out]


def analog_message(n: int, rng: np.random.Generator) -> np.ndarray:
    """Three tones plus low-pass noise, scaled to unit peak."""
    t = np.arange(n)
    phases = rng.uniform(0, 2 * np.pi, len(ANALOG_TONES))
    tones = sum(np.cos(2 * np.pi * f * t + p) for f, p in zip(ANALOG_TONES, phases))
    lp = sps_signal.firwin(65, ANALOG_NOISE_CUTOFF * 2)
    noise = np.convolve(rng.standard_normal(n + len(lp)), lp, mode="valid")[:n]
    target = len(ANALOG_TONES) * 0.5 * 10 ** (ANALOG_NOISE_DB / 10)
    noise *= np.sqrt(target / np.mean(noise**2))
    m = tones + noise
    return m / np.max(np.abs(m))


def _analog_waveform(scheme, n_out, rng):
    margin = 256
    m = analog_message(n_out + 2 * margin, rng)
    if scheme is Modulation.AM_DSB:
        wave = (1 + AM_INDEX * m).astype(np.complex128)
    elif scheme is Modulation.AM_SSB:
        wave = sps_signal.hilbert(m)
    else:
        wave = np.exp(1j * 2 * np.pi * WBFM_DEVIATION * np.cumsum(m))
    start = int(rng.integers(margin // 2, margin + margin // 2))
    return wave[start : start + n_out]


def clean_frame(scheme, rng: np.random.Generator, cfg: GeneratorConfig = GeneratorConfig()) -> np.ndarray:
    """Noise-free complex baseband frame of ``cfg.frame_length`` samples, unit power."""
    scheme = Modulation.parse(scheme)
    n = cfg.frame_length
    if scheme.is_digital:
        wave = _digital_waveform(scheme, n, rng, cfg)
    else:
        wave = _analog_waveform(scheme, n, rng)
    if cfg.silence_prob > 0 and rng.random() < cfg.silence_prob:
        length = int(rng.integers(n // 4, n // 2 + 1))
        start = int(rng.integers(0, n - length + 1))
        wave = wave.copy()
        wave[start : start + length] = 0
    return normalize_rms(wave)


@dataclass
class FrameRecord:
    iq: np.ndarray
    label: Modulation
    snr_db: int
    seed: int


def modulate_frame(scheme, snr_db: int, seed: int, cfg: GeneratorConfig = GeneratorConfig()) -> FrameRecord:
    """One labelled noisy frame; a pure function of its arguments."""
    scheme = Modulation.parse(scheme)
    rng = np.random.default_rng(seed)
    clean = clean_frame(scheme, rng, cfg)
    noisy = add_awgn(clean, snr_db, rng)
    iq = np.stack([noisy.real, noisy.imag]).astype(np.float32)
    return FrameRecord(iq, scheme, int(snr_db), int(seed))


def clean_reference(scheme, seed: int, cfg: GeneratorConfig = GeneratorConfig()) -> np.ndarray:
    """The pre-noise signal behind ``modulate_frame(scheme, *, seed, cfg)``."""
    return clean_frame(scheme, np.random.default_rng(seed), cfg)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    schemes: list[str] = field(default_factory=lambda: [m.display for m in Modulation])
    snrs: list[int] = field(default_factory=lambda: list(DEFAULT_SNRS))
    frames_per_cell: int = 10
    frame_length: int = 128
    samples_per_symbol: int = 8
    master_seed: int = 0
    format_version: int = FORMAT_VERSION
    rolloff: float = 0.35
    rrc_span: int = 8
    silence_prob: float = 0.0

    def __post_init__(self):
        self.schemes = [Modulation.parse(s).display for s in self.schemes]
        self.snrs = [int(s) for s in self.snrs]
        if len(set(self.schemes)) != len(self.schemes) or not self.schemes:
            raise ValueError("scheme list must be non-empty and free of duplicates")
        if any(s % 2 or not -128 <= s <= 127 for s in self.snrs) or len(set(self.snrs)) != len(self.snrs):
            raise ValueError(f"SNRs must be distinct even integers, got {self.snrs}")
        if self.frames_per_cell < 1:
            raise ValueError("frames_per_cell must be positive")
        if self.format_version != FORMAT_VERSION:
            raise VersionMismatchError(f"manifest format version {self.format_version} unsupported")

    @property
    def total_frames(self) -> int:
        return len(self.schemes) * len(self.snrs) * self.frames_per_cell

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            self.frame_length, self.samples_per_symbol, self.rolloff, self.rrc_span, self.silence_prob
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(**d)


@dataclass
class FrameSet:
    """Column store of frames: ``iq`` (n, 2, N) float32 and per-frame metadata."""

    iq: np.ndarray
    labels: np.ndarray
    snrs: np.ndarray
    seeds: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> FrameRecord:
        return FrameRecord(self.iq[i], Modulation(int(self.labels[i])), int(self.snrs[i]), int(self.seeds[i]))

    def subset(self, idx) -> "FrameSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FrameSet(self.iq[idx], self.labels[idx], self.snrs[idx], self.seeds[idx])

    @classmethod
    def from_records(cls, records) -> "FrameSet":
        records = list(records)
        return cls(
            np.stack([r.iq for r in records]).astype(np.float32),
            np.array([int(r.label) for r in records], dtype=np.int64),
            np.array([r.snr_db for r in records], dtype=np.int64),
            np.array([r.seed for r in records], dtype=np.uint64),
        )

    def equals(self, other: "FrameSet") -> bool:
        return (
            np.array_equal(self.iq, other.iq)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.snrs, other.snrs)
            and np.array_equal(self.seeds, other.seeds)
        )


def instance_seed(master_seed: int, scheme_index: int, snr_index: int, frame_index: int) -> int:
    ss = np.random.SeedSequence([master_seed, scheme_index, snr_index, frame_index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_dataset(manifest: DatasetManifest, threads: int = 1) -> FrameSet:
    """All frames of the manifest, ordered scheme-major, then SNR, then frame."""
    cfg = manifest.generator_config()
    tasks = []
    for name in manifest.schemes:
        scheme = Modulation.parse(name)
        for si, snr in enumerate(manifest.snrs):
            for fi in range(manifest.frames_per_cell):
                tasks.append((scheme, snr, instance_seed(manifest.master_seed, int(scheme), si, fi)))

    def make(task):
        scheme, snr, seed = task
        return modulate_frame(scheme, snr, seed, cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(make, tasks, chunksize=64))
    else:
        records = [make(t) for t in tasks]
    return FrameSet.from_records(records)


def _record_dtype(n: int) -> np.dtype:
    return np.dtype([("scheme", "u1"), ("snr", "i1"), ("seed", "<u8"), ("iq", "<f4", (2, n))])


def encode_dataset(frames: FrameSet) -> bytes:
    n = frames.iq.shape[2]
    rec = np.empty(len(frames), dtype=_record_dtype(n))
    rec["scheme"] = frames.labels
    rec["snr"] = frames.snrs
    rec["seed"] = frames.seeds
    rec["iq"] = frames.iq
    return HEADER.pack(FORMAT_MAGIC, FORMAT_VERSION, len(frames), n) + rec.tobytes()


def decode_dataset(data: bytes) -> FrameSet:
    if len(data) < HEADER.size:
        raise TruncatedFileError(f"file is {len(data)} bytes, shorter than the {HEADER.size}-byte header")
    magic, version, count, n = HEADER.unpack_from(data)
    if magic != FORMAT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {FORMAT_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"dataset format version {version}, this reader supports {FORMAT_VERSION}")
    dt = _record_dtype(n)
    payload = len(data) - HEADER.size
    if payload < count * dt.itemsize:
        raise TruncatedFileError(f"header declares {count} records but payload holds {payload // dt.itemsize}")
    if payload != count * dt.itemsize:
        raise CountMismatchError(
            f"header declares {count} records but payload is {payload} bytes ({payload / dt.itemsize:.2f} records)"
        )
    rec = np.frombuffer(data, dtype=dt, count=count, offset=HEADER.size)
    return FrameSet(
        rec["iq"].astype(np.float32),
        rec["scheme"].astype(np.int64),
        rec["snr"].astype(np.int64),
        rec["seed"].astype(np.uint64),
    )


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_dataset(path, frames: FrameSet, manifest: DatasetManifest | None = None) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode_dataset(frames))
        if manifest is not None:
            manifest_path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc


def read_dataset(path) -> tuple[FrameSet, DatasetManifest | None]:
    path = Path(path)
    frames = decode_dataset(path.read_bytes())
    mpath = manifest_path(path)
    manifest = DatasetManifest.from_dict(json.loads(mpath.read_text())) if mpath.exists() else None
    return frames, manifest


def split_dataset(frames: FrameSet, ratio: float, seed: int) -> tuple[FrameSet, FrameSet]:
    """Stratified split per (scheme, SNR) cell; both parts keep the original order."""
    train_idx, test_idx = split_indices(frames, ratio, seed)
    return frames.subset(train_idx), frames.subset(test_idx)


def split_indices(frames: FrameSet, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    cells = sorted(set(zip(frames.labels.tolist(), frames.snrs.tolist())))
    for label, snr in cells:
        idx = np.flatnonzero((frames.labels == label) & (frames.snrs == snr))
        n_train = int(round(ratio * len(idx)))
        if n_train == 0 or n_train == len(idx):
            raise ValueError(
                f"cell ({Modulation(label).display}, {snr} dB) has {len(idx)} frames, "
                f"too few to split at ratio {ratio}"
            )
        perm = rng.permutation(idx)
        train.append(perm[:n_train])
        test.append(perm[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
