"""WAV ingestion, log-Mel spectrograms and frame-window concatenation.

Frames are Hann-windowed with centered reflect padding, so a 10 s, 16 kHz
recording gives 1 + 160000 // 512 = 313 frames at hop 512.
"""
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window

from .container import read_container, write_container
from .errors import DegenerateFilterError, FormatError, SampleRateError, ShapeError, TooShortError

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
CACHE_MAGIC = b"NFFC"
CACHE_VERSION = 1

_NAME_RE = re.compile(r"^(normal|anomaly)_id_(\d+)_(\d+)\.wav$")


@dataclass
class Recording:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    source_path: str = ""
    machine_type: str = ""
    machine_id: str = ""
    label: str = "unlabeled"

    def __post_init__(self):
        if self.sample_rate_hz != SAMPLE_RATE:
            raise SampleRateError(
                f"{self.source_path or 'recording'}: {self.sample_rate_hz} Hz, expected {SAMPLE_RATE}")
        if len(self.samples) == 0:
            raise FormatError(f"{self.source_path or 'recording'}: no samples")
        if self.label not in ("normal", "anomaly", "unlabeled"):
            raise ValueError(f"bad label {self.label!r}")

    @property
    def recording_id(self):
        return Path(self.source_path).stem if self.source_path else ""


@dataclass(frozen=True)
class FeatureConfig:
    n_mels: int = 128
    frame_length: int = 1024
    hop_length: int = 512
    window_frames: int = 4
    window_hop: int = 4
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = LOG_FLOOR

    def to_dict(self):
        return asdict(self)


@dataclass
class LogMelSpectrogram:
    frames: np.ndarray  # [n_frames, n_mels]
    frame_length: int = 1024
    hop_length: int = 512

    @property
    def n_mels(self):
        return self.frames.shape[1]

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class FeatureWindows:
    """A batch of windows from one recording; row i is ``window_frames`` frames flattened time-major."""

    values: np.ndarray  # [n_windows, window_frames * n_mels]
    window_frames: int
    n_mels: int
    recording_id: str = ""
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return len(self.values)


# -- ingestion -------------------------------------------------------------


def parse_name(path):
    """``normal_id_02_00000013.wav`` -> ("normal", "02")."""
    match = _NAME_RE.match(Path(path).name)
    if match is None:
        raise FormatError(f"{path}: file name does not follow <label>_id_<NN>_<seq>.wav")
    return match.group(1), match.group(2)


def load_wav(path, machine_type="", machine_id="", label=None):
    """Read a mono 16-bit PCM or 32-bit float WAV scaled to [-1, 1]."""
    path = str(path)
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise FormatError(f"{path}: {data.shape[1]} channels, only mono is supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample encoding {data.dtype}")
    if label is None or not machine_id:
        try:
            parsed_label, parsed_id = parse_name(path)
        except FormatError:
            parsed_label, parsed_id = "unlabeled", ""
        label = label or parsed_label
        machine_id = machine_id or parsed_id
    return Recording(samples, int(rate), path, machine_type, machine_id, label)


def write_wav(path, samples, sample_rate_hz=SAMPLE_RATE):
    """Write samples in [-1, 1] as 16-bit PCM."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), sample_rate_hz, pcm)


@dataclass(frozen=True)
class DatasetEntry:
    path: str
    machine_type: str
    machine_id: str
    label: str
    split: str


def scan_dataset(root, machine_type):
    """List recordings under ``<root>/<machine_type>/{train,test}`` in sorted order."""
    base = Path(root) / machine_type
    entries = []
    for split in ("train", "test"):
        for path in sorted((base / split).glob("*.wav")):
            label, machine_id = parse_name(path)
            entries.append(DatasetEntry(str(path), machine_type, machine_id, label, split))
    return entries


# -- spectral pipeline -----------------------------------------------------


def stft_power(rec, frame_length=1024, hop_length=512):
    """Power spectrogram [n_frames, frame_length // 2 + 1]."""
    if frame_length <= 0 or frame_length & (frame_length - 1):
        raise ValueError("frame_length must be a power of two")
    if not 1 <= hop_length <= frame_length:
        raise ValueError("hop_length must lie in [1, frame_length]")
    samples = rec.samples if isinstance(rec, Recording) else np.asarray(rec, dtype=np.float64)
    pad = frame_length // 2
    if len(samples) <= pad:
        raise TooShortError(f"{len(samples)} samples cannot be reflect-padded by {pad}")
    padded = np.pad(samples, pad, mode="reflect")
    n_frames = 1 + len(samples) // hop_length
    frames = sliding_window_view(padded, frame_length)[::hop_length][:n_frames]
    window = get_window("hann", frame_length, fftbins=True)
    spectrum = np.fft.rfft(frames * window, axis=1)
    return spectrum.real**2 + spectrum.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft_bins, n_mels=128, sample_rate_hz=SAMPLE_RATE, fmin=0.0, fmax=None):
    """Unit-peak triangular filters [n_mels, n_fft_bins] spaced evenly on the HTK mel scale."""
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    fmax = sample_rate_hz / 2 if fmax is None else fmax
    bin_hz = np.arange(n_fft_bins) * (sample_rate_hz / (2.0 * (n_fft_bins - 1)))
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - left) / (center - left)
    falling = (right - bin_hz) / (right - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if len(empty):
        raise DegenerateFilterError(
            f"{len(empty)} of {n_mels} mel filters have no FFT bin (first: {empty[0]}); "
            "reduce n_mels or increase frame_length"
        )
    return fb


def filter_centers_hz(n_mels=128, fmin=0.0, fmax=8000.0):
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def log_mel(power, fb, floor=LOG_FLOOR, frame_length=None, hop_length=None):
    power = np.atleast_2d(power)
    if power.shape[1] != fb.shape[1]:
        raise ShapeError(f"power has {power.shape[1]} bins, filterbank expects {fb.shape[1]}")
    frames = np.log10(np.maximum(power @ fb.T, floor))
    return LogMelSpectrogram(
        frames,
        frame_length or 2 * (fb.shape[1] - 1),
        hop_length or (2 * (fb.shape[1] - 1)) // 2,
    )


def make_windows(spec, window_frames, window_hop, recording_id=""):
    frames = spec.frames if isinstance(spec, LogMelSpectrogram) else np.asarray(spec)
    n_frames, n_mels = frames.shape
    if window_hop < 1:
        raise ValueError("window_hop must be >= 1 (overlap < window_frames)")
    if window_frames > n_frames:
        raise TooShortError(f"window of {window_frames} frames exceeds {n_frames} available")
    starts = np.arange(0, n_frames - window_frames + 1, window_hop)
    values = np.stack([frames[s:s + window_frames].reshape(-1) for s in starts])
    return FeatureWindows(values, window_frames, n_mels, recording_id, starts)


_FB_CACHE = {}


def _filterbank(cfg, sample_rate_hz=SAMPLE_RATE):
    key = (cfg.frame_length, cfg.n_mels, sample_rate_hz, cfg.fmin, cfg.fmax)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(cfg.frame_length // 2 + 1, cfg.n_mels, sample_rate_hz, cfg.fmin, cfg.fmax)
    return _FB_CACHE[key]


def extract_logmel(rec, cfg=FeatureConfig()):
    power = stft_power(rec, cfg.frame_length, cfg.hop_length)
    return log_mel(power, _filterbank(cfg, rec.sample_rate_hz), cfg.log_floor, cfg.frame_length, cfg.hop_length)


def recording_windows(rec, cfg=FeatureConfig()):
    return make_windows(extract_logmel(rec, cfg), cfg.window_frames, cfg.window_hop, rec.recording_id)


# -- standardization -------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values, min_std=1e-6):
        values = np.asarray(values, dtype=np.float64)
        return cls(values.mean(axis=0), np.maximum(values.std(axis=0), min_std))

    def transform(self, values):
        return (np.asarray(values) - self.mean) / self.std


# -- feature cache ---------------------------------------------------------


def write_feature_cache(path, spec, cfg, entry):
    meta = {"feature_config": cfg.to_dict(), "recording": asdict(entry)}
    write_container(path, CACHE_MAGIC, CACHE_VERSION, meta, {"logmel": spec.frames}, dtype="float32")


def read_feature_cache(path):
    """Returns ``(LogMelSpectrogram, FeatureConfig, DatasetEntry)``."""
    meta, arrays = read_container(path, CACHE_MAGIC, CACHE_VERSION, error=FormatError)
    cfg = FeatureConfig(**meta["feature_config"])
    entry = DatasetEntry(**meta["recording"])
    return LogMelSpectrogram(arrays["logmel"], cfg.frame_length, cfg.hop_length), cfg, entry
