"""Log-mel features: STFT power -> mel filterbank -> dB, resized to a square image."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import get_window

from . import _io
from .dataset import TARGET_SR, ClipRecord, Manifest, WaveformCache, Waveform, standardize
from .errors import ConfigInvalid

IMAGE_SIZE = 224
FEATURE_VERSION = 1


@dataclass(frozen=True)
class MelConfig:
    window_size: int = 1024
    hop_size: int = 160
    num_mel_bands: int = 128
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        problems = []
        if not 0 < self.hop_size <= self.window_size:
            problems.append("need 0 < hop_size <= window_size")
        if not 0 <= self.fmin_hz < self.fmax_hz <= TARGET_SR / 2:
            problems.append(f"need 0 <= fmin_hz < fmax_hz <= {TARGET_SR // 2}")
        if self.num_mel_bands < 1:
            problems.append("num_mel_bands must be >= 1")
        if not self.log_floor > 0:
            problems.append("log_floor must be > 0")
        if problems:
            raise ConfigInvalid("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        return _io.digest({"version": FEATURE_VERSION, **self.to_dict()})[:16]


class Normalization(str, enum.Enum):
    MINMAX = "MINMAX"
    ZSCORE = "ZSCORE"


@dataclass(frozen=True)
class LogMelSpectrogram:
    values: np.ndarray  # [num_mel_bands, num_frames], dB
    config_hash: str


@dataclass(frozen=True)
class FeatureTensor:
    values: np.ndarray  # float32 [3, H, W]
    clip_id: str
    degenerate: bool = False


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: MelConfig) -> np.ndarray:
    """num_mel_bands + 2 frequencies (Hz); band k spans edges[k]..edges[k+2], peak at edges[k+1]."""
    mels = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.num_mel_bands + 2)
    return mel_to_hz(mels)


def mel_filterbank(cfg: MelConfig, sample_rate: int = TARGET_SR) -> np.ndarray:
    """Peak-normalized triangular filters on the HTK mel scale, shape [bands, window_size // 2 + 1]."""
    freqs = np.arange(cfg.window_size // 2 + 1) * sample_rate / cfg.window_size
    edges = mel_band_edges(cfg)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def power_spectrogram(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < cfg.window_size:
        raise ConfigInvalid(f"waveform of {x.shape[0]} samples shorter than window {cfg.window_size}")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_size)[:: cfg.hop_size]
    window = get_window("hann", cfg.window_size)  # periodic
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real**2 + spec.imag**2).T  # [bins, frames]


def compute_logmel(w: Waveform | np.ndarray, cfg: MelConfig = MelConfig()) -> LogMelSpectrogram:
    samples = w.samples if isinstance(w, Waveform) else w
    mel_power = mel_filterbank(cfg) @ power_spectrogram(samples, cfg)
    values = 10.0 * np.log10(np.maximum(mel_power, cfg.log_floor))
    return LogMelSpectrogram(values, cfg.hash)


def _axis_weights(n_in: int, n_out: int):
    # corner-aligned: output sample i sits at input coordinate i * (n_in - 1) / (n_out - 1)
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        # integer product first keeps both end points exact
        pos = (np.arange(n_out) * (n_in - 1)) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(np.int64), 0, max(n_in - 2, 0))
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(m: np.ndarray, height: int, width: int) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    r0, r1, fr = _axis_weights(m.shape[0], height)
    c0, c1, fc = _axis_weights(m.shape[1], width)
    rows = m[r0] * (1.0 - fr)[:, None] + m[r1] * fr[:, None]
    out = rows[:, c0] * (1.0 - fc)[None, :] + rows[:, c1] * fc[None, :]
    # convex combinations can overshoot by an ulp
    return np.clip(out, m.min(), m.max())


def resize_to_square(s: LogMelSpectrogram | np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    values = s.values if isinstance(s, LogMelSpectrogram) else np.asarray(s)
    if values.size == 0:
        raise ValueError("cannot resize an empty spectrogram")
    return resize_bilinear(values, size, size)


def to_feature_tensor(m: np.ndarray, scheme: Normalization | str = Normalization.MINMAX,
                      clip_id: str = "") -> FeatureTensor:
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("feature matrix contains non-finite values")
    scheme = Normalization(scheme)
    if scheme is Normalization.MINMAX:
        lo, hi = m.min(), m.max()
        degenerate = not hi > lo
        norm = np.zeros_like(m) if degenerate else (m - lo) / (hi - lo)
    else:
        std = m.std()
        degenerate = not std > 0
        norm = np.zeros_like(m) if degenerate else (m - m.mean()) / std
    single = norm.astype(np.float32)
    return FeatureTensor(np.stack([single, single, single]), clip_id, degenerate)


def waveform_to_tensor(w: Waveform, cfg: MelConfig = MelConfig(), size: int = IMAGE_SIZE,
                       scheme=Normalization.MINMAX) -> FeatureTensor:
    spec = compute_logmel(w, cfg)
    return to_feature_tensor(resize_to_square(spec, size), scheme, w.source_clip_id)


@dataclass
class FeaturePipeline:
    """Clip -> [3, size, size] tensor, with optional on-disk caching of both stages.

    Implements the ``features[clip_id]`` lookup the training loop uses.
    """

    manifest: Manifest
    mel: MelConfig = MelConfig()
    size: int = IMAGE_SIZE
    scheme: Normalization = Normalization.MINMAX
    cache_dir: Path | None = None
    _records: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._records = {r.clip_id: r for r in self.manifest.records}
        self.waveforms = WaveformCache(self.cache_dir / "waveforms", enabled=True) \
            if self.cache_dir is not None else None

    @property
    def key(self) -> str:
        return _io.digest({"mel": self.mel.hash, "size": self.size, "scheme": self.scheme.value})[:16]

    def tensor(self, record: ClipRecord) -> FeatureTensor:
        stem = None
        if self.cache_dir is not None:
            stem = Path(self.cache_dir) / "features" / self.key / record.clip_id
            cached = _io.read_f32_blob(stem, {"feature_key": self.key})
            if cached is not None:
                return FeatureTensor(cached, record.clip_id)
        wave = standardize(record, self.manifest, self.waveforms)
        ft = waveform_to_tensor(wave, self.mel, self.size, self.scheme)
        if stem is not None:
            _io.write_f32_blob(stem, ft.values, {"feature_key": self.key, "degenerate": ft.degenerate})
        return ft

    def __getitem__(self, clip_id: str) -> torch.Tensor:
        return torch.from_numpy(self.tensor(self._records[clip_id]).values)
