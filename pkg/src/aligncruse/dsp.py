"""STFT front end shared by inference, training and the loss consistency pass.

Conventions are fixed so test vectors are reproducible bit-for-bit:

* analysis and synthesis both use the square-root of a *periodic* Hann
  window, which satisfies constant overlap-add exactly at 50% overlap;
* the forward DFT is unnormalized, the inverse carries the 1/N factor;
* frame k covers samples [k*hop, k*hop + win_len) -- no zero padding of
  the first frame, so output only starts once a full window is available.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError

SAMPLE_RATE = 16000
LOG_EPS = 1e-12


def make_sqrt_hann(win_len: int) -> np.ndarray:
    """Square root of the periodic Hann window of length ``win_len``.

    Squared entries at 50% overlap sum to 1 at every interior sample
    position, which is what makes the analysis/synthesis pair exact.
    """
    if win_len < 2 or win_len % 2 != 0:
        raise ConfigurationError(f"window length must be even and >= 2, got {win_len}")
    n = np.arange(win_len)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_len)
    return np.sqrt(hann)


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = SAMPLE_RATE
    win_len: int = 320   # 20 ms
    hop: int = 160       # 10 ms
    fft_len: int = 320
    window: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.win_len != self.fft_len:
            raise ConfigurationError("win_len must equal fft_len")
        if self.hop * 2 != self.win_len:
            raise ConfigurationError("hop must be win_len / 2")
        if self.window is None:
            object.__setattr__(self, "window", make_sqrt_hann(self.win_len))
        elif len(self.window) != self.win_len:
            raise ConfigurationError("window length does not match win_len")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise ConfigurationError("audio samples must be finite")

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class SpectralFrames:
    """Complex (t, f) matrix plus the framing metadata it was produced with."""

    data: np.ndarray
    win_len: int = 320
    hop: int = 160
    fft_len: int = 320

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2:
            raise ShapeError(f"spectral frames must be 2-D, got {self.data.shape}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]


def frame_count(n_samples: int, cfg: StftConfig) -> int:
    if n_samples < cfg.win_len:
        return 0
    return (n_samples - cfg.win_len) // cfg.hop + 1


def frame_signal(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """(t, win_len) view of the hop-advanced analysis frames."""
    t = frame_count(len(samples), cfg)
    if t == 0:
        raise ShapeError(
            f"clip of {len(samples)} samples is shorter than one window ({cfg.win_len})"
        )
    idx = cfg.hop * np.arange(t)[:, None] + np.arange(cfg.win_len)[None, :]
    return samples[idx]


def stft(clip: AudioClip, cfg: StftConfig | None = None) -> SpectralFrames:
    cfg = cfg or StftConfig()
    if clip.sample_rate != cfg.sample_rate:
        raise ConfigurationError(
            f"expected {cfg.sample_rate} Hz input, got {clip.sample_rate}"
        )
    frames = frame_signal(clip.samples, cfg) * cfg.window
    spec = np.fft.rfft(frames, n=cfg.fft_len, axis=1)
    return SpectralFrames(spec, cfg.win_len, cfg.hop, cfg.fft_len)


def istft(frames: SpectralFrames, cfg: StftConfig | None = None) -> AudioClip:
    """Overlap-add synthesis; inverse of :func:`stft` on the interior."""
    cfg = cfg or StftConfig()
    if frames.n_bins != cfg.n_bins:
        raise ShapeError(
            f"expected {cfg.n_bins} bins, got {frames.n_bins}"
        )
    segs = np.fft.irfft(frames.data, n=cfg.fft_len, axis=1) * cfg.window
    t = frames.n_frames
    out = np.zeros((t - 1) * cfg.hop + cfg.win_len)
    for k in range(t):
        out[k * cfg.hop : k * cfg.hop + cfg.win_len] += segs[k]
    return AudioClip(out, cfg.sample_rate)


def log_power(frames: SpectralFrames) -> np.ndarray:
    """ln(|X|^2 + eps) features with shape (1, t, f); finite for any input."""
    if not np.all(np.isfinite(frames.data)):
        raise ConfigurationError("spectral frames must be finite")
    power = frames.data.real**2 + frames.data.imag**2
    return np.log(power + LOG_EPS)[None, :, :]


class StreamingFramer:
    """Accumulates pushed samples and yields complete analysis frames.

    Single-owner state; equivalent to frame_signal over the concatenation
    of everything pushed so far.
    """

    def __init__(self, cfg: StftConfig | None = None):
        self.cfg = cfg or StftConfig()
        self._backlog = np.zeros(0)

    def push(self, samples: np.ndarray) -> np.ndarray:
        """Returns an (n, win_len) array of frames completed by this push."""
        self._backlog = np.concatenate([self._backlog, np.asarray(samples, dtype=np.float64)])
        cfg = self.cfg
        n = frame_count(len(self._backlog), cfg)
        if n == 0:
            return np.zeros((0, cfg.win_len))
        idx = cfg.hop * np.arange(n)[:, None] + np.arange(cfg.win_len)[None, :]
        frames = self._backlog[idx].copy()
        self._backlog = self._backlog[n * cfg.hop :]
        return frames


def read_wav(path) -> AudioClip:
    """Reads a mono 16 kHz 16-bit PCM RIFF file into [-1, 1) floats."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ConfigurationError(f"{path}: expected mono audio")
        if w.getsampwidth() != 2:
            raise ConfigurationError(f"{path}: expected 16-bit PCM")
        if w.getframerate() != SAMPLE_RATE:
            raise ConfigurationError(f"{path}: expected {SAMPLE_RATE} Hz")
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples)


def write_wav(path, clip: AudioClip) -> None:
    if clip.sample_rate != SAMPLE_RATE:
        raise ConfigurationError(f"can only write {SAMPLE_RATE} Hz audio")
    ints = np.clip(np.rint(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(ints.tobytes())
