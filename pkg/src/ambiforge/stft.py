"""STFT analysis/synthesis with perfect reconstruction, plus WAV I/O.

A square-root periodic Hann window is used for analysis and synthesis;
at 50 % overlap its square sums to one, so overlap-add of the windowed
inverse frames reproduces the input exactly.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.io import wavfile

__all__ = ["StftConfig", "Spectrogram", "analyze", "synthesize", "read_wav", "write_wav"]


@dataclass(frozen=True)
class StftConfig:
    frame_size: int = 768
    hop: int = 384
    window: str = "sqrt-hann"
    sample_rate: float = 48000.0

    def __post_init__(self):
        if self.frame_size < 2 or self.frame_size % 2:
            raise ValueError("frame_size must be even and >= 2")
        if self.hop * 2 != self.frame_size:
            raise ValueError("hop must be frame_size / 2")
        if self.window != "sqrt-hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def num_bins(self) -> int:
        return self.frame_size // 2 + 1

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(self.num_bins) * self.sample_rate / self.frame_size

    def window_samples(self) -> np.ndarray:
        n = np.arange(self.frame_size)
        return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * n / self.frame_size))

    def num_frames(self, length: int) -> int:
        return -(-length // self.hop) + 1


@dataclass
class Spectrogram:
    """Complex STFT coefficients, ``values[channel, frame, bin]``.

    ``normalized`` marks coefficients already divided by per-bin input
    statistics so they are not scaled twice.
    """

    values: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    length: int | None = None
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError("spectrogram values must be [channels, frames, bins]")
        if self.values.shape[2] != self.config.num_bins:
            raise ValueError(
                f"{self.values.shape[2]} bins does not match frame size {self.config.frame_size}"
            )

    @property
    def num_channels(self) -> int:
        return self.values.shape[0]

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]

    @property
    def num_bins(self) -> int:
        return self.values.shape[2]

    @property
    def frequencies(self) -> np.ndarray:
        return self.config.frequencies

    def with_values(self, values) -> "Spectrogram":
        return replace(self, values=values)


def analyze(signal, config: StftConfig | None = None) -> Spectrogram:
    """STFT of a ``[channels, samples]`` (or 1-D) signal.

    The signal is zero-padded by ``frame_size / 2`` at the start and up to a
    whole number of hops at the end, giving ``ceil(L / hop) + 1`` frames.
    """
    config = config or StftConfig()
    x = np.asarray(signal, dtype=float)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("signal must be [channels, samples] and non-empty")
    if x.shape[1] < config.frame_size:
        raise ValueError(f"signal shorter than one frame ({config.frame_size} samples)")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite samples")

    length = x.shape[1]
    n_frames = config.num_frames(length)
    pre = config.frame_size // 2
    total = (n_frames - 1) * config.hop + config.frame_size
    padded = np.zeros((x.shape[0], total))
    padded[:, pre : pre + length] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, config.frame_size, axis=1)[:, :: config.hop]
    values = np.fft.rfft(frames * config.window_samples(), axis=-1)
    return Spectrogram(values, config, length)


def synthesize(spec: Spectrogram, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`analyze`, ``[channels, samples]``."""
    cfg = spec.config
    length = length if length is not None else spec.length
    values = np.array(spec.values, dtype=complex)
    values[..., 0] = values[..., 0].real
    values[..., -1] = values[..., -1].real
    frames = np.fft.irfft(values, n=cfg.frame_size, axis=-1) * cfg.window_samples()
    n_ch, n_frames, _ = frames.shape
    total = (n_frames - 1) * cfg.hop + cfg.frame_size
    out = np.zeros((n_ch, total))
    # two interleaved sets of non-overlapping frames
    for start in (0, 1):
        block = frames[:, start::2].reshape(n_ch, -1)
        offset = start * cfg.hop
        out[:, offset : offset + block.shape[1]] += block
    pre = cfg.frame_size // 2
    if length is None:
        length = (n_frames - 1) * cfg.hop
    return out[:, pre : pre + length]


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a PCM-16/24/32 or float WAV as float64 ``[channels, samples]``."""
    fs, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data / 2.0**15
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        data = data / 2.0**31
    elif data.dtype == np.uint8:
        data = (data.astype(float) - 128) / 128.0
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    return data.T.copy(), int(fs)


def write_wav(path, signal, sample_rate: int, subtype: str = "float32") -> None:
    """Write ``[channels, samples]`` as little-endian ``float32`` or ``pcm24``."""
    x = np.atleast_2d(np.asarray(signal, dtype=float))
    if subtype == "float32":
        wavfile.write(path, int(sample_rate), x.T.astype("<f4"))
    elif subtype == "pcm24":
        q = np.ascontiguousarray(np.clip(np.round(x.T * 2.0**23), -(2**23), 2**23 - 1), dtype="<i4")
        raw = q.view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
        with wave.open(str(path), "wb") as w:
            w.setnchannels(x.shape[0])
            w.setsampwidth(3)
            w.setframerate(int(sample_rate))
            w.writeframes(raw)
    else:
        raise ValueError(f"unsupported WAV subtype {subtype!r}")
