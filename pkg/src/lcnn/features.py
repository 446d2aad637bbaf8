"""Log-mel features for 1-second clips, plus the ``.lmel`` feature cache.

At 44.1 kHz a 40 ms Hamming window (1764 samples) hopped by 20 ms (882)
gives ``1 + 44100 // 882 = 51`` centred frames; 40 mel bands give the
network's 40x51 input.
"""

from __future__ import annotations

import struct
import wave
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 44100
N_MELS = 40
LOG_FLOOR = 1e-10

_LMEL_HEADER = struct.Struct("<4sBHH")
LMEL_MAGIC = b"LMEL"
LMEL_VERSION = 1


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if len(self.samples) != self.sample_rate:
            raise ValueError(
                f"expected a 1 s clip ({self.sample_rate} samples), got {len(self.samples)}")


def read_wav(path) -> AudioClip:
    """16-bit PCM mono WAV at 44.1 kHz, scaled to [-1, 1) by 1/32768; no resampling."""
    with wave.open(str(path), "rb") as wf:
        channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
        if channels != 1:
            raise ValueError(f"{path}: expected mono audio, file has {channels} channels")
        if width != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, sample width is {8 * width} bits")
        if rate != SAMPLE_RATE:
            raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, file is {rate} Hz")
        frames = wf.readframes(wf.getnframes())
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def hamming_periodic(n: int) -> np.ndarray:
    return 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_params(sample_rate: int, window_ms: float, hop_ms: float) -> tuple[int, int, int]:
    """(window length, hop, FFT size) in samples; FFT size is the next power of two."""
    win = int(round(sample_rate * window_ms / 1000))
    hop = int(round(sample_rate * hop_ms / 1000))
    n_fft = 1 << (win - 1).bit_length()
    return win, hop, n_fft


def stft_magnitude(samples: np.ndarray, sample_rate: int = SAMPLE_RATE,
                   window_ms: float = 40, hop_ms: float = 20) -> np.ndarray:
    """Magnitude spectrogram, shape (n_fft // 2 + 1, 1 + len(samples) // hop).

    Frames are centred: the signal is reflection-padded by ``n_fft // 2`` on
    both sides and the window sits in the middle of each zero-padded FFT frame.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or samples.size == 0:
        raise ValueError("stft needs a non-empty 1-D signal")
    win, hop, n_fft = stft_params(sample_rate, window_ms, hop_ms)
    if samples.size < win:
        raise ValueError(f"signal of {samples.size} samples is shorter than one window ({win})")
    window = np.zeros(n_fft)
    start = (n_fft - win) // 2
    window[start:start + win] = hamming_periodic(win)
    padded = np.pad(samples, n_fft // 2, mode="reflect")
    n_frames = 1 + (padded.size - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    return np.abs(np.fft.rfft(frames * window, axis=1)).T


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz, logstep = 1000.0, np.log(6.4) / 27.0
    mel = f / f_sp
    return np.where(f >= min_log_hz,
                    min_log_hz / f_sp + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep, mel)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz, logstep = 1000.0, np.log(6.4) / 27.0
    min_log_mel = min_log_hz / f_sp
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters with Slaney area normalisation, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    return weights * (2.0 / (edges[2:] - edges[:-2]))[:, None]


def logmel(magnitude: np.ndarray, sample_rate: int = SAMPLE_RATE, n_mels: int = N_MELS) -> np.ndarray:
    """Natural log of mel-filtered power, floored at ``LOG_FLOOR``; shape (n_mels, frames)."""
    n_fft = 2 * (magnitude.shape[0] - 1)
    fb = mel_filterbank(sample_rate, n_fft, n_mels)
    return np.log(np.maximum(fb @ (magnitude ** 2), LOG_FLOOR))


def extract(clip: AudioClip, window_ms: float = 40, hop_ms: float = 20,
            n_mels: int = N_MELS) -> np.ndarray:
    """The network input for one clip: float32 (n_mels, frames), 40x51 by default."""
    mag = stft_magnitude(clip.samples, clip.sample_rate, window_ms, hop_ms)
    return logmel(mag, clip.sample_rate, n_mels).astype(np.float32)


def write_lmel(path, feature: np.ndarray) -> None:
    feature = np.asarray(feature, dtype="<f4")
    if feature.ndim != 2:
        raise ValueError(f"feature must be 2-D, got shape {feature.shape}")
    rows, cols = feature.shape
    Path(path).write_bytes(_LMEL_HEADER.pack(LMEL_MAGIC, LMEL_VERSION, rows, cols) + feature.tobytes())


def read_lmel(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _LMEL_HEADER.size:
        raise ValueError(f"{path}: truncated .lmel header")
    magic, version, rows, cols = _LMEL_HEADER.unpack_from(data)
    if magic != LMEL_MAGIC or version != LMEL_VERSION:
        raise ValueError(f"{path}: not an LMEL v{LMEL_VERSION} file")
    expected = _LMEL_HEADER.size + 4 * rows * cols
    if len(data) != expected:
        raise ValueError(f"{path}: {len(data)} bytes, header implies {expected}")
    return np.frombuffer(data, dtype="<f4", offset=_LMEL_HEADER.size).reshape(rows, cols).astype(np.float32)


def load_feature(path) -> np.ndarray:
    """A 2-D feature from either a ``.lmel`` cache file or a WAV clip."""
    path = Path(path)
    if path.suffix.lower() == ".wav":
        return extract(read_wav(path))
    return read_lmel(path)


def _extract_one(args: tuple[Path, Path]) -> Path:
    src, dst = args
    write_lmel(dst, extract(read_wav(src)))
    return dst


def extract_to_cache(wav_paths: list[Path], out_dir, jobs: int = 1) -> list[Path]:
    """Extract every clip to ``out_dir/<stem>.lmel``; output order follows input order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(Path(p), out_dir / (Path(p).stem + ".lmel")) for p in wav_paths]
    if jobs <= 1:
        return [_extract_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_extract_one, tasks))
