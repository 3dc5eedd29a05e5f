"""Log-Mel frontend: 128-bin log-Mel energies, 4-frame causal stacking, 3x subsampling.

The offline path (:func:`extract_logmel` + :func:`stack_subsample`) and the
streaming path (:func:`frontend_push`) share the same per-frame kernel, so the
streamed features are bit-identical to the offline ones for any chunking.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError

SAMPLE_RATE = 16000
WINDOW_MS = 32
SHIFT_MS = 10
N_MELS = 128
N_FFT = 512
MEL_LOW_HZ = 125.0
MEL_HIGH_HZ = 7500.0
LOG_FLOOR = 1e-10
STACK = 4
SUBSAMPLE = 3


@dataclass(frozen=True)
class AudioBuffer:
    """Mono PCM16 audio at 16 kHz."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise ConfigurationError(
                f"sample_rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}"
            )
        raw = np.asarray(self.samples)
        if raw.ndim != 1:
            raise InputError(f"audio must be 1-D, got shape {raw.shape}")
        if raw.dtype != np.int16:
            if raw.size and np.issubdtype(raw.dtype, np.floating) and not np.all(np.isfinite(raw)):
                raise InputError("audio contains non-finite samples")
            if raw.size and (np.any(raw != np.round(raw)) or raw.min() < -32768 or raw.max() > 32767):
                raise InputError("audio samples must be integers in the int16 range")
            raw = raw.astype(np.int16)
        object.__setattr__(self, "samples", raw)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def _ms_to_samples(ms: float, sample_rate: int) -> int:
    n = ms * sample_rate / 1000
    if n != int(n):
        raise ConfigurationError(f"{ms} ms is not a whole number of samples at {sample_rate} Hz")
    return int(n)


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    low_hz: float = MEL_LOW_HZ,
    high_hz: float = MEL_HIGH_HZ,
) -> np.ndarray:
    """Triangular HTK-mel filterbank, shape ``(n_fft // 2 + 1, n_mels)``."""
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = _mel_to_hz(np.linspace(_hz_to_mel(low_hz), _hz_to_mel(high_hz), n_mels + 2))
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    f = bin_hz[:, None]
    rising = (f - lower) / (center - lower)
    falling = (upper - f) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


_FILTERBANK = mel_filterbank()
# periodic Hann
_WINDOW = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(N_FFT) / N_FFT)


def _logmel_frames(frames: np.ndarray) -> np.ndarray:
    """Map a ``(F, 512)`` block of raw sample windows to ``(F, 128)`` log-Mel rows.

    Every operation here is row-independent (no BLAS), which is what makes the
    streaming path bit-exact against the offline one.
    """
    spectrum = np.fft.rfft(frames * _WINDOW, n=N_FFT, axis=-1)
    power = spectrum.real**2 + spectrum.imag**2
    mel = np.einsum("fk,km->fm", power, _FILTERBANK, optimize=False)
    return np.log(mel + LOG_FLOOR).astype(np.float32)


def _frame_windows(samples: np.ndarray, window: int, shift: int) -> np.ndarray:
    n = len(samples)
    if n < window:
        return np.zeros((0, window), dtype=np.float64)
    count = (n - window) // shift + 1
    x = samples.astype(np.float64) / 32768.0
    idx = np.arange(window)[None, :] + shift * np.arange(count)[:, None]
    return x[idx]


def extract_logmel(
    audio: AudioBuffer,
    window_ms: float = WINDOW_MS,
    shift_ms: float = SHIFT_MS,
    n_mels: int = N_MELS,
) -> np.ndarray:
    """Offline log-Mel extraction; returns ``(rows, 128)`` float32."""
    if audio.sample_rate != SAMPLE_RATE:
        raise ConfigurationError(f"sample_rate must be {SAMPLE_RATE} Hz")
    window = _ms_to_samples(window_ms, audio.sample_rate)
    shift = _ms_to_samples(shift_ms, audio.sample_rate)
    if (window, shift, n_mels) != (N_FFT, 160, N_MELS):
        raise ConfigurationError("only the 32 ms / 10 ms / 128-bin frontend is supported")
    return _logmel_frames(_frame_windows(audio.samples, window, shift))


def stack_subsample(base: np.ndarray, stack: int = STACK, factor: int = SUBSAMPLE) -> np.ndarray:
    """Causal stacking + subsampling.

    Output row ``t`` is ``[b[3t-3], b[3t-2], b[3t-1], b[3t]]`` with negative
    indices clamped to 0.
    """
    base = np.asarray(base, dtype=np.float32)
    if base.ndim != 2:
        raise InputError(f"base frames must be 2-D, got shape {base.shape}")
    rows, dim = base.shape
    if rows == 0:
        return np.zeros((0, stack * dim), dtype=np.float32)
    centers = np.arange(0, rows, factor)
    idx = np.maximum(centers[:, None] - np.arange(stack - 1, -1, -1)[None, :], 0)
    return base[idx].reshape(len(centers), stack * dim)


def compute_features(audio: AudioBuffer) -> np.ndarray:
    """Offline frontend: audio to ``(frames, 512)`` model features."""
    return stack_subsample(extract_logmel(audio))


def expected_model_frames(n_samples: int) -> int:
    if n_samples < N_FFT:
        return 0
    base = (n_samples - N_FFT) // 160 + 1
    return -(-base // SUBSAMPLE)


@dataclass
class FrontendState:
    """Streaming frontend carry-over.

    ``pending_samples`` holds the unconsumed audio tail (always shorter than a
    window), ``pending_base_frames`` the last ``STACK - 1`` base frames needed
    for stacking, and ``base_count`` the number of base frames produced so far.
    """

    pending_samples: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int16))
    pending_base_frames: np.ndarray = field(
        default_factory=lambda: np.zeros((0, N_MELS), dtype=np.float32)
    )
    base_count: int = 0

    @property
    def subsample_phase(self) -> int:
        return self.base_count % SUBSAMPLE

    def copy(self) -> "FrontendState":
        return FrontendState(
            self.pending_samples.copy(), self.pending_base_frames.copy(), self.base_count
        )


def frontend_push(state: FrontendState, chunk: AudioBuffer) -> tuple[FrontendState, np.ndarray]:
    """Feed a chunk of audio; return the new state and the model frames it completed."""
    if chunk.sample_rate != SAMPLE_RATE:
        raise ConfigurationError(f"sample_rate must be {SAMPLE_RATE} Hz")
    if len(chunk) == 0:
        return state, np.zeros((0, STACK * N_MELS), dtype=np.float32)

    samples = np.concatenate([state.pending_samples, chunk.samples])
    windows = _frame_windows(samples, N_FFT, 160)
    n_new = len(windows)
    if n_new == 0:
        return FrontendState(samples, state.pending_base_frames, state.base_count), np.zeros(
            (0, STACK * N_MELS), dtype=np.float32
        )
    new_base = _logmel_frames(windows)
    tail = samples[n_new * 160 :]

    history = state.pending_base_frames
    if state.base_count == 0:
        # left-edge replication of base frame 0
        history = np.repeat(new_base[:1], STACK - 1, axis=0)
    frames = np.concatenate([history, new_base])  # frames[j] == base[start + j - len(history)]
    offset = len(history) - state.base_count

    first = state.base_count
    last = state.base_count + n_new
    centers = np.arange(-(-first // SUBSAMPLE) * SUBSAMPLE, last, SUBSAMPLE)
    idx = centers[:, None] - np.arange(STACK - 1, -1, -1)[None, :] + offset
    out = frames[idx].reshape(len(centers), STACK * N_MELS)

    new_state = FrontendState(tail, frames[-(STACK - 1) :].copy(), last)
    return new_state, out


def read_wav(path: str | Path) -> AudioBuffer:
    """Read a PCM16 mono 16 kHz WAV file."""
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            comp = w.getcomptype()
            data = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise InputError(f"{path}: not a PCM WAV file ({exc or 'truncated header'})") from exc
    if comp != "NONE" or width != 2:
        raise InputError(f"{path}: expected 16-bit PCM, got sample width {width * 8} bits ({comp})")
    if channels != 1:
        raise InputError(f"{path}: expected mono audio, got {channels} channels")
    if rate != SAMPLE_RATE:
        raise ConfigurationError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    return AudioBuffer(np.frombuffer(data, dtype="<i2").astype(np.int16))


def write_wav(path: str | Path, audio: AudioBuffer) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(audio.samples.astype("<i2").tobytes())
