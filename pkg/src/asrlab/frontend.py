"""Audio frontend: WAV loading, 80-dim log-mel features, CMVN, SpecAugment
masking, speed perturbation, and a deterministic synthetic toy corpus.

Conventions (fixed): 16 kHz mono PCM16 input, 25 ms frames (400 samples),
10 ms hop (160 samples), 512-point FFT, Hann window, 80 HTK-mel triangular
filters spanning 20 Hz to 8 kHz, natural log with floor 1e-10.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16_000
FRAME_LENGTH = 400
FRAME_SHIFT = 160
NUM_FFT = 512
NUM_MELS = 80
MEL_FMIN = 20.0
MEL_FMAX = 8000.0
LOG_FLOOR = 1e-10

CACHE_MAGIC = b"MEL1"


class AudioFormatError(ValueError):
    """Input audio violates the required RIFF/WAVE PCM16 mono 16 kHz format."""


@dataclass
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int
    id: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise AudioFormatError("waveform is empty")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"sample_rate={self.sample_rate}, expected {SAMPLE_RATE}")
        peak = np.abs(self.samples).max()
        if peak > 1.0 + 1e-6:
            raise AudioFormatError(f"sample magnitude {peak:.4f} exceeds 1")


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # T x 80
    frame_shift_ms: int = 10
    frame_length_ms: int = 25
    normalized: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != NUM_MELS:
            raise ValueError(f"features must be T x {NUM_MELS}, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("features contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class AugmentPolicy:
    speed_factors: tuple[float, ...] = (0.9, 1.0, 1.1)
    freq_masks: int = 2
    freq_mask_max_width: int = 8
    time_masks: int = 2
    time_mask_max_fraction: float = 0.05
    gain_db_range: tuple[float, float] = (-3.0, 3.0)
    enabled: bool = True

    def __post_init__(self):
        if self.freq_mask_max_width > NUM_MELS:
            raise ValueError("freq mask wider than the feature dimension")
        for f in self.speed_factors:
            if not 0.8 <= f <= 1.2:
                raise ValueError(f"speed factor {f} outside [0.8, 1.2]")


def frame_count(num_samples: int) -> int:
    if num_samples < FRAME_LENGTH:
        raise ValueError(f"input of {num_samples} samples is shorter than one frame")
    return (num_samples - FRAME_LENGTH) // FRAME_SHIFT + 1


def load_wav(path) -> Waveform:
    """Read a RIFF/WAVE file, enforcing PCM16 mono 16 kHz."""
    path = Path(path)
    if not path.exists():
        raise AudioFormatError(f"no such file: {path}")
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            n = w.getnframes()
            if channels != 1:
                raise AudioFormatError(f"channels={channels}, expected 1")
            if width != 2:
                raise AudioFormatError(f"sample_width={width}, expected 2 (PCM16)")
            if rate != SAMPLE_RATE:
                raise AudioFormatError(f"sample_rate={rate}, expected {SAMPLE_RATE}")
            raw = w.readframes(n)
    except wave.Error as exc:
        raise AudioFormatError(f"not a valid RIFF/WAVE file: {exc}") from exc
    if len(raw) != 2 * n:
        raise AudioFormatError(f"truncated file: expected {2 * n} payload bytes, got {len(raw)}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=SAMPLE_RATE, id=path.stem)


def save_wav(path, wave_: Waveform) -> None:
    pcm = np.clip(np.round(wave_.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank() -> np.ndarray:
    """80 triangular filters over the 257 FFT bins, HTK mel scale."""
    n_bins = NUM_FFT // 2 + 1
    mel_points = np.linspace(_hz_to_mel(MEL_FMIN), _hz_to_mel(MEL_FMAX), NUM_MELS + 2)
    hz_points = _mel_to_hz(mel_points)
    bin_freqs = np.arange(n_bins) * SAMPLE_RATE / NUM_FFT
    bank = np.zeros((NUM_MELS, n_bins))
    for m in range(NUM_MELS):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        bank[m] = np.maximum(0.0, np.minimum(up, down))
    return bank


_FILTERBANK = mel_filterbank()
_WINDOW = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(FRAME_LENGTH) / FRAME_LENGTH)


def log_mel(wave_: Waveform) -> FeatureMatrix:
    """Frame, window, FFT, mel-filter, and log the waveform."""
    x = wave_.samples
    t = frame_count(x.size)
    idx = np.arange(FRAME_LENGTH)[None, :] + FRAME_SHIFT * np.arange(t)[:, None]
    frames = x[idx] * _WINDOW
    spectrum = np.fft.rfft(frames, n=NUM_FFT, axis=1)
    power = np.abs(spectrum) ** 2
    mel = power @ _FILTERBANK.T
    return FeatureMatrix(frames=np.log(np.maximum(mel, LOG_FLOOR)))


@dataclass
class CmvnStats:
    mean: np.ndarray  # (80,)
    var: np.ndarray  # (80,)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != (NUM_MELS,) or self.var.shape != (NUM_MELS,):
            raise ValueError(f"CMVN stats must be ({NUM_MELS},)")
        if (self.var < 1e-8).any():
            raise ValueError("CMVN variance below 1e-8")


def compute_cmvn(feature_list: list[FeatureMatrix]) -> CmvnStats:
    """Global per-dimension mean/variance over a training corpus."""
    stacked = np.concatenate([f.frames for f in feature_list], axis=0)
    var = stacked.var(axis=0)
    return CmvnStats(mean=stacked.mean(axis=0), var=np.maximum(var, 1e-8))


def cmvn(features: FeatureMatrix, stats: CmvnStats) -> FeatureMatrix:
    out = (features.frames - stats.mean) / np.sqrt(stats.var)
    return FeatureMatrix(frames=out, normalized=True)


def spec_augment(features: FeatureMatrix, policy: AugmentPolicy,
                 rng: np.random.Generator) -> FeatureMatrix:
    """Zero out random frequency bands and time spans; deterministic under
    a fixed generator state."""
    if not policy.enabled:
        return features
    if not features.normalized:
        raise ValueError("spec_augment expects normalized features")
    out = features.frames.copy()
    t = out.shape[0]
    for _ in range(policy.freq_masks):
        width = int(rng.integers(0, policy.freq_mask_max_width + 1))
        start = int(rng.integers(0, NUM_MELS - width + 1))
        out[:, start : start + width] = 0.0
    max_t = max(1, int(policy.time_mask_max_fraction * t))
    for _ in range(policy.time_masks):
        width = int(rng.integers(0, max_t + 1))
        start = int(rng.integers(0, t - width + 1))
        out[start : start + width, :] = 0.0
    return FeatureMatrix(frames=out, normalized=True)


def apply_gain(wave_: Waveform, gain_db: float) -> Waveform:
    factor = 10.0 ** (gain_db / 20.0)
    samples = np.clip(wave_.samples * factor, -1.0, 1.0)
    return replace(wave_, samples=samples)


def speed_perturb(wave_: Waveform, factor: float) -> Waveform:
    """Linear-interpolation resampling; output length round(N / factor)."""
    if factor not in (0.9, 1.0, 1.1):
        raise ValueError(f"speed factor {factor} not in {{0.9, 1.0, 1.1}}")
    if factor == 1.0:
        return wave_
    n = wave_.samples.size
    out_len = int(round(n / factor))
    positions = np.arange(out_len) * factor
    positions = np.minimum(positions, n - 1)
    resampled = np.interp(positions, np.arange(n), wave_.samples)
    return replace(wave_, samples=resampled, id=f"{wave_.id}#sp{factor}")


# ---------------------------------------------------------------------------
# feature cache file: magic "MEL1", u32 T, u32 dim, then row-major f32 LE


def save_features(path, features: FeatureMatrix) -> None:
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", features.num_frames, NUM_MELS))
        fh.write(features.frames.astype("<f4").tobytes())


def load_features(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CACHE_MAGIC:
            raise ValueError(f"bad feature cache magic: {magic!r}")
        t, dim = struct.unpack("<II", fh.read(8))
        if dim != NUM_MELS:
            raise ValueError(f"feature cache dim {dim}, expected {NUM_MELS}")
        payload = fh.read(4 * t * dim)
        if len(payload) != 4 * t * dim:
            raise ValueError("truncated feature cache")
    frames = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(t, dim)
    return FeatureMatrix(frames=frames)


# ---------------------------------------------------------------------------
# deterministic synthetic toy corpus


@dataclass
class ToneRecipe:
    """Maps each toy-vocabulary word to a fixed tone sequence."""

    word_tones: dict[str, tuple[float, ...]]
    tone_duration_s: float = 0.2
    gap_duration_s: float = 0.05
    amplitude: float = 0.3
    noise_snr_db: float | None = None  # None disables additive noise

    def __post_init__(self):
        if self.noise_snr_db is not None and self.noise_snr_db < 20.0:
            raise ValueError("noise SNR must be >= 20 dB")


def default_recipe(words: list[str]) -> ToneRecipe:
    """One distinct pure tone per word, mel-spaced between 300 Hz and 3400 Hz."""
    mels = np.linspace(_hz_to_mel(300.0), _hz_to_mel(3400.0), len(words))
    freqs = _mel_to_hz(mels)
    return ToneRecipe(word_tones={w: (float(f),) for w, f in zip(words, freqs)})


def synth_utterance(recipe: ToneRecipe, transcript: str, seed: int,
                    utt_id: str = "synth") -> tuple[Waveform, str]:
    """Deterministic waveform for a transcript whose words are all in the
    recipe; returns the waveform and the transcript."""
    words = transcript.split()
    if not words:
        raise ValueError("empty transcript")
    for w in words:
        if w not in recipe.word_tones:
            raise ValueError(f"unknown word in recipe: {w!r}")
    rng = np.random.default_rng(seed)
    tone_n = int(round(recipe.tone_duration_s * SAMPLE_RATE))
    gap_n = int(round(recipe.gap_duration_s * SAMPLE_RATE))
    pieces = [np.zeros(gap_n)]
    t_axis = np.arange(tone_n) / SAMPLE_RATE
    for w in words:
        for freq in recipe.word_tones[w]:
            tone = recipe.amplitude * np.sin(2.0 * np.pi * freq * t_axis)
            # short fade to avoid clicks at segment edges
            ramp = min(80, tone_n // 4)
            env = np.ones(tone_n)
            env[:ramp] = np.linspace(0.0, 1.0, ramp)
            env[-ramp:] = np.linspace(1.0, 0.0, ramp)
            pieces.append(tone * env)
        pieces.append(np.zeros(gap_n))
    samples = np.concatenate(pieces)
    if recipe.noise_snr_db is not None:
        signal_power = float(np.mean(samples**2))
        noise_power = signal_power / (10.0 ** (recipe.noise_snr_db / 10.0))
        samples = samples + rng.normal(0.0, np.sqrt(noise_power), samples.size)
        samples = np.clip(samples, -1.0, 1.0)
    return Waveform(samples=samples, sample_rate=SAMPLE_RATE, id=utt_id), transcript
