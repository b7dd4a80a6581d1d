"""Waveform <-> compressed STFT frame conversion and the task corruption operators.

The frame pipeline is: square-root periodic Hann analysis window, orthonormal
FFT, Nyquist-band drop, magnitude compression |x|^alpha * exp(i*angle(x)).
Analysis left-pads the signal with ``window_len - hop_len`` zeros so that
frame 0 is defined at sample 0 and matches zero-initialized streaming
buffers; synthesis trims the same amount.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import upfirdn

TASKS = ("se", "dereverb", "codec", "bwe", "phase", "mel")

#: Tasks whose corruption operator lives in the frame domain.
FRAME_DOMAIN_TASKS = ("phase", "mel")


class ConfigurationError(ValueError):
    pass


class ExternalToolError(RuntimeError):
    def __init__(self, message: str, exit_status: int):
        super().__init__(message)
        self.exit_status = exit_status


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 512
    hop_len: int = 256
    sample_rate: int = 16000
    compress_alpha: float = 0.5

    def __post_init__(self):
        if self.window_len % 2 != 0 or self.window_len < 4:
            raise ConfigurationError("window_len must be even and >= 4")
        if not (0 < self.hop_len <= self.window_len):
            raise ConfigurationError("hop_len must satisfy 0 < hop <= window_len")
        if self.sample_rate <= 0:
            raise ConfigurationError("sample_rate must be positive")
        if self.compress_alpha <= 0:
            raise ConfigurationError("compress_alpha must be positive")

    @property
    def freq_bins(self) -> int:
        """Bins per frame after the Nyquist drop."""
        return self.window_len // 2

    @property
    def pad(self) -> int:
        """Left zero-padding applied by analysis and trimmed by synthesis."""
        return self.window_len - self.hop_len


def sqrt_hann_window(n: int) -> np.ndarray:
    """Square root of the periodic Hann window: sin(pi*k/n)."""
    return np.sin(np.pi * np.arange(n) / n)


def compress(frames: np.ndarray, alpha: float, probe_mode: bool = False) -> np.ndarray:
    """Magnitude compression z -> |z|^alpha * exp(i*angle(z)); compress(0) = 0.

    In probe mode the zero special-case is skipped so that NaNs seeded by the
    latency probe stay infectious through every arithmetic path.
    """
    mag = np.abs(frames)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = frames * mag ** (alpha - 1.0)
    if not probe_mode:
        out = np.where(mag == 0.0, np.zeros_like(out), out)
    return out


def decompress(frames: np.ndarray, alpha: float, probe_mode: bool = False) -> np.ndarray:
    """Inverse of :func:`compress` (exact for nonzero z; 0 maps to 0)."""
    return compress(frames, 1.0 / alpha, probe_mode=probe_mode)


def _num_frames(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)  # ceil division


def stft_raw(audio: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Orthonormal STFT without compression or Nyquist drop: [T, W/2+1]."""
    audio = np.asarray(audio, dtype=np.float64).reshape(-1)
    w, h = cfg.window_len, cfg.hop_len
    n = _num_frames(audio.shape[0], h)
    if n == 0:
        return np.zeros((0, w // 2 + 1), dtype=np.complex128)
    padded = np.concatenate([np.zeros(cfg.pad), audio, np.zeros(n * h - audio.shape[0])])
    frames = np.lib.stride_tricks.sliding_window_view(padded, w)[::h][:n]
    return np.fft.rfft(frames * sqrt_hann_window(w), norm="ortho", axis=-1)


def stft_analyze(audio: np.ndarray, cfg: StftConfig, probe_mode: bool = False) -> np.ndarray:
    """Waveform -> compressed complex frames of shape [T, W/2].

    Frame t depends only on input samples up to t*hop + window - 1 (in fact
    only up to t*hop + hop - 1 with the left padding used here).
    """
    raw = stft_raw(audio, cfg)
    return compress(raw[:, : cfg.freq_bins], cfg.compress_alpha, probe_mode=probe_mode)


def istft_synthesize(frames: np.ndarray, cfg: StftConfig, probe_mode: bool = False) -> np.ndarray:
    """Compressed frames -> waveform of length T*hop (overlap-add, left trim)."""
    frames = np.asarray(frames)
    w, h = cfg.window_len, cfg.hop_len
    if frames.ndim != 2 or frames.shape[1] != cfg.freq_bins:
        raise ValueError(f"expected frames of shape [T, {cfg.freq_bins}], got {frames.shape}")
    t = frames.shape[0]
    if t == 0:
        return np.zeros(0)
    full = np.concatenate(
        [decompress(frames, cfg.compress_alpha, probe_mode=probe_mode), np.zeros((t, 1), dtype=frames.dtype)],
        axis=1,
    )
    segs = np.fft.irfft(full, n=w, norm="ortho", axis=-1) * sqrt_hann_window(w)
    out = np.zeros((t - 1) * h + w)
    for i in range(t):
        out[i * h : i * h + w] += segs[i]
    return out[cfg.pad : cfg.pad + t * h]


class StreamingAnalyzer:
    """Hop-by-hop STFT analysis; emits frames identical to :func:`stft_analyze`."""

    def __init__(self, cfg: StftConfig, probe_mode: bool = False):
        self.cfg = cfg
        self.probe_mode = probe_mode
        self._window = sqrt_hann_window(cfg.window_len)
        self._buf = np.zeros(cfg.window_len)

    def push(self, samples: np.ndarray) -> np.ndarray:
        """Consume exactly one hop of samples, return one frame."""
        h = self.cfg.hop_len
        if samples.shape != (h,):
            raise ValueError(f"push expects exactly {h} samples")
        self._buf[:-h] = self._buf[h:]
        self._buf[-h:] = samples
        spec = np.fft.rfft(self._buf * self._window, norm="ortho")
        return compress(spec[: self.cfg.freq_bins], self.cfg.compress_alpha, probe_mode=self.probe_mode)

    def reset(self):
        self._buf[:] = 0.0


class StreamingSynthesizer:
    """Hop-by-hop overlap-add; emits the same sample stream as :func:`istft_synthesize`.

    The first ``window_len - hop_len`` synthesized samples belong to the
    analysis padding and are swallowed, so sample streams line up with the
    input from sample 0.
    """

    def __init__(self, cfg: StftConfig, probe_mode: bool = False):
        self.cfg = cfg
        self.probe_mode = probe_mode
        self._window = sqrt_hann_window(cfg.window_len)
        self._ola = np.zeros(cfg.window_len)
        self._skip = cfg.pad

    def push(self, frame: np.ndarray) -> np.ndarray:
        """Consume one frame, return the newly completed samples (<= one hop)."""
        cfg = self.cfg
        if frame.shape != (cfg.freq_bins,):
            raise ValueError(f"push expects a frame of {cfg.freq_bins} bins")
        full = np.concatenate([decompress(frame, cfg.compress_alpha, probe_mode=self.probe_mode), [0.0]])
        self._ola += np.fft.irfft(full, n=cfg.window_len, norm="ortho") * self._window
        h = cfg.hop_len
        ready = self._ola[:h].copy()
        self._ola[:-h] = self._ola[h:]
        self._ola[-h:] = 0.0
        if self._skip >= h:
            self._skip -= h
            return ready[:0]
        out = ready[self._skip :]
        self._skip = 0
        return out

    def reset(self):
        self._ola[:] = 0.0
        self._skip = self.cfg.pad


def zero_phase(frames: np.ndarray) -> np.ndarray:
    """Replace every bin by its magnitude embedded as a real complex number."""
    return np.abs(frames).astype(np.complex128)


# Mel projection -------------------------------------------------------------

@dataclass(frozen=True)
class MelConfig:
    n_mels: int
    mel_matrix: np.ndarray       # [n_mels, n_stft_bins], nonnegative
    pseudo_inverse: np.ndarray   # [n_stft_bins, n_mels]


def _hz_to_mel(f):
    # Slaney scale: linear below 1 kHz, logarithmic above.
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    logstep = np.log(6.4) / 27.0
    mel = f / f_sp
    above = f >= min_log_hz
    mel = np.where(above, min_log_hz / f_sp + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep, mel)
    return mel


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    f = m * f_sp
    above = m >= min_log_mel
    return np.where(above, min_log_hz * np.exp(logstep * (m - min_log_mel)), f)


def make_mel_config(
    n_mels: int = 80,
    n_stft_bins: int = 257,
    sample_rate: int = 16000,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> MelConfig:
    """Slaney-style triangular filterbank and its Moore-Penrose pseudoinverse.

    Singular values below 1e-8 of the largest are zeroed when forming the
    pseudoinverse.
    """
    if fmax is None:
        fmax = sample_rate / 2.0
    n_fft = 2 * (n_stft_bins - 1)
    fft_freqs = np.arange(n_stft_bins) * (sample_rate / n_fft)
    mel_pts = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    m = np.zeros((n_mels, n_stft_bins))
    for i in range(n_mels):
        lo, ctr, hi = mel_pts[i], mel_pts[i + 1], mel_pts[i + 2]
        up = (fft_freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - ctr, 1e-12)
        m[i] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    pinv = np.linalg.pinv(m, rcond=1e-8)
    return MelConfig(n_mels=n_mels, mel_matrix=m, pseudo_inverse=pinv)


def mel_project(mag_frame: np.ndarray, mel: MelConfig) -> np.ndarray:
    """|pinv(M) (M mag)| embedded as real complex; idempotent on row(M)."""
    mag = np.asarray(mag_frame, dtype=np.float64)
    if mag.shape[-1] != mel.mel_matrix.shape[1]:
        raise ValueError(
            f"expected {mel.mel_matrix.shape[1]} STFT bins, got {mag.shape[-1]}"
        )
    proj = mag @ mel.mel_matrix.T @ mel.pseudo_inverse.T
    return np.abs(proj).astype(np.complex128)


# Polyphase resampling for bandwidth extension -------------------------------

RESAMPLE_TAPS = 64
RESAMPLE_KAISER_BETA = 8.0


def lowpass_kernel(factor: int, taps: int = RESAMPLE_TAPS, beta: float = RESAMPLE_KAISER_BETA) -> np.ndarray:
    """Windowed-sinc lowpass with cutoff at 1/(2*factor) cycles per sample."""
    n = np.arange(taps) - (taps - 1) / 2.0
    h = np.sinc(n / factor) / factor * np.kaiser(taps, beta)
    return h / h.sum() if factor == 1 else h / (h.sum() * 1.0)


def resample_down_up(x: np.ndarray, factor: int) -> np.ndarray:
    """Anti-aliased downsample by ``factor`` then interpolate back; same length.

    The two half-sample filter delays compose to the integer taps-1, which is
    trimmed so the output is time-aligned with the input.
    """
    if factor == 1:
        return np.asarray(x, dtype=np.float64).copy()
    x = np.asarray(x, dtype=np.float64)
    h = lowpass_kernel(factor)
    low = upfirdn(h, x, up=1, down=factor)
    back = upfirdn(h * factor, low, up=factor, down=1)
    delay = RESAMPLE_TAPS - 1
    out = back[delay : delay + x.shape[0]]
    if out.shape[0] < x.shape[0]:
        out = np.concatenate([out, np.zeros(x.shape[0] - out.shape[0])])
    return out


# Corruption operators --------------------------------------------------------

def run_codec_command(command: str, audio: np.ndarray, sample_rate: int) -> np.ndarray:
    """Round-trip audio through an external encoder/decoder command.

    Commands containing ``{in}``/``{out}`` placeholders get temp WAV paths;
    anything else receives raw little-endian PCM16 on stdin and must write
    the decoded raw PCM16 to stdout.
    """
    if "{in}" in command or "{out}" in command:
        with tempfile.TemporaryDirectory(prefix="flowstream_codec_") as td:
            p_in = Path(td) / "in.wav"
            p_out = Path(td) / "out.wav"
            write_wav(p_in, audio, sample_rate)
            argv = [a.replace("{in}", str(p_in)).replace("{out}", str(p_out)) for a in shlex.split(command)]
            proc = subprocess.run(argv, capture_output=True)
            if proc.returncode != 0:
                raise ExternalToolError(
                    f"codec command failed with status {proc.returncode}: {proc.stderr.decode(errors='replace').strip()}",
                    proc.returncode,
                )
            out, rate = read_wav(p_out)
            if rate != sample_rate:
                raise ExternalToolError(f"codec returned {rate} Hz, expected {sample_rate}", 1)
            return out
    pcm = np.clip(np.asarray(audio) * 32768.0, -32768, 32767).astype("<i2").tobytes()
    proc = subprocess.run(shlex.split(command), input=pcm, capture_output=True)
    if proc.returncode != 0:
        raise ExternalToolError(
            f"codec command failed with status {proc.returncode}: {proc.stderr.decode(errors='replace').strip()}",
            proc.returncode,
        )
    return np.frombuffer(proc.stdout, dtype="<i2").astype(np.float64) / 32768.0


def corrupt(
    task: str,
    clean: np.ndarray,
    aux=None,
    rng: np.random.Generator | None = None,
    cfg: StftConfig | None = None,
    mel: MelConfig | None = None,
):
    """Apply one of the six task corruption operators.

    Returns a waveform for se/dereverb/bwe/codec and a compressed frame
    sequence for the frame-domain tasks (phase, mel).
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    clean = np.asarray(clean, dtype=np.float64).reshape(-1)

    if task == "se":
        if aux is None:
            raise ValueError("se corruption needs a noise signal as aux")
        noise = np.asarray(aux, dtype=np.float64).reshape(-1)
        if noise.shape[0] < clean.shape[0]:
            raise ValueError("noise shorter than the clean signal")
        return clean + noise[: clean.shape[0]]

    if task == "dereverb":
        if aux is None:
            raise ValueError("dereverb corruption needs an impulse response as aux")
        rir = np.asarray(aux, dtype=np.float64).reshape(-1)
        return np.convolve(clean, rir)[: clean.shape[0]]

    if task == "bwe":
        factor = int(aux) if aux is not None else 2
        if factor not in (2, 4):
            raise ValueError("bwe downsample factor must be 2 or 4")
        return resample_down_up(clean, factor)

    if task == "codec":
        if not aux:
            raise ValueError("codec corruption needs the external codec command as aux")
        if cfg is None:
            raise ValueError("codec corruption needs an StftConfig for the sample rate")
        return run_codec_command(str(aux), clean, cfg.sample_rate)

    if cfg is None:
        raise ValueError(f"{task} corruption needs an StftConfig")
    if task == "phase":
        return zero_phase(stft_analyze(clean, cfg))

    # mel: project raw magnitudes through the filterbank and its pseudoinverse,
    # then re-enter the compressed/Nyquist-dropped representation.
    if mel is None:
        mel = make_mel_config(n_stft_bins=cfg.window_len // 2 + 1, sample_rate=cfg.sample_rate)
    mags = np.abs(stft_raw(clean, cfg))
    proj = mel_project(mags, mel)
    return compress(proj[:, : cfg.freq_bins], cfg.compress_alpha)


# WAV I/O ----------------------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono PCM16 or float32 WAV as float64 in [-1, 1]."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0, int(rate)
    if data.dtype == np.float32 or data.dtype == np.float64:
        return data.astype(np.float64), int(rate)
    raise ValueError(f"{path}: unsupported sample format {data.dtype}; use PCM16 or float32")


def write_wav(path, audio: np.ndarray, sample_rate: int, fmt: str = "pcm16"):
    audio = np.asarray(audio, dtype=np.float64).reshape(-1)
    if fmt == "pcm16":
        wavfile.write(path, sample_rate, np.clip(audio * 32768.0, -32768, 32767).astype(np.int16))
    elif fmt == "float32":
        wavfile.write(path, sample_rate, audio.astype(np.float32))
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
