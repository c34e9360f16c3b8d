"""Audio I/O, framing, chunk planning and overlap-add reconstruction.

All audio is mono float32 in [-1, 1] at a caller-supplied sample rate
(8 kHz by default everywhere in this package). Frames are rows of a
(num_frames, frame_len) matrix; the tail frame is zero-padded so that
segment -> overlap_add round trips are lossless.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .fileio import atomic_write
from .validation import check_sample_rate, check_samples

DEFAULT_SAMPLE_RATE = 8000

_PCM16_SCALE = 32768.0  # 2**15
_PCM16_MAX = 1.0 - 1.0 / _PCM16_SCALE


@dataclass
class Waveform:
    """Mono sample buffer plus its sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = check_samples(self.samples)
        self.sample_rate = check_sample_rate(self.sample_rate)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def slice_samples(self, start: int, end: int) -> "Waveform":
        return Waveform(self.samples[start:end].copy(), self.sample_rate)


@dataclass
class SegmentMatrix:
    """Overlapping frames of one chunk: (num_frames, frame_len) rows."""

    segments: np.ndarray
    hop: int
    origin_length: int

    def __post_init__(self):
        self.segments = np.ascontiguousarray(self.segments, dtype=np.float32)
        if self.segments.ndim != 2:
            raise ValueError("segments must be 2-D")
        if not 1 <= self.hop <= self.segments.shape[1]:
            raise ValueError(f"hop must be in [1, frame_len], got {self.hop}")

    @property
    def num_frames(self) -> int:
        return self.segments.shape[0]

    @property
    def frame_len(self) -> int:
        return self.segments.shape[1]


@dataclass
class ChunkPlan:
    """Chunk boundaries covering a recording, in samples."""

    chunk_length_s: float
    chunk_overlap_s: float
    boundaries: list = field(default_factory=list)

    @property
    def num_chunks(self) -> int:
        return len(self.boundaries)


def read_wav(path, channel: int = 0) -> Waveform:
    """Read a RIFF/WAVE file into a normalized mono Waveform.

    Accepts 16/32-bit integer PCM and 32-bit float payloads. Integer
    samples are scaled to [-1, 1]; for multichannel files `channel`
    selects the channel to keep.
    """
    sample_rate, data = wavfile.read(path)
    if data.size == 0:
        raise ValueError(f"{path}: zero-length payload")
    if data.ndim == 2:
        if not 0 <= channel < data.shape[1]:
            raise ValueError(f"{path}: channel {channel} out of range")
        data = data[:, channel]
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / _PCM16_SCALE
    elif data.dtype == np.int32:
        samples = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float32)
    else:
        raise ValueError(f"{path}: unsupported sample encoding {data.dtype}")
    return Waveform(samples, int(sample_rate))


def write_wav(waveform: Waveform, path) -> None:
    """Write 16-bit PCM mono. Values are clamped to [-1, 1 - 2^-15]."""
    samples = check_samples(waveform.samples, "waveform.samples")
    clipped = np.clip(samples, -1.0, _PCM16_MAX)
    pcm = np.rint(clipped.astype(np.float64) * _PCM16_SCALE).astype(np.int16)
    with atomic_write(path) as fh:
        wavfile.write(fh, waveform.sample_rate, pcm)


def quantize_roundtrip(samples: np.ndarray) -> np.ndarray:
    """Apply the write_wav 16-bit quantization without touching disk."""
    clipped = np.clip(samples, -1.0, _PCM16_MAX)
    pcm = np.rint(clipped.astype(np.float64) * _PCM16_SCALE).astype(np.int16)
    return pcm.astype(np.float32) / _PCM16_SCALE


def num_frames(origin_length: int, frame_len: int, hop: int) -> int:
    """Frame count covering origin_length with a zero-padded tail."""
    if origin_length <= frame_len:
        return 1
    return int(np.ceil((origin_length - frame_len) / hop)) + 1


def segment(waveform: Waveform, frame_len: int, hop: int) -> SegmentMatrix:
    """Slice a waveform into overlapping frames of frame_len every hop samples."""
    samples = waveform.samples
    if len(samples) == 0:
        raise ValueError("cannot segment an empty waveform")
    if frame_len < 1:
        raise ValueError(f"frame_len must be >= 1, got {frame_len}")
    if not 1 <= hop <= frame_len:
        raise ValueError(f"hop must be in [1, frame_len], got hop={hop} frame_len={frame_len}")
    n = len(samples)
    t = num_frames(n, frame_len, hop)
    padded_len = (t - 1) * hop + frame_len
    padded = np.zeros(padded_len, dtype=np.float32)
    padded[:n] = samples
    idx = np.arange(frame_len)[None, :] + hop * np.arange(t)[:, None]
    return SegmentMatrix(padded[idx], hop=hop, origin_length=n)


def frame_index_matrix(t: int, frame_len: int, hop: int) -> np.ndarray:
    """Index matrix mapping frame rows back to padded sample positions."""
    return np.arange(frame_len)[None, :] + hop * np.arange(t)[:, None]


def overlap_add_frames(frames: np.ndarray, hop: int, origin_length: int,
                       normalize: bool = False) -> np.ndarray:
    """Overlap-add rows of (..., num_frames, frame_len) into (..., origin_length).

    Raw mode sums overlapping contributions; normalized mode divides each
    output sample by its coverage count. Accumulation is float64 so the
    hop == frame_len case is bit-exact after the cast back to float32.
    """
    frames = np.asarray(frames)
    t, frame_len = frames.shape[-2], frames.shape[-1]
    lead = frames.shape[:-2]
    padded_len = (t - 1) * hop + frame_len
    out = np.zeros(lead + (padded_len,), dtype=np.float64)
    # Frames within one phase are spaced phases*hop >= frame_len apart,
    # so each phase scatter is overlap-free and fully vectorized.
    phases = int(np.ceil(frame_len / hop))
    coverage = np.zeros(padded_len, dtype=np.float64) if normalize else None
    for p in range(phases):
        sub = frames[..., p::phases, :]
        tp = sub.shape[-2]
        if tp == 0:
            continue
        starts = (p + phases * np.arange(tp)) * hop
        idx = starts[:, None] + np.arange(frame_len)[None, :]
        flat_idx = idx.ravel()
        out[..., flat_idx] += sub.reshape(lead + (-1,))
        if normalize:
            coverage[flat_idx] += 1.0
    if normalize:
        out = out / coverage
    return out[..., :origin_length].astype(np.float32)


def overlap_add(segments: SegmentMatrix, normalize: bool = False,
                sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    samples = overlap_add_frames(segments.segments, segments.hop,
                                 segments.origin_length, normalize=normalize)
    return Waveform(samples, sample_rate)


def plan_chunks(waveform: Waveform, chunk_s: float, overlap_s: float = 0.0) -> ChunkPlan:
    """Plan chunk boundaries covering the whole recording.

    Starts advance by (chunk_s - overlap_s); generation stops as soon as a
    chunk reaches the end of the recording, so the final chunk may be
    shorter but never degenerate. A recording shorter than one chunk gets
    a single chunk covering all of it.
    """
    if not chunk_s > overlap_s >= 0:
        raise ValueError(f"need chunk_s > overlap_s >= 0, got {chunk_s}, {overlap_s}")
    n = len(waveform)
    if n == 0:
        raise ValueError("cannot plan chunks for an empty waveform")
    sr = waveform.sample_rate
    chunk_len = int(round(chunk_s * sr))
    step = int(round((chunk_s - overlap_s) * sr))
    if step < 1:
        raise ValueError("chunk step is below one sample")
    boundaries = []
    start = 0
    while True:
        end = min(start + chunk_len, n)
        boundaries.append((start, end))
        if end >= n:
            break
        start += step
    return ChunkPlan(chunk_length_s=chunk_s, chunk_overlap_s=overlap_s,
                     boundaries=boundaries)
