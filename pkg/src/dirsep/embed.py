"""Frame-level speaker embeddings.

The pipeline only needs *an* embedding function that maps equal speakers
close together; any model can be plugged in through register_embedder.
The built-in reference embedder is a deterministic function of the
samples: per frame it computes log-filterbank shape and modulation
statistics plus spectral-centroid and autocorrelation pitch features,
then projects them through a fixed random affine map to the target
dimension and L2-normalizes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .audio import Waveform
from .fileio import atomic_write
from .seeding import child_rng
from .validation import check_embedding_matrix, check_non_negative

_PROJECTION_SEED = 271828


@dataclass
class EmbedderConfig:
    kind: str = "spectral"
    dim_k: int = 16
    frame_duration_s: float = 0.5
    frame_hop_s: float = 0.5
    n_filters: int = 20
    fft_size: int = 256

    def __post_init__(self):
        if self.dim_k < 2:
            raise ValueError("dim_k must be >= 2")
        if self.frame_hop_s > self.frame_duration_s:
            raise ValueError("frame_hop_s must not exceed frame_duration_s")


@dataclass
class FrameEmbeddings:
    """(num_frames, dim) unit-norm rows plus the frame timing used."""

    vectors: np.ndarray
    frame_duration_s: float
    frame_hop_s: float

    def __post_init__(self):
        self.vectors = check_embedding_matrix(self.vectors)

    @property
    def num_frames(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class SpeakerProfiles:
    """Recording-level speaker embeddings ordered by source-cluster size.

    Stored in float64: profiles are tiny and the mean-pooling contract is
    checked at tolerances below float32 resolution.
    """

    profiles: np.ndarray
    cardinalities: list = field(default_factory=list)

    def __post_init__(self):
        self.profiles = check_embedding_matrix(self.profiles, "profiles", dtype=np.float64)

    @property
    def num_speakers(self) -> int:
        return self.profiles.shape[0]


def _mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_inv(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def _filterbank(n_filters: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular mel-spaced filters over the rfft bins."""
    n_bins = fft_size // 2 + 1
    edges_hz = _mel_inv(np.linspace(_mel(0.0), _mel(sample_rate / 2.0), n_filters + 2))
    bin_hz = np.arange(n_bins) * sample_rate / fft_size
    bank = np.zeros((n_filters, n_bins))
    for i in range(n_filters):
        lo, mid, hi = edges_hz[i], edges_hz[i + 1], edges_hz[i + 2]
        up = (bin_hz - lo) / max(mid - lo, 1e-9)
        down = (hi - bin_hz) / max(hi - mid, 1e-9)
        bank[i] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def _frame_features(frame: np.ndarray, sample_rate: int, config: EmbedderConfig,
                    bank: np.ndarray) -> np.ndarray:
    nfft = config.fft_size
    hop = nfft // 2
    n = len(frame)
    if n < nfft:
        windows = np.zeros((1, nfft))
        windows[0, :n] = frame
    else:
        count = 1 + (n - nfft) // hop
        idx = np.arange(nfft)[None, :] + hop * np.arange(count)[:, None]
        windows = frame[idx]
    windows = windows * np.hanning(nfft)
    power = np.abs(np.fft.rfft(windows, axis=1)) ** 2
    fb = power @ bank.T
    logfb = np.log(fb + 1e-10)
    fb_mean = logfb.mean(axis=0)
    fb_shape = fb_mean - fb_mean.mean()
    fb_std = logfb.std(axis=0)

    bin_hz = np.arange(power.shape[1]) * sample_rate / nfft
    total = power.sum(axis=1)
    centroid = np.where(total > 1e-12, (power * bin_hz).sum(axis=1) / np.maximum(total, 1e-12), 0.0)
    centroid_khz = centroid.mean() / 1000.0

    # pitch proxy from the full-frame autocorrelation over the speech f0 range
    pad = int(2 ** np.ceil(np.log2(2 * n)))
    spec = np.abs(np.fft.rfft(frame, pad)) ** 2
    acorr = np.fft.irfft(spec)[:n]
    lag_lo, lag_hi = sample_rate // 400, sample_rate // 60
    lag_hi = min(lag_hi, n - 1)
    if acorr[0] > 1e-12 and lag_hi > lag_lo:
        seg = acorr[lag_lo:lag_hi + 1] / acorr[0]
        best = int(np.argmax(seg))
        voicing = float(seg[best])
        f0 = sample_rate / (lag_lo + best)
        pitch = float(np.log2(f0 / 100.0))
    else:
        voicing = 0.0
        pitch = 0.0

    return np.concatenate([fb_shape, fb_std, [centroid_khz, pitch, voicing]])


def _spectral_embed(waveform: Waveform, config: EmbedderConfig) -> np.ndarray:
    sr = waveform.sample_rate
    flen = int(round(config.frame_duration_s * sr))
    fhop = int(round(config.frame_hop_s * sr))
    n = len(waveform)
    if n < flen:
        raise ValueError(f"waveform shorter than one frame ({n} < {flen} samples)")
    count = 1 + (n - flen) // fhop
    bank = _filterbank(config.n_filters, config.fft_size, sr)
    n_feat = 2 * config.n_filters + 3
    rng = child_rng(_PROJECTION_SEED, "projection", n_feat, config.dim_k)
    projection = rng.standard_normal((n_feat, config.dim_k)) / np.sqrt(n_feat)
    bias = 0.05 * rng.standard_normal(config.dim_k)

    out = np.empty((count, config.dim_k), dtype=np.float64)
    samples = waveform.samples.astype(np.float64)
    for i in range(count):
        feat = _frame_features(samples[i * fhop:i * fhop + flen], sr, config, bank)
        out[i] = feat @ projection + bias
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    out = out / np.maximum(norms, 1e-12)
    return out.astype(np.float32)


EMBEDDERS = {"spectral": _spectral_embed}


def register_embedder(kind: str, fn) -> None:
    """Register a callable (waveform, config) -> (num_frames, dim) array."""
    EMBEDDERS[kind] = fn


def embed_frames(waveform: Waveform, config: EmbedderConfig) -> FrameEmbeddings:
    """Extract one unit-norm embedding per frame."""
    try:
        fn = EMBEDDERS[config.kind]
    except KeyError:
        raise ValueError(f"unknown embedder kind {config.kind!r}") from None
    vectors = fn(waveform, config)
    vectors = check_embedding_matrix(vectors)
    if vectors.shape[1] != config.dim_k:
        raise ValueError(f"embedder produced dim {vectors.shape[1]}, config says {config.dim_k}")
    return FrameEmbeddings(vectors, config.frame_duration_s, config.frame_hop_s)


def add_gaussian_noise(embeddings, sigma: float, seed: int):
    """Perturb each component with N(0, sigma^2), then re-normalize rows.

    Accepts FrameEmbeddings or SpeakerProfiles and returns the same type.
    sigma == 0 returns an unchanged copy.
    """
    check_non_negative(sigma, "sigma")
    if isinstance(embeddings, FrameEmbeddings):
        matrix = embeddings.vectors
    elif isinstance(embeddings, SpeakerProfiles):
        matrix = embeddings.profiles
    else:
        raise TypeError(f"unsupported type {type(embeddings).__name__}")
    if sigma == 0.0:
        noisy = matrix.copy()
    else:
        rng = child_rng(seed, "embedding-noise")
        noisy = matrix + rng.normal(0.0, sigma, size=matrix.shape).astype(matrix.dtype)
        norms = np.linalg.norm(noisy, axis=1, keepdims=True)
        noisy = (noisy / np.maximum(norms, 1e-12)).astype(matrix.dtype)
    if isinstance(embeddings, FrameEmbeddings):
        return replace(embeddings, vectors=noisy)
    return replace(embeddings, profiles=noisy)


def dump_matrix(path, matrix: np.ndarray) -> None:
    """Flat binary dump: two little-endian int32 (rows, cols), then
    row-major little-endian float32 data."""
    m = check_embedding_matrix(matrix, "matrix")
    with atomic_write(path) as fh:
        fh.write(struct.pack("<ii", m.shape[0], m.shape[1]))
        fh.write(m.astype("<f4").tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        rows, cols = struct.unpack("<ii", header)
        data = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4")
    return data.reshape(rows, cols).copy()
