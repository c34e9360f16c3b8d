"""Synthetic two-speaker corpora.

Speakers are parametric harmonic voices (f0 + vibrato, parallel formant
resonators, syllabic amplitude modulation). Conversations alternate
turns with pauses and controlled overlap; fully-overlapped pairs mimic
short synthetic mixtures. Mixtures are exact sample-wise sums of the
ground-truth source tracks, and everything is deterministic from one
root seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import DEFAULT_SAMPLE_RATE, Waveform, write_wav
from .fileio import atomic_write
from .seeding import child_rng, child_seed

MANIFEST_FIELDS = ("id", "mixture", "src1", "src2", "sr", "dur_s", "kind", "annot")
KIND_REAL = "real-style"
KIND_OVERLAPPED = "fully-overlapped"


@dataclass
class SpeakerSpec:
    f0: float
    vibrato_rate_hz: float = 5.0
    vibrato_depth_cents: float = 20.0
    formants: tuple = ((500.0, 120.0), (1500.0, 180.0), (2500.0, 250.0))
    attack_ms: float = 15.0
    syllable_rate_hz: float = 3.5
    seed: int = 0

    def __post_init__(self):
        if not 60.0 <= self.f0 <= 400.0:
            raise ValueError(f"f0 must be in [60, 400] Hz, got {self.f0}")


@dataclass
class ConversationSpec:
    duration_s: float
    overlap_ratio: float = 0.1
    turn_mean_s: float = 2.0
    turn_std_s: float = 0.7
    pause_mean_s: float = 0.4
    pause_std_s: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        if not 0.0 <= self.overlap_ratio < 1.0:
            raise ValueError("overlap_ratio must be in [0, 1)")


@dataclass
class ManifestRecord:
    id: str
    mixture: str
    sources: list
    sample_rate: int
    duration_s: float
    kind: str
    annotation: str


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    base_dir: Path = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if p.is_absolute() or self.base_dir is None:
            return p
        return self.base_dir / p

    def save(self, path) -> None:
        path = Path(path)
        with atomic_write(path, "w") as fh:
            for r in self.records:
                fields = {
                    "id": r.id, "mixture": r.mixture,
                    "src1": r.sources[0], "src2": r.sources[1],
                    "sr": r.sample_rate, "dur_s": f"{r.duration_s:g}",
                    "kind": r.kind, "annot": r.annotation,
                }
                fh.write(" ".join(f"{k}={fields[k]}" for k in MANIFEST_FIELDS) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            kv = {}
            for token in line.split():
                if "=" not in token:
                    raise ValueError(f"{path}:{lineno}: malformed token {token!r}")
                key, value = token.split("=", 1)
                if key not in MANIFEST_FIELDS:
                    raise ValueError(f"{path}:{lineno}: unknown field {key!r}")
                kv[key] = value
            missing = set(MANIFEST_FIELDS) - set(kv)
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            records.append(ManifestRecord(
                id=kv["id"], mixture=kv["mixture"],
                sources=[kv["src1"], kv["src2"]],
                sample_rate=int(kv["sr"]), duration_s=float(kv["dur_s"]),
                kind=kv["kind"], annotation=kv["annot"]))
        return cls(records, base_dir=path.parent)


def save_annotations(path, intervals) -> None:
    """intervals: iterable of (speaker_index_1_based, start_s, end_s)."""
    with atomic_write(path, "w") as fh:
        for spk, start, end in intervals:
            fh.write(f"{spk} {start:.6f} {end:.6f}\n")


def load_annotations(path):
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        spk, start, end = line.split()
        out.append((int(spk), float(start), float(end)))
    return out


# ---------------------------------------------------------------- synthesis


def _resonator_coeffs(center_hz, bandwidth_hz, sr):
    r = np.exp(-np.pi * bandwidth_hz / sr)
    theta = 2.0 * np.pi * center_hz / sr
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    b = np.array([1.0 - r])
    return b, a


def _syllable_envelope(n, sr, rate_hz, attack_ms, rng):
    """Released syllable gates: raised-cosine bursts at the syllable rate."""
    env = np.zeros(n)
    attack = max(1, int(attack_ms / 1000.0 * sr))
    pos = 0
    while pos < n:
        period = max(0.08, rng.normal(1.0 / rate_hz, 0.2 / rate_hz))
        on_len = max(attack + 1, int(0.7 * period * sr))
        seg = min(on_len, n - pos)
        burst = np.ones(seg)
        rise = min(attack, seg)
        burst[:rise] = 0.5 * (1 - np.cos(np.pi * np.arange(rise) / rise))
        fall = min(max(1, on_len // 4), seg)
        burst[-fall:] *= 0.5 * (1 + np.cos(np.pi * np.arange(fall) / fall))
        env[pos:pos + seg] = np.maximum(env[pos:pos + seg], burst)
        pos += int(period * sr)
    return env


def synth_utterance(spec: SpeakerSpec, duration_s: float, seed: int,
                    sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Render one utterance of the given speaker; peak-normalized to 0.5."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    sr = sample_rate
    n = int(round(duration_s * sr))
    rng = child_rng(spec.seed, "utterance", seed)
    t = np.arange(n) / sr

    depth = 2.0 ** (spec.vibrato_depth_cents / 1200.0 *
                    np.sin(2 * np.pi * spec.vibrato_rate_hz * t))
    f0_track = spec.f0 * depth
    phase = 2.0 * np.pi * np.cumsum(f0_track) / sr

    source = np.zeros(n)
    h = 1
    while h * spec.f0 * 2.0 ** (spec.vibrato_depth_cents / 1200.0) < sr / 2:
        source += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h
        h += 1

    shaped = np.zeros(n)
    for center, bandwidth in spec.formants:
        if center >= sr / 2:
            raise ValueError(f"formant {center} Hz above Nyquist")
        b, a = _resonator_coeffs(center, bandwidth, sr)
        shaped += lfilter(b, a, source)
    shaped += 0.1 * source

    env = _syllable_envelope(n, sr, spec.syllable_rate_hz, spec.attack_ms, rng)
    out = shaped * env
    peak = np.max(np.abs(out))
    if peak > 0:
        out = 0.5 * out / peak
    return Waveform(out.astype(np.float32), sr)


def _headroom_scale(tracks, limit=0.9):
    """Scale all source tracks by one factor so their sum stays inside
    the 16-bit range; a shared factor keeps mixture additivity exact."""
    peak = float(np.max(np.abs(sum(t.astype(np.float64) for t in tracks))))
    if peak <= limit:
        return tracks
    factor = np.float32(limit / peak)
    return [t * factor for t in tracks]


# ------------------------------------------------------------- conversation


def _plan_turns(conv: ConversationSpec, rng):
    """Alternating turns with pauses/overlaps steered toward the target
    overlap ratio. Returns [(speaker_idx, start_s, end_s), ...]."""
    target_total = conv.overlap_ratio * conv.duration_s
    turns = []
    overlap_total = 0.0
    speaker = int(rng.integers(2))
    now = float(rng.uniform(0.05, 0.3))
    prev_start, prev_end = None, None
    while now < conv.duration_s:
        length = float(np.clip(rng.normal(conv.turn_mean_s, conv.turn_std_s),
                               0.6, 3.0 * conv.turn_mean_s))
        start = now
        if prev_end is not None:
            # chase the remaining overlap budget; never overshoot it by
            # more than a syllable so short conversations stay within
            # tolerance of the target ratio
            deficit = target_total - overlap_total
            if deficit > 0.1 and conv.overlap_ratio > 0:
                ov = float(np.clip(rng.normal(0.5, 0.15), 0.15, 0.9))
                ov = min(ov, deficit + 0.05,
                         0.8 * (prev_end - prev_start), 0.8 * length)
                start = max(prev_end - ov, prev_start + 0.05)
                overlap_total += max(0.0, prev_end - start)
            else:
                pause = float(np.clip(rng.normal(conv.pause_mean_s, conv.pause_std_s),
                                      0.05, 2.0))
                start = prev_end + pause
        end = min(start + length, conv.duration_s)
        if end <= start:
            break
        turns.append((speaker, start, end))
        prev_start, prev_end = start, end
        now = end
        speaker = 1 - speaker
    return turns


def measure_overlap_ratio(intervals, duration_s: float,
                          sample_rate: int = 1000) -> float:
    """Fraction of the recording where both speakers are active, from
    annotations, on a fixed-resolution grid."""
    n = int(round(duration_s * sample_rate))
    active = np.zeros((2, n), dtype=bool)
    for spk, start, end in intervals:
        i0, i1 = int(round(start * sample_rate)), int(round(end * sample_rate))
        active[spk - 1, i0:i1] = True
    return float(np.mean(active[0] & active[1]))


def gen_conversation(spec_a: SpeakerSpec, spec_b: SpeakerSpec,
                     conv: ConversationSpec,
                     sample_rate: int = DEFAULT_SAMPLE_RATE):
    """Render a conversation; returns (mixture, src_a, src_b, annotations).

    The mixture is the exact sample-wise sum of the two source tracks;
    annotations list (speaker 1|2, start_s, end_s) active intervals.
    Raises if the achieved overlap misses the target by more than 3%
    absolute (infeasible turn statistics for the requested ratio).
    """
    rng = child_rng(conv.seed, "turns")
    turns = _plan_turns(conv, rng)
    n = int(round(conv.duration_s * sample_rate))
    tracks = [np.zeros(n, dtype=np.float32), np.zeros(n, dtype=np.float32)]
    specs = (spec_a, spec_b)
    annotations = []
    for idx, (speaker, start, end) in enumerate(turns):
        i0, i1 = int(round(start * sample_rate)), int(round(end * sample_rate))
        i1 = min(i1, n)
        if i1 <= i0:
            continue
        utt = synth_utterance(specs[speaker], (i1 - i0) / sample_rate,
                              seed=child_seed(conv.seed, "turn", idx),
                              sample_rate=sample_rate)
        tracks[speaker][i0:i1] += utt.samples[:i1 - i0]
        annotations.append((speaker + 1, i0 / sample_rate, i1 / sample_rate))

    achieved = measure_overlap_ratio(annotations, conv.duration_s)
    if abs(achieved - conv.overlap_ratio) > 0.03:
        raise ValueError(
            f"infeasible overlap target {conv.overlap_ratio:.3f}: achieved "
            f"{achieved:.3f} with the given turn statistics")
    tracks = _headroom_scale(tracks)
    src_a = Waveform(tracks[0], sample_rate)
    src_b = Waveform(tracks[1], sample_rate)
    mixture = Waveform(tracks[0] + tracks[1], sample_rate)
    return mixture, src_a, src_b, annotations


def gen_full_overlap_pair(spec_a: SpeakerSpec, spec_b: SpeakerSpec,
                          duration_s: float, seed: int,
                          sample_rate: int = DEFAULT_SAMPLE_RATE):
    """Both speakers active for the whole duration, relative gain drawn
    uniformly in [-2.5, 2.5] dB (baked into the second source track)."""
    rng = child_rng(seed, "full-overlap")
    src_a = synth_utterance(spec_a, duration_s, seed=child_seed(seed, "a"),
                            sample_rate=sample_rate)
    src_b = synth_utterance(spec_b, duration_s, seed=child_seed(seed, "b"),
                            sample_rate=sample_rate)
    gain_db = float(rng.uniform(-2.5, 2.5))
    tracks = _headroom_scale(
        [src_a.samples, src_b.samples * np.float32(10.0 ** (gain_db / 20.0))])
    src_a = Waveform(tracks[0], sample_rate)
    src_b = Waveform(tracks[1], sample_rate)
    mixture = Waveform(tracks[0] + tracks[1], sample_rate)
    annotations = [(1, 0.0, duration_s), (2, 0.0, duration_s)]
    return mixture, src_a, src_b, annotations


# ------------------------------------------------------------------- corpus


def sample_speaker_pool(num_speakers: int, seed: int, split: str):
    """Deterministic speaker specs; each split draws from its own stream."""
    rng = child_rng(seed, "speakers", split)
    pool = []
    for i in range(num_speakers):
        f0 = float(rng.uniform(90.0, 280.0))
        formants = tuple(
            (float(rng.uniform(lo, hi)), float(rng.uniform(80.0, 250.0)))
            for lo, hi in ((400.0, 800.0), (1100.0, 1900.0), (2200.0, 3200.0))
        )
        pool.append(SpeakerSpec(
            f0=f0,
            vibrato_rate_hz=float(rng.uniform(4.0, 7.0)),
            vibrato_depth_cents=float(rng.uniform(10.0, 40.0)),
            formants=formants,
            attack_ms=float(rng.uniform(5.0, 30.0)),
            syllable_rate_hz=float(rng.uniform(2.5, 5.0)),
            seed=int(rng.integers(2 ** 31)),
        ))
    return pool


def _pick_pair(pool, rng, min_f0_ratio=1.2, tries=200):
    for _ in range(tries):
        i, j = rng.choice(len(pool), size=2, replace=False)
        hi, lo = max(pool[i].f0, pool[j].f0), min(pool[i].f0, pool[j].f0)
        if hi / lo >= min_f0_ratio:
            return pool[int(i)], pool[int(j)]
    raise ValueError("could not find a speaker pair with distinct enough f0")


def build_corpus(out_dir, num_speakers: int, conversations: int,
                 fully_overlapped: int, seed: int, split: str = "train",
                 duration_s: float = 60.0, overlap_ratio: float = 0.1,
                 overlap_duration_s: float = 10.0,
                 sample_rate: int = DEFAULT_SAMPLE_RATE):
    """Generate one split's corpora and manifests.

    Returns (real_style_manifest, fully_overlapped_manifest). Splits get
    disjoint speaker pools because each split name seeds its own spec
    stream. Paths inside the manifests are relative to out_dir.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool = sample_speaker_pool(num_speakers, seed, split)
    rng = child_rng(seed, "corpus", split)

    real = Manifest(base_dir=out_dir)
    for i in range(conversations):
        spec_a, spec_b = _pick_pair(pool, rng)
        conv = ConversationSpec(duration_s=duration_s, overlap_ratio=overlap_ratio,
                                seed=child_seed(seed, split, "conv", i))
        mixture, src_a, src_b, annotations = gen_conversation(
            spec_a, spec_b, conv, sample_rate)
        rec_id = f"{split}_conv{i:04d}"
        names = {
            "mixture": f"{rec_id}_mix.wav", "src1": f"{rec_id}_src1.wav",
            "src2": f"{rec_id}_src2.wav", "annot": f"{rec_id}_annot.txt",
        }
        write_wav(mixture, out_dir / names["mixture"])
        write_wav(src_a, out_dir / names["src1"])
        write_wav(src_b, out_dir / names["src2"])
        save_annotations(out_dir / names["annot"], annotations)
        real.records.append(ManifestRecord(
            id=rec_id, mixture=names["mixture"],
            sources=[names["src1"], names["src2"]],
            sample_rate=sample_rate, duration_s=duration_s,
            kind=KIND_REAL, annotation=names["annot"]))

    overlapped = Manifest(base_dir=out_dir)
    for i in range(fully_overlapped):
        spec_a, spec_b = _pick_pair(pool, rng)
        mixture, src_a, src_b, annotations = gen_full_overlap_pair(
            spec_a, spec_b, overlap_duration_s,
            seed=child_seed(seed, split, "ovl", i), sample_rate=sample_rate)
        rec_id = f"{split}_ovl{i:04d}"
        names = {
            "mixture": f"{rec_id}_mix.wav", "src1": f"{rec_id}_src1.wav",
            "src2": f"{rec_id}_src2.wav", "annot": f"{rec_id}_annot.txt",
        }
        write_wav(mixture, out_dir / names["mixture"])
        write_wav(src_a, out_dir / names["src1"])
        write_wav(src_b, out_dir / names["src2"])
        save_annotations(out_dir / names["annot"], annotations)
        overlapped.records.append(ManifestRecord(
            id=rec_id, mixture=names["mixture"],
            sources=[names["src1"], names["src2"]],
            sample_rate=sample_rate, duration_s=overlap_duration_s,
            kind=KIND_OVERLAPPED, annotation=names["annot"]))

    real.save(out_dir / f"{split}_real.manifest")
    overlapped.save(out_dir / f"{split}_overlapped.manifest")
    return real, overlapped
