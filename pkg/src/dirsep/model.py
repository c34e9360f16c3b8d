"""The time-domain masking separator.

Directed variant: encoder -> profile conditioning (concat + projection)
-> dilated TCN mask estimator -> mask, decode, overlap-add. The
undirected variant is the same network minus the conditioning stage;
masks are then estimated from and applied to the encoder features.

All forward math runs through the autodiff engine so the training loop
gets gradients for free; inference wraps the same code in no_grad().
Feature tensors are (frames, channels) or (batch, frames, channels).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .audio import ChunkPlan, Waveform, overlap_add_frames, segment
from .autodiff import Tensor
from .cluster import discover
from .embed import EmbedderConfig, SpeakerProfiles
from .fileio import atomic_write
from .seeding import child_rng

CHECKPOINT_MAGIC = b"DSSCKPT1"
MODEL_VERSION = "dss-1"


@dataclass
class TcnConfig:
    blocks_per_repeat: int = 4
    repeats: int = 2
    kernel_size: int = 3
    hidden_channels: int = 32
    dilation_base: int = 2


@dataclass
class SeparatorConfig:
    frame_len: int = 16
    hop: int = 8
    encoder_dim: int = 64
    adapt_dim: int = 64
    embed_dim: int = 16
    num_speakers: int = 2
    conditioned: bool = True
    tcn: TcnConfig = field(default_factory=TcnConfig)

    def __post_init__(self):
        if isinstance(self.tcn, dict):
            self.tcn = TcnConfig(**self.tcn)
        for name in ("frame_len", "hop", "encoder_dim", "adapt_dim",
                     "embed_dim", "num_speakers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hop > self.frame_len:
            raise ValueError("hop must not exceed frame_len")

    @property
    def adapt_in_dim(self) -> int:
        """Conditioning input width: encoder features plus all profiles."""
        return self.encoder_dim + self.num_speakers * self.embed_dim

    @property
    def mask_dim(self) -> int:
        """Width of the features the masks act on."""
        return self.adapt_dim if self.conditioned else self.encoder_dim

    def receptive_field_frames(self) -> int:
        total_dilation = sum(
            self.tcn.dilation_base ** b
            for _ in range(self.tcn.repeats)
            for b in range(self.tcn.blocks_per_repeat)
        )
        return 1 + (self.tcn.kernel_size - 1) * total_dilation


class SeparatorModel:
    """Parameter store plus architecture config; version-tagged."""

    def __init__(self, config: SeparatorConfig, params: dict, version: str = MODEL_VERSION):
        self.config = config
        self.params = params
        self.version = version

    @classmethod
    def init(cls, config: SeparatorConfig, seed: int = 0) -> "SeparatorModel":
        rng = child_rng(seed, "separator-init")

        def mk(shape, fan_in):
            data = rng.standard_normal(shape) / np.sqrt(fan_in)
            return Tensor(data.astype(np.float32), requires_grad=True)

        c = config
        params = {"encoder_basis": mk((c.frame_len, c.encoder_dim), c.frame_len)}
        if c.conditioned:
            params["adapt_weights"] = mk((c.adapt_in_dim, c.adapt_dim), c.adapt_in_dim)
        d, h, k = c.mask_dim, c.tcn.hidden_channels, c.tcn.kernel_size
        for r in range(c.tcn.repeats):
            for b in range(c.tcn.blocks_per_repeat):
                p = f"tcn.{r}.{b}."
                params[p + "in.w"] = mk((1, d, h), d)
                params[p + "in.b"] = Tensor(np.zeros(h, np.float32), requires_grad=True)
                params[p + "dil.w"] = mk((k, h, h), k * h)
                params[p + "dil.b"] = Tensor(np.zeros(h, np.float32), requires_grad=True)
                params[p + "out.w"] = mk((1, h, d), h)
                params[p + "out.b"] = Tensor(np.zeros(d, np.float32), requires_grad=True)
        params["mask_head.w"] = mk((1, d, c.num_speakers * d), d)
        params["mask_head.b"] = Tensor(np.zeros(c.num_speakers * d, np.float32),
                                       requires_grad=True)
        params["decoder_basis"] = mk((d, c.frame_len), d)
        return cls(config, params)

    def parameters(self):
        return list(self.params.values())

    # ------------------------------------------------------------- storage

    def save(self, path) -> None:
        config_blob = json.dumps(asdict(self.config) | {"version": self.version},
                                 sort_keys=True).encode()
        with atomic_write(path) as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(config_blob)))
            fh.write(config_blob)
            fh.write(struct.pack("<I", len(self.params)))
            for name in sorted(self.params):
                data = self.params[name].data
                encoded = name.encode()
                fh.write(struct.pack("<H", len(encoded)))
                fh.write(encoded)
                fh.write(struct.pack("<B", data.ndim))
                fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
                fh.write(data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "SeparatorModel":
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a separator checkpoint")
            (config_len,) = struct.unpack("<I", fh.read(4))
            blob = json.loads(fh.read(config_len).decode())
            version = blob.pop("version", MODEL_VERSION)
            config = SeparatorConfig(**blob)
            (count,) = struct.unpack("<I", fh.read(4))
            params = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<H", fh.read(2))
                name = fh.read(name_len).decode()
                (ndim,) = struct.unpack("<B", fh.read(1))
                shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
                size = int(np.prod(shape)) if ndim else 1
                data = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape)
                params[name] = Tensor(data.copy(), requires_grad=True)
        return cls(config, params, version)


# ------------------------------------------------------------ forward path


def encode(segments, model: SeparatorModel):
    """Nonnegative encoder features: relu(frames @ basis)."""
    x = segments if isinstance(segments, Tensor) else Tensor(np.asarray(segments, np.float32))
    if x.shape[-1] != model.config.frame_len:
        raise ValueError(f"segment length {x.shape[-1]} != frame_len {model.config.frame_len}")
    return ad.relu(ad.matmul(x, model.params["encoder_basis"]))


def adapt(features, profiles, model: SeparatorModel):
    """Concatenate every speaker profile onto each frame and project.

    features: (..., T, E); profiles: (N, K) or batched (B, N, K). The
    projection weights hold one row block per concatenated input
    (encoder features, then each profile slot); because profiles are
    constant across frames, their blocks are applied once per recording
    and broadcast-added, which is algebraically the same as the full
    concat-then-multiply and keeps the per-slot contributions
    order-commutative.
    """
    c = model.config
    if not c.conditioned:
        raise ValueError("adapt stage requires a conditioned model")
    f = features if isinstance(features, Tensor) else Tensor(np.asarray(features, np.float32))
    batched = len(f.shape) == 3
    mat = profiles.profiles if isinstance(profiles, SpeakerProfiles) else profiles
    mat = np.asarray(mat, dtype=np.float32)
    expect = (c.num_speakers, c.embed_dim)
    if mat.ndim == 2:
        if mat.shape != expect:
            raise ValueError(f"profiles shape {mat.shape} != {expect}")
    elif mat.ndim == 3 and batched:
        if mat.shape[1:] != expect or mat.shape[0] != f.shape[0]:
            raise ValueError(f"batched profiles shape {mat.shape} mismatched")
    else:
        raise ValueError(f"cannot combine profiles {mat.shape} with features {f.shape}")

    w = model.params["adapt_weights"]
    e, k = c.encoder_dim, c.embed_dim
    projected = ad.matmul(f, ad.slice_rows(w, 0, e))
    cond = None
    for j in range(c.num_speakers):
        block = ad.slice_rows(w, e + j * k, e + (j + 1) * k)
        z_j = Tensor(np.ascontiguousarray(mat[..., j, :]))
        term = ad.matmul(z_j, block)  # (D,) or (B, D)
        cond = term if cond is None else ad.add(cond, term)
    cond = ad.reshape(cond, cond.shape[:-1] + (1, cond.shape[-1]))
    return ad.relu(ad.add(projected, cond))


def estimate_masks(directional, model: SeparatorModel):
    """Dilated-TCN mask estimation; output (..., T, N, mask_dim) in [0, 1]."""
    c = model.config
    h = directional if isinstance(directional, Tensor) else Tensor(np.asarray(directional, np.float32))
    if h.shape[-1] != c.mask_dim:
        raise ValueError(f"feature width {h.shape[-1]} != mask_dim {c.mask_dim}")
    p = model.params
    for r in range(c.tcn.repeats):
        for b in range(c.tcn.blocks_per_repeat):
            d = c.tcn.dilation_base ** b
            pre = f"tcn.{r}.{b}."
            y = ad.relu(ad.conv1d(h, p[pre + "in.w"], p[pre + "in.b"], dilation=1))
            y = ad.relu(ad.conv1d(y, p[pre + "dil.w"], p[pre + "dil.b"], dilation=d))
            y = ad.conv1d(y, p[pre + "out.w"], p[pre + "out.b"], dilation=1)
            h = ad.add(h, y)
    logits = ad.conv1d(h, p["mask_head.w"], p["mask_head.b"], dilation=1)
    masks = ad.sigmoid(logits)
    t = masks.shape[-2]
    lead = masks.shape[:-2]
    return ad.reshape(masks, lead + (t, c.num_speakers, c.mask_dim))


def apply_and_decode(directional, masks, model: SeparatorModel):
    """Mask the features per source and decode each frame to samples.

    Returns a list of per-source (..., T, frame_len) tensors.
    """
    decoder = model.params["decoder_basis"]
    outs = []
    for j in range(model.config.num_speakers):
        mask_j = ad.take(masks, j, axis=-2)
        masked = ad.mul(directional, mask_j)
        outs.append(ad.matmul(masked, decoder))
    return outs


def forward_frames(segments, profiles, model: SeparatorModel):
    """Frames in, per-source frames out (list of (..., T, L) tensors)."""
    features = encode(segments, model)
    if model.config.conditioned:
        if profiles is None:
            raise ValueError("conditioned model needs speaker profiles")
        directional = adapt(features, profiles, model)
    else:
        directional = features
    masks = estimate_masks(directional, model)
    return apply_and_decode(directional, masks, model)


def forward_chunk(chunk: Waveform, profiles, model: SeparatorModel):
    """Separate one chunk; channel j follows profile j for the directed model."""
    seg = segment(chunk, model.config.frame_len, model.config.hop)
    with ad.no_grad():
        frame_sets = forward_frames(seg.segments, profiles, model)
        outs = [ad.overlap_add_rows(fs, seg.hop, seg.origin_length) for fs in frame_sets]
    return [Waveform(o.data, chunk.sample_rate) for o in outs]


def forward_chunk_graph(chunks: np.ndarray, profiles, model: SeparatorModel):
    """Differentiable batched forward: (B, S) samples -> list of (B, S).

    profiles: (B, N, K) array, one profile set per batch item (ignored by
    the undirected model).
    """
    chunks = np.asarray(chunks, dtype=np.float32)
    b, s = chunks.shape
    c = model.config
    t = 1 if s <= c.frame_len else int(np.ceil((s - c.frame_len) / c.hop)) + 1
    padded = np.zeros((b, (t - 1) * c.hop + c.frame_len), dtype=np.float32)
    padded[:, :s] = chunks
    idx = np.arange(c.frame_len)[None, :] + c.hop * np.arange(t)[:, None]
    frames = padded[:, idx]
    prof = None
    if c.conditioned:
        prof = np.asarray(profiles, dtype=np.float32)
        if prof.shape != (b, c.num_speakers, c.embed_dim):
            raise ValueError(f"batched profiles must be {(b, c.num_speakers, c.embed_dim)}")
    frame_sets = forward_frames(Tensor(frames), prof, model)
    return [ad.overlap_add_rows(fs, c.hop, s) for fs in frame_sets]


def separate_recording(recording: Waveform, model: SeparatorModel,
                       embedder: EmbedderConfig, plan: ChunkPlan = None,
                       max_clusters: int = 6, seed: int = 0,
                       profiles: SpeakerProfiles = None):
    """Directed separation of a full recording.

    Profiles are discovered once (or passed in) and reused for every
    chunk; chunk outputs are concatenated per channel, no stitching.
    Returns (waveforms, profiles).
    """
    if not model.config.conditioned:
        raise ValueError("separate_recording drives the directed model; "
                         "use the stitcher for the undirected one")
    from .audio import plan_chunks

    if plan is None:
        plan = plan_chunks(recording, 8.0, 0.0)
    if plan.chunk_overlap_s != 0:
        raise ValueError("directed separation uses non-overlapping chunks")
    if profiles is None:
        profiles, _ = discover(recording, embedder, model.config.num_speakers,
                               max_clusters, seed)
    pieces = [[] for _ in range(model.config.num_speakers)]
    for start, end in plan.boundaries:
        outs = forward_chunk(recording.slice_samples(start, end), profiles, model)
        for j, wav in enumerate(outs):
            pieces[j].append(wav.samples)
    merged = [Waveform(np.concatenate(p), recording.sample_rate) for p in pieces]
    return merged, profiles


def separate_chunks(recording: Waveform, model: SeparatorModel, plan: ChunkPlan,
                    profiles: SpeakerProfiles = None):
    """Per-chunk separation (list over chunks of per-source Waveforms)."""
    out = []
    for start, end in plan.boundaries:
        chunk = recording.slice_samples(start, end)
        out.append(forward_chunk(chunk, profiles, model))
    return out


# -------------------------------------------------- wiring-check surgery


def duplicate_profile_blocks(model: SeparatorModel) -> SeparatorModel:
    """Copy of the model whose conditioning rows for every profile slot
    equal slot 0's rows; such a model cannot tell profile orders apart."""
    c = model.config
    if not c.conditioned:
        raise ValueError("only the conditioned model has profile blocks")
    params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in model.params.items()}
    w = params["adapt_weights"].data
    e, k = c.encoder_dim, c.embed_dim
    for j in range(1, c.num_speakers):
        w[e + j * k:e + (j + 1) * k] = w[e:e + k]
    return SeparatorModel(c, params, model.version)


def swap_output_groups(model: SeparatorModel) -> SeparatorModel:
    """Copy of the model with mask-head output groups 0 and 1 exchanged."""
    c = model.config
    if c.num_speakers != 2:
        raise ValueError("output-group swap is defined for two speakers")
    params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in model.params.items()}
    d = c.mask_dim
    for name in ("mask_head.w", "mask_head.b"):
        data = params[name].data
        g0 = data[..., :d].copy()
        data[..., :d] = data[..., d:2 * d]
        data[..., d:2 * d] = g0
    return SeparatorModel(c, params, model.version)
