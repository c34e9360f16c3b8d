"""Training: order-consistent loss for the directed separator, PIT loss
for the undirected baseline, profile-to-target alignment, augmentations,
the real/synthetic batch sampler and the training loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .audio import Waveform, read_wav
from .autodiff import Adam, Tensor, backward
from .cluster import discover, pool_top_n
from .corpus import Manifest
from .embed import EmbedderConfig, SpeakerProfiles, add_gaussian_noise, embed_frames
from .fileio import atomic_write
from .metrics import SISDR_EPS, hungarian_assign, pit_loss, si_sdr
from .model import SeparatorModel, forward_chunk_graph
from .seeding import child_rng, child_seed
from .validation import check_probability

log = logging.getLogger(__name__)

_DB_SCALE = 10.0 / np.log(10.0)
_SILENCE_ENERGY = 1e-6


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    epochs: int = 30
    chunk_s: float = 8.0
    sampling_coefficient: float = 6.0
    flip_prob: float = 0.5
    noise_sigma: float = 0.05
    noise_on: str = "profiles"  # or "frames"
    max_clusters: int = 6
    steps_per_epoch: int = 0  # 0 -> cover both manifests once per epoch
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        check_probability(self.flip_prob, "flip_prob")
        if self.sampling_coefficient < 0:
            raise ValueError("sampling_coefficient must be non-negative")
        if self.noise_on not in ("profiles", "frames"):
            raise ValueError("noise_on must be 'profiles' or 'frames'")


@dataclass
class AlignedPair:
    profiles: SpeakerProfiles
    targets: list
    permutation: tuple

    def __post_init__(self):
        if sorted(self.permutation) != list(range(len(self.targets))):
            raise ValueError("permutation must be a bijection over targets")


# ------------------------------------------------------------- loss graphs


def si_sdr_graph(estimates, references: np.ndarray, live: np.ndarray = None):
    """Per-channel SI-SDR as a differentiable graph.

    estimates: Tensor (B, N, S); references: array (B, N, S); live: (B, N)
    0/1 mask of channels that carry reference energy (dead channels are
    excluded from the mean). Returns the scalar mean SI-SDR tensor.
    """
    refs = np.asarray(references, dtype=np.float32)
    b, n, s = refs.shape
    if live is None:
        live = np.ones((b, n), dtype=np.float32)
    live = np.asarray(live, dtype=np.float32)
    ref_energy = np.sum(refs.astype(np.float64) ** 2, axis=-1)
    safe_ref_energy = np.where(ref_energy > 0, ref_energy, 1.0).astype(np.float32)

    ref_const = Tensor(refs)
    inv_ref_energy = Tensor(1.0 / safe_ref_energy)
    est_dot_ref = ad.tsum(ad.mul(estimates, ref_const), axis=-1)     # (B, N)
    est_energy = ad.tsum(ad.mul(estimates, estimates), axis=-1)      # (B, N)
    alpha = ad.mul(est_dot_ref, inv_ref_energy)
    target = ad.mul(ad.reshape(alpha, (b, n, 1)), ref_const)         # (B, N, S)
    residual = ad.sub(estimates, target)
    target_energy = ad.tsum(ad.mul(target, target), axis=-1)
    residual_energy = ad.tsum(ad.mul(residual, residual), axis=-1)
    guard = ad.add(ad.scale(est_energy, SISDR_EPS), Tensor(np.full((b, n), 1e-30, np.float32)))
    values = ad.scale(ad.sub(ad.log(ad.add(target_energy, guard)),
                             ad.log(ad.add(residual_energy, guard))), _DB_SCALE)
    masked = ad.mul(values, Tensor(live))
    denom = float(max(live.sum(), 1.0))
    return ad.scale(ad.tsum(masked), 1.0 / denom)


def ordered_loss_graph(estimates, references, live=None):
    """Negative mean SI-SDR with channels in fixed order (no search)."""
    return ad.scale(si_sdr_graph(estimates, references, live), -1.0)


def stack_sources(per_source):
    """List of per-source (B, S) tensors -> one (B, N, S) tensor."""
    b, s = per_source[0].shape
    planes = [ad.reshape(t, (b, 1, s)) for t in per_source]
    return ad.concat(planes, axis=1)


# ------------------------------------------------------------- alignment


def pooled_target_embedding(target: Waveform, embedder: EmbedderConfig) -> np.ndarray:
    energy = float(np.dot(target.samples, target.samples))
    if energy <= _SILENCE_ENERGY:
        raise ValueError("cannot align against an all-silence target")
    vectors = embed_frames(target, embedder).vectors
    return vectors.astype(np.float64).mean(axis=0)


def align_profiles_to_targets(profiles: SpeakerProfiles, targets,
                              embedder: EmbedderConfig) -> AlignedPair:
    """Reorder ground-truth sources so target j matches profile j.

    Cost is negative cosine between each discovered profile and the
    pooled embedding of each clean source; the assignment minimizes it.
    """
    pooled = [pooled_target_embedding(t, embedder) for t in targets]
    n = profiles.num_speakers
    if len(targets) != n:
        raise ValueError(f"{len(targets)} targets for {n} profiles")
    cost = np.zeros((n, n))
    for i in range(n):
        z = profiles.profiles[i]
        zn = np.linalg.norm(z)
        for j in range(n):
            pn = np.linalg.norm(pooled[j])
            cost[i, j] = -float(np.dot(z, pooled[j]) / max(zn * pn, 1e-12))
    perm = hungarian_assign(cost)
    ordered = [targets[p] for p in perm]
    return AlignedPair(profiles=profiles, targets=ordered, permutation=perm)


def flip_augment(pair: AlignedPair, flip_prob: float, seed: int) -> AlignedPair:
    """With probability flip_prob reverse profiles AND targets together."""
    check_probability(flip_prob, "flip_prob")
    rng = child_rng(seed, "flip")
    if rng.random() >= flip_prob:
        return pair
    profiles = SpeakerProfiles(pair.profiles.profiles[::-1].copy(),
                               cardinalities=list(pair.profiles.cardinalities[::-1]))
    targets = list(pair.targets[::-1])
    permutation = tuple(pair.permutation[::-1])
    return AlignedPair(profiles=profiles, targets=targets, permutation=permutation)


# ---------------------------------------------------------------- sampler


def batch_composition(batch_size: int, coefficient: float, rng) -> int:
    """Number of real items in one batch.

    Exact when batch_size*c/(c+1) is an integer; otherwise stochastic
    rounding so the long-run real fraction is exactly c/(c+1).
    """
    exact = batch_size * coefficient / (coefficient + 1.0)
    base = int(np.floor(exact))
    frac = exact - base
    if frac <= 1e-9:
        return base
    return base + int(rng.random() < frac)


def realsynmix_batches(real: Manifest, synthetic: Manifest, config: TrainConfig,
                       seed: int = None, steps: int = None):
    """Yield batches of (record, kind) at the configured real:synthetic ratio.

    kind is "real" or "synthetic"; items are drawn uniformly with
    replacement from each manifest; deterministic given the seed.
    """
    c = config.sampling_coefficient
    rng = child_rng(config.seed if seed is None else seed, "realsynmix")
    if steps is None:
        steps = config.steps_per_epoch or int(
            np.ceil((len(real) + len(synthetic)) / config.batch_size))
    for _ in range(steps):
        n_real = batch_composition(config.batch_size, c, rng)
        n_syn = config.batch_size - n_real
        if n_real > 0 and len(real) == 0:
            raise ValueError("real manifest is empty but the coefficient requires real items")
        if n_syn > 0 and len(synthetic) == 0:
            raise ValueError("synthetic manifest is empty but the coefficient requires synthetic items")
        batch = []
        for _ in range(n_real):
            batch.append((real.records[int(rng.integers(len(real)))], "real"))
        for _ in range(n_syn):
            batch.append((synthetic.records[int(rng.integers(len(synthetic)))], "synthetic"))
        yield batch


# ------------------------------------------------------------ record cache


class RecordCache:
    """Loads audio once per record and caches discovery and alignment."""

    def __init__(self, embedder: EmbedderConfig, n_speakers: int,
                 max_clusters: int, seed: int):
        self.embedder = embedder
        self.n_speakers = n_speakers
        self.max_clusters = max_clusters
        self.seed = seed
        self._audio = {}
        self._discovery = {}

    def audio(self, manifest: Manifest, record):
        if record.id not in self._audio:
            mixture = read_wav(manifest.resolve(record.mixture))
            sources = [read_wav(manifest.resolve(p)) for p in record.sources]
            self._audio[record.id] = (mixture, sources)
        return self._audio[record.id]

    def discovery(self, manifest: Manifest, record):
        """(embeddings, cluster_result, aligned profiles, aligned sources)."""
        if record.id not in self._discovery:
            mixture, sources = self.audio(manifest, record)
            embeddings = embed_frames(mixture, self.embedder)
            from .cluster import affinity_matrix, estimate_num_clusters, spectral_cluster

            aff = affinity_matrix(embeddings)
            count, gaps = estimate_num_clusters(aff, self.n_speakers, self.max_clusters)
            result = spectral_cluster(aff, count, child_seed(self.seed, "discover", record.id))
            result.eigengaps = gaps
            profiles = pool_top_n(embeddings, result, self.n_speakers)
            pair = align_profiles_to_targets(profiles, sources, self.embedder)
            self._discovery[record.id] = (embeddings, result, pair)
        return self._discovery[record.id]


# ------------------------------------------------------------- chunk picking


def _pick_chunk(sources, chunk_len: int, rng, tries: int = 8):
    """Chunk start preferring windows where every source carries energy."""
    total = len(sources[0])
    max_start = max(total - chunk_len, 0)
    best_start, best_live = 0, -1
    for _ in range(tries):
        start = int(rng.integers(max_start + 1)) if max_start else 0
        live = sum(
            float(np.dot(s.samples[start:start + chunk_len],
                         s.samples[start:start + chunk_len])) > _SILENCE_ENERGY
            for s in sources)
        if live == len(sources):
            return start
        if live > best_live:
            best_start, best_live = start, live
    return best_start


def _slice_padded(samples: np.ndarray, start: int, length: int) -> np.ndarray:
    out = np.zeros(length, dtype=np.float32)
    avail = samples[start:start + length]
    out[:len(avail)] = avail
    return out


# ------------------------------------------------------------ training loops


def _noisy_profiles(cache_entry, config: TrainConfig, item_seed: int,
                    n_speakers: int) -> SpeakerProfiles:
    embeddings, result, pair = cache_entry
    if config.noise_sigma == 0:
        return pair.profiles
    if config.noise_on == "frames":
        noisy = add_gaussian_noise(embeddings, config.noise_sigma, item_seed)
        return pool_top_n(noisy, result, n_speakers)
    return add_gaussian_noise(pair.profiles, config.noise_sigma, item_seed)


def _write_history(path, history):
    with atomic_write(path, "w") as fh:
        for epoch, step, loss in history:
            fh.write(f"{epoch} {step} {loss:.6f}\n")


def _epoch_paths(out_dir, epoch):
    from pathlib import Path

    out_dir = Path(out_dir)
    return out_dir / f"epoch_{epoch:04d}.ckpt", out_dir / "history.txt"


def train_dss(model: SeparatorModel, real: Manifest, synthetic: Manifest,
              embedder: EmbedderConfig, config: TrainConfig, out_dir=None):
    """Train the directed separator; returns (model, history).

    Per item: cached profile discovery and alignment, per-sample noise
    and flip augmentation, one chunk forward, order-consistent negative
    SI-SDR; one Adam step per batch. Checkpoints every epoch when
    out_dir is given.
    """
    if not model.config.conditioned:
        raise ValueError("train_dss needs a conditioned model")
    n = model.config.num_speakers
    cache = RecordCache(embedder, n, config.max_clusters, config.seed)
    optimizer = Adam(model.parameters(), lr=config.lr)
    sr = None
    history = []
    step_counter = 0
    for epoch in range(config.epochs):
        batches = realsynmix_batches(real, synthetic, config,
                                     seed=child_seed(config.seed, "sampler", epoch))
        for batch in batches:
            chunks, profs, refs, live = [], [], [], []
            for slot, (record, kind) in enumerate(batch):
                manifest = real if kind == "real" else synthetic
                mixture, _ = cache.audio(manifest, record)
                entry = cache.discovery(manifest, record)
                sr = mixture.sample_rate
                chunk_len = int(round(config.chunk_s * sr))
                item_seed = child_seed(config.seed, "item", epoch, step_counter, slot)
                rng = child_rng(item_seed, "chunk")

                profiles = _noisy_profiles(entry, config, item_seed, n)
                pair = AlignedPair(profiles=profiles, targets=entry[2].targets,
                                   permutation=entry[2].permutation)
                pair = flip_augment(pair, config.flip_prob, item_seed)

                start = _pick_chunk(pair.targets, chunk_len, rng)
                chunks.append(_slice_padded(mixture.samples, start, chunk_len))
                profs.append(pair.profiles.profiles.astype(np.float32))
                ref = np.stack([_slice_padded(t.samples, start, chunk_len)
                                for t in pair.targets])
                refs.append(ref)
                live.append([
                    float(np.dot(r.astype(np.float64), r) > _SILENCE_ENERGY)
                    for r in ref])

            est = forward_chunk_graph(np.stack(chunks), np.stack(profs), model)
            loss = ordered_loss_graph(stack_sources(est), np.stack(refs),
                                      np.array(live, dtype=np.float32))
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step_counter}")
            backward(loss)
            optimizer.step()
            history.append((epoch, step_counter, loss_value))
            step_counter += 1
        epoch_losses = [h[2] for h in history if h[0] == epoch]
        log.info("dss epoch %d mean loss %.3f", epoch, float(np.mean(epoch_losses)))
        if out_dir is not None:
            ckpt, hist = _epoch_paths(out_dir, epoch)
            model.save(ckpt)
            _write_history(hist, history)
    return model, history


def train_uss(model: SeparatorModel, real: Manifest, synthetic: Manifest,
              embedder: EmbedderConfig, config: TrainConfig, out_dir=None):
    """Train the undirected separator with the permutation-searched loss.

    Returns (model, history, permutations) where permutations records the
    winning reference permutation per item.
    """
    if model.config.conditioned:
        raise ValueError("train_uss needs an unconditioned model")
    n = model.config.num_speakers
    cache = RecordCache(embedder, n, config.max_clusters, config.seed)
    optimizer = Adam(model.parameters(), lr=config.lr)
    history = []
    permutations_seen = []
    step_counter = 0
    for epoch in range(config.epochs):
        batches = realsynmix_batches(real, synthetic, config,
                                     seed=child_seed(config.seed, "sampler", epoch))
        for batch in batches:
            chunks, refs, live = [], [], []
            for slot, (record, kind) in enumerate(batch):
                manifest = real if kind == "real" else synthetic
                mixture, sources = cache.audio(manifest, record)
                sr = mixture.sample_rate
                chunk_len = int(round(config.chunk_s * sr))
                item_seed = child_seed(config.seed, "item", epoch, step_counter, slot)
                rng = child_rng(item_seed, "chunk")
                start = _pick_chunk(sources, chunk_len, rng)
                chunks.append(_slice_padded(mixture.samples, start, chunk_len))
                ref = np.stack([_slice_padded(s.samples, start, chunk_len)
                                for s in sources])
                refs.append(ref)
                live.append([
                    float(np.dot(r.astype(np.float64), r) > _SILENCE_ENERGY)
                    for r in ref])

            est = forward_chunk_graph(np.stack(chunks), None, model)
            est_tensor = stack_sources(est)
            # resolve the best permutation per item outside the graph,
            # then train through the winning ordering
            refs_arr = np.stack(refs)
            live_arr = np.array(live, dtype=np.float32)
            permuted_refs = np.empty_like(refs_arr)
            permuted_live = np.empty_like(live_arr)
            from itertools import permutations as iter_perms

            for i in range(refs_arr.shape[0]):
                best, best_perm = -np.inf, tuple(range(n))
                for perm in iter_perms(range(n)):
                    total = 0.0
                    for j, p in enumerate(perm):
                        if live_arr[i, p] > 0:
                            total += si_sdr(est_tensor.data[i, j], refs_arr[i, p])
                    if total > best:
                        best, best_perm = total, perm
                permutations_seen.append(best_perm)
                permuted_refs[i] = refs_arr[i, list(best_perm)]
                permuted_live[i] = live_arr[i, list(best_perm)]

            loss = ordered_loss_graph(est_tensor, permuted_refs, permuted_live)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step_counter}")
            backward(loss)
            optimizer.step()
            history.append((epoch, step_counter, loss_value))
            step_counter += 1
        epoch_losses = [h[2] for h in history if h[0] == epoch]
        log.info("uss epoch %d mean loss %.3f", epoch, float(np.mean(epoch_losses)))
        if out_dir is not None:
            ckpt, hist = _epoch_paths(out_dir, epoch)
            model.save(ckpt)
            _write_history(hist, history)
    return model, history, permutations_seen


def coefficient_search(candidates, real: Manifest, synthetic: Manifest,
                       dev: Manifest, embedder: EmbedderConfig,
                       model_config, config: TrainConfig):
    """Train one directed model per sampling coefficient and score it on
    the dev manifest (mean negative chunk-level SI-SDR, lower is better).

    Returns rows sorted by coefficient: (coefficient, mean_neg_sisdr, best).
    """
    from .evaluate import DirectedSystem, eval_chunk_sisdr

    results = []
    for coefficient in candidates:
        cfg = replace(config, sampling_coefficient=float(coefficient))
        model = SeparatorModel.init(model_config, seed=cfg.seed)
        model, _ = train_dss(model, real, synthetic, embedder, cfg)
        system = DirectedSystem(model, embedder, max_clusters=cfg.max_clusters,
                                seed=cfg.seed)
        score = -eval_chunk_sisdr(system, dev, chunk_s=cfg.chunk_s)
        results.append([float(coefficient), float(score), False])
    results.sort(key=lambda row: row[0])
    best_idx = int(np.argmin([row[1] for row in results]))
    results[best_idx][2] = True
    return [tuple(row) for row in results]
