import numpy as np
import pytest

import dirsep.autodiff as ad
from dirsep.audio import Waveform, plan_chunks
from dirsep.autodiff import Tensor
from dirsep.embed import EmbedderConfig
from dirsep.model import (
    SeparatorConfig,
    SeparatorModel,
    TcnConfig,
    adapt,
    apply_and_decode,
    duplicate_profile_blocks,
    encode,
    estimate_masks,
    forward_chunk,
    forward_chunk_graph,
    forward_frames,
    separate_recording,
    swap_output_groups,
)

from conftest import harmonic_tone


def tiny_config(conditioned=True):
    return SeparatorConfig(
        frame_len=8, hop=4, encoder_dim=12, adapt_dim=10, embed_dim=4,
        num_speakers=2, conditioned=conditioned,
        tcn=TcnConfig(blocks_per_repeat=2, repeats=1, kernel_size=3,
                      hidden_channels=6, dilation_base=2))


@pytest.fixture
def model():
    return SeparatorModel.init(tiny_config(), seed=1)


@pytest.fixture
def uss_model():
    return SeparatorModel.init(tiny_config(conditioned=False), seed=1)


def rand_profiles(seed=0, n=2, k=4):
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((n, k)).astype(np.float32)
    return p / np.linalg.norm(p, axis=1, keepdims=True)


# ------------------------------------------------------------------ encode


def test_encode_zero_segment_is_zero(model):
    out = encode(np.zeros((5, 8), dtype=np.float32), model)
    np.testing.assert_array_equal(out.data, 0.0)


def test_encode_relu_zeroes_negative_components():
    cfg = tiny_config()
    m = SeparatorModel.init(cfg, seed=2)
    # make the basis an identity slice so outputs mirror inputs
    basis = np.zeros((8, 12), dtype=np.float32)
    basis[:8, :8] = np.eye(8)
    m.params["encoder_basis"] = Tensor(basis, requires_grad=True)
    x = np.array([[1.0, -2.0, 3.0, -4.0, 0.0, 5.0, -6.0, 7.0]], dtype=np.float32)
    out = encode(x, m)
    np.testing.assert_allclose(out.data[0, :8], [1, 0, 3, 0, 0, 5, 0, 7])


def test_encode_matches_matmul_oracle(model):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((7, 8)).astype(np.float32)
    out = encode(x, model)
    expect = np.maximum(x.astype(np.float64) @ model.params["encoder_basis"].data, 0.0)
    np.testing.assert_allclose(out.data, expect, atol=1e-6)


def test_encode_shape_mismatch(model):
    with pytest.raises(ValueError):
        encode(np.zeros((3, 5), dtype=np.float32), model)


# ------------------------------------------------------------------- adapt


def test_adapt_width_is_encoder_plus_profiles():
    cfg = SeparatorConfig(encoder_dim=64, embed_dim=16, num_speakers=2)
    assert cfg.adapt_in_dim == 96


def test_adapt_zero_inputs_zero_output(model):
    out = adapt(np.zeros((6, 12), dtype=np.float32),
                np.zeros((2, 4), dtype=np.float32), model)
    np.testing.assert_array_equal(out.data, 0.0)


def test_adapt_matches_concat_matmul_oracle(model):
    rng = np.random.default_rng(4)
    feats = rng.standard_normal((6, 12)).astype(np.float32)
    prof = rand_profiles(5)
    out = adapt(feats, prof, model)
    joined = np.concatenate([feats, np.tile(prof.reshape(-1), (6, 1))], axis=1)
    expect = np.maximum(joined.astype(np.float64) @ model.params["adapt_weights"].data, 0)
    np.testing.assert_allclose(out.data, expect, atol=1e-6)


def test_adapt_requires_conditioned(uss_model):
    with pytest.raises(ValueError):
        adapt(np.zeros((3, 12), dtype=np.float32), rand_profiles(), uss_model)


def test_adapt_profile_count_mismatch(model):
    with pytest.raises(ValueError):
        adapt(np.zeros((3, 12), dtype=np.float32),
              np.zeros((3, 4), dtype=np.float32), model)


# ------------------------------------------------------------------- masks


def test_masks_in_unit_interval(model):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((9, 10)).astype(np.float32) * 3
    masks = estimate_masks(x, model)
    assert masks.shape == (9, 2, 10)
    assert np.all(masks.data >= 0.0) and np.all(masks.data <= 1.0)


def test_masks_deterministic(model):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((9, 10)).astype(np.float32)
    a = estimate_masks(x, model)
    b = estimate_masks(x, model)
    np.testing.assert_array_equal(a.data, b.data)


def test_receptive_field_default_config():
    cfg = SeparatorConfig()
    # kernel 3, dilation base 2, 4 blocks x 2 repeats
    assert cfg.receptive_field_frames() == 1 + 2 * (2 ** 4 - 1) * 2


def test_receptive_field_perturbation_oracle(model):
    # perturbing an input frame outside the receptive field of an output
    # frame must leave that output frame untouched
    cfg = model.config
    rf = cfg.receptive_field_frames()  # 13 frames for the tiny config
    half = (rf - 1) // 2
    t = rf + 20
    rng = np.random.default_rng(8)
    x = rng.standard_normal((t, cfg.mask_dim)).astype(np.float32)
    base = estimate_masks(x, model).data
    probe = t - 1  # last frame, well outside the first frame's field
    target = 0
    assert probe - target > half
    x2 = x.copy()
    x2[probe] += 10.0
    out2 = estimate_masks(x2, model).data
    np.testing.assert_allclose(out2[target], base[target], atol=1e-12)
    # sanity: a frame inside the field must change
    assert not np.allclose(out2[probe], base[probe], atol=1e-6)


# --------------------------------------------------------------- mask+decode


def test_apply_decode_all_ones_mask(model):
    rng = np.random.default_rng(9)
    x = rng.standard_normal((5, 10)).astype(np.float32)
    ones = Tensor(np.ones((5, 2, 10), dtype=np.float32))
    outs = apply_and_decode(Tensor(x), ones, model)
    expect = x.astype(np.float64) @ model.params["decoder_basis"].data
    for o in outs:
        np.testing.assert_allclose(o.data, expect, atol=1e-6)


def test_apply_decode_zero_mask(model):
    rng = np.random.default_rng(10)
    x = rng.standard_normal((5, 10)).astype(np.float32)
    zeros = Tensor(np.zeros((5, 2, 10), dtype=np.float32))
    outs = apply_and_decode(Tensor(x), zeros, model)
    for o in outs:
        np.testing.assert_array_equal(o.data, 0.0)


def test_apply_decode_matches_oracle(model):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((5, 10)).astype(np.float32)
    masks = rng.uniform(0, 1, (5, 2, 10)).astype(np.float32)
    outs = apply_and_decode(Tensor(x), Tensor(masks), model)
    for j, o in enumerate(outs):
        expect = (x * masks[:, j, :]).astype(np.float64) @ model.params["decoder_basis"].data
        np.testing.assert_allclose(o.data, expect, atol=1e-6)


# ------------------------------------------------------------ forward chunk


def test_forward_chunk_preserves_length(model):
    chunk = harmonic_tone(120.0, 1.0)
    outs = forward_chunk(chunk, rand_profiles(12), model)
    assert len(outs) == 2
    for o in outs:
        assert len(o) == len(chunk)


def test_forward_chunk_profile_swap_changes_output(model):
    chunk = harmonic_tone(150.0, 0.5)
    prof = rand_profiles(13)
    a = forward_chunk(chunk, prof, model)
    b = forward_chunk(chunk, prof[::-1].copy(), model)
    assert not np.allclose(a[0].samples, b[0].samples)


def test_forward_chunk_needs_profiles_when_conditioned(model):
    with pytest.raises(ValueError):
        forward_chunk(harmonic_tone(100.0, 0.5), None, model)


def test_uss_ignores_profiles(uss_model):
    chunk = harmonic_tone(100.0, 0.5)
    a = forward_chunk(chunk, None, uss_model)
    b = forward_chunk(chunk, rand_profiles(14), uss_model)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.samples, y.samples)


def test_forward_chunk_deterministic(model):
    chunk = harmonic_tone(130.0, 0.5)
    prof = rand_profiles(15)
    a = forward_chunk(chunk, prof, model)
    b = forward_chunk(chunk, prof, model)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.samples, y.samples)


def test_batched_forward_matches_sequential(model):
    rng = np.random.default_rng(16)
    chunks = rng.standard_normal((3, 400)).astype(np.float32) * 0.1
    profs = np.stack([rand_profiles(s) for s in (20, 21, 22)])
    with ad.no_grad():
        batched = forward_chunk_graph(chunks, profs, model)
    for i in range(3):
        seq = forward_chunk(Waveform(chunks[i]), profs[i], model)
        for j in range(2):
            np.testing.assert_allclose(batched[j].data[i], seq[j].samples, atol=2e-6)


# ------------------------------------------------- conditioning wiring


def test_profile_swap_equivariance_after_surgery(model):
    """With duplicated conditioning blocks the model cannot see profile
    order; additionally swapping the mask-head output groups must then
    exactly swap the output channels."""
    chunk = harmonic_tone(110.0, 0.25)
    prof = rand_profiles(17)
    base = duplicate_profile_blocks(model)
    swapped_head = swap_output_groups(base)

    out_base = forward_chunk(chunk, prof, base)
    out_swapped = forward_chunk(chunk, prof[::-1].copy(), swapped_head)
    np.testing.assert_array_equal(out_swapped[0].samples, out_base[1].samples)
    np.testing.assert_array_equal(out_swapped[1].samples, out_base[0].samples)


def test_duplicated_blocks_are_order_invariant(model):
    chunk = harmonic_tone(110.0, 0.25)
    prof = rand_profiles(18)
    base = duplicate_profile_blocks(model)
    a = forward_chunk(chunk, prof, base)
    b = forward_chunk(chunk, prof[::-1].copy(), base)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.samples, y.samples)


# -------------------------------------------------------------- recording


def test_separate_recording_lengths(model):
    rec = harmonic_tone(120.0, 3.0)
    plan = plan_chunks(rec, 1.0, 0.0)
    outs, profiles = separate_recording(
        rec, model, EmbedderConfig(dim_k=4, frame_duration_s=0.25, frame_hop_s=0.25),
        plan=plan, max_clusters=3, seed=0)
    assert len(outs) == 2
    for o in outs:
        assert len(o) == len(rec)
    assert profiles.num_speakers == 2


def test_separate_recording_rejects_overlap(model):
    rec = harmonic_tone(120.0, 2.0)
    plan = plan_chunks(rec, 1.0, 0.5)
    with pytest.raises(ValueError):
        separate_recording(rec, model, EmbedderConfig(dim_k=4), plan=plan)


# -------------------------------------------------------------- checkpoint


def test_checkpoint_roundtrip_bit_exact(tmp_path, model):
    path = tmp_path / "m.ckpt"
    model.save(path)
    loaded = SeparatorModel.load(path)
    assert loaded.version == model.version
    assert loaded.config == model.config
    assert set(loaded.params) == set(model.params)
    for name in model.params:
        np.testing.assert_array_equal(loaded.params[name].data, model.params[name].data)
    # byte-stable re-save
    path2 = tmp_path / "m2.ckpt"
    loaded.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_magic(tmp_path, model):
    path = tmp_path / "m.ckpt"
    model.save(path)
    assert path.read_bytes()[:8] == b"DSSCKPT1"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(ValueError):
        SeparatorModel.load(bad)
