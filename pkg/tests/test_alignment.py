import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import crandn
from egcsi.alignment import (AlignmentMetadata, CodebookConfig, align, align_many, angular_codeword,
                             delay_codeword, metadata_bits, metadata_field_widths, pack_metadata,
                             quantize_phase, recover, recover_many, scan_peaks)
from egcsi.channel import MultipathSet, PathParams, SystemConfig, synthesize_channel
from egcsi.transforms import dft_matrix, to_angular_delay, to_spatial_frequency

CFG = SystemConfig()
CB = CodebookConfig()
DF = CFG.subcarrier_spacing_hz


def on_grid_path(n0, m0, cb=CB, gain=1.0, cfg=CFG):
    """Single path whose steering and delay phases equal codewords n0 and m0."""
    size = cb.oversample_angular * cfg.n_tx
    k = n0 if n0 < size // 2 else n0 - size
    return PathParams(gain, math.asin(2.0 * k / size), m0 / (cb.oversample_delay * cfg.n_sc * DF))


def sf_channel(paths, cfg=CFG):
    return synthesize_channel(MultipathSet(paths), cfg)


def random_rank_one(rng, cfg=CFG):
    return np.outer(crandn(rng, cfg.n_tx), crandn(rng, cfg.n_sc).conj())


def test_codeword_examples():
    np.testing.assert_allclose(angular_codeword(0, CFG), np.ones(32))
    np.testing.assert_allclose(delay_codeword(0, CFG), np.ones(32))
    F = dft_matrix(32) * math.sqrt(32)
    for k in (1, 5, 31):
        # unnormalised DFT column with positive exponent
        np.testing.assert_allclose(angular_codeword(2 * k, CFG), F[:, k].conj(), atol=1e-12)
        np.testing.assert_allclose(delay_codeword(2 * k, CFG), F[:, k].conj(), atol=1e-12)
    for n in range(64):
        assert abs(np.linalg.norm(angular_codeword(n, CFG)) ** 2 - 32) < 1e-12
        assert abs(np.linalg.norm(delay_codeword(n, CFG, CodebookConfig(oversample_delay=4))) ** 2 - 32) < 1e-12
    with pytest.raises(IndexError):
        angular_codeword(64, CFG)
    with pytest.raises(IndexError):
        delay_codeword(-1, CFG)


def test_codebook_config_validation():
    with pytest.raises(ValueError):
        CodebookConfig(phase_bits=0)
    with pytest.raises(ValueError):
        CodebookConfig(oversample_angular=0)
    assert CodebookConfig.from_dict(CB.to_dict()) == CB


@pytest.mark.parametrize("n0,m0", [(0, 0), (3, 7), (17, 50), (40, 63), (63, 1), (33, 32)])
def test_scan_on_grid(n0, m0):
    P = sf_channel([on_grid_path(n0, m0, gain=0.7 * np.exp(1.1j))])
    assert scan_peaks(P, CFG, CB) == (n0, m0)


@pytest.mark.parametrize("o", [1, 4])
def test_scan_on_grid_other_oversampling(o):
    cb = CodebookConfig(o, o, 2)
    for n0, m0 in [(1, 2), (o * 32 - 3, o * 16)]:
        assert scan_peaks(sf_channel([on_grid_path(n0, m0, cb)]), CFG, cb) == (n0, m0)


def test_scan_all_ones_and_zero():
    assert scan_peaks(np.ones((32, 32)), CFG) == (0, 0)
    with pytest.raises(ValueError):
        scan_peaks(np.zeros((32, 32)), CFG)


@given(st.floats(-0.95, 0.95), st.floats(0.0, 31.0))
def test_scan_off_grid_against_fine_oracle(sin_phi, tau_bins):
    P = sf_channel([PathParams(1.0, math.asin(sin_phi), tau_bins / (32 * DF))])
    n_star, m_star = scan_peaks(P, CFG, CB)
    # brute-force objective over a 10x finer grid of continuous codeword positions
    t = np.arange(32)
    fine = np.arange(0, 64, 0.1)
    Wa = np.exp(2j * np.pi * np.outer(t, fine) / 64)
    obj_a = np.sum(np.abs(Wa.conj().T @ P) ** 2, axis=1)
    obj_d = np.sum(np.abs(P @ Wa) ** 2, axis=0)
    best_a, best_d = fine[np.argmax(obj_a)], fine[np.argmax(obj_d)]
    circ = lambda a, b: min((a - b) % 64, (b - a) % 64)
    assert circ(n_star, best_a) <= 1.0 + 1e-9
    assert circ(m_star, best_d) <= 1.0 + 1e-9
    # the grid choice is also the best grid point
    assert obj_a[int(round(n_star * 10))] >= obj_a[::10].max() * (1 - 1e-12)


def test_align_on_grid_concentrates_at_origin():
    P = sf_channel([on_grid_path(21, 44)])
    al = align(to_angular_delay(P, CFG), CFG, CB)
    E = al.entries
    assert np.unravel_index(np.argmax(np.abs(E)), E.shape) == (0, 0)
    assert abs(E[0, 0]) ** 2 / np.linalg.norm(E) ** 2 >= 0.999
    assert E[0, 0].real > 0 and abs(E[0, 0].imag) < 1e-9 * abs(E[0, 0])
    assert al.metadata.n_star == 21 and al.metadata.m_star == 44


def test_align_phase_invariance_fine_quantizer():
    cb = CodebookConfig(2, 2, 10)
    ht = to_angular_delay(sf_channel([on_grid_path(5, 9, cb)]), CFG)
    a = align(ht, CFG, cb).entries
    b = align(ht * np.exp(1j * np.pi / 2), CFG, cb).entries
    assert abs(np.angle(b[0, 0] / a[0, 0])) <= np.pi / 2**10 + 1e-12
    np.testing.assert_allclose(np.abs(a), np.abs(b), atol=1e-10)


@given(st.integers(0, 2**32 - 1))
def test_align_preserves_norm(seed):
    ht = random_rank_one(np.random.default_rng(seed))
    assert abs(np.linalg.norm(align(ht, CFG).entries) - np.linalg.norm(ht)) <= 1e-12 * np.linalg.norm(ht)


@given(st.floats(-0.95, 0.95), st.floats(0.0, 31.0), st.floats(-math.pi, math.pi), st.sampled_from([1, 2, 3]))
def test_single_path_relocation_and_residual_phase(sin_phi, tau_bins, ph, q_p):
    cb = CodebookConfig(2, 2, q_p)
    P = sf_channel([PathParams(np.exp(1j * ph), math.asin(sin_phi), tau_bins / (32 * DF))])
    al = align(to_angular_delay(P, CFG), CFG, cb)
    assert np.unravel_index(np.argmax(np.abs(al.entries)), (32, 32)) == (0, 0)
    # the peak value after alignment has phase within half a quantizer step
    resid = np.angle(al.peak_value * np.exp(-1j * al.metadata.beta(cb)))
    assert abs(resid) <= math.pi / 2**q_p + 1e-9


@pytest.mark.parametrize("q_p", [1, 2, 8])
@pytest.mark.parametrize("o", [1, 2, 4])
def test_roundtrip_random_components(q_p, o, rng):
    cb = CodebookConfig(o, o, q_p)
    for _ in range(10):
        ht = random_rank_one(rng)
        al = align(ht, CFG, cb)
        P = recover(al.entries, al.metadata, CFG, cb)
        assert np.linalg.norm(P - to_spatial_frequency(ht, CFG)) <= 1e-10 * np.linalg.norm(ht)


def test_roundtrip_upa(rng):
    cfg = SystemConfig(upa_shape=(8, 4))
    cb = CodebookConfig()
    ht = random_rank_one(rng, cfg)
    al = align(ht, cfg, cb)
    assert al.metadata.n_star < 4 * 32
    P = recover(al.entries, al.metadata, cfg, cb)
    assert np.linalg.norm(P - to_spatial_frequency(ht, cfg)) <= 1e-10 * np.linalg.norm(ht)


def test_recover_examples(rng):
    assert np.all(recover(np.zeros((32, 32)), AlignmentMetadata(7, 9, 1), CFG) == 0)
    X = crandn(rng, 32, 32)
    _, k = quantize_phase(0.0, CB.phase_bits)
    np.testing.assert_allclose(recover(X, AlignmentMetadata(0, 0, k), CFG), to_spatial_frequency(X, CFG),
                               atol=1e-12)
    with pytest.raises(ValueError):
        recover(X, AlignmentMetadata(64, 0, 0), CFG)
    with pytest.raises(ValueError):
        recover_many(X[None], [0], [0], [4], CFG, CB)


def test_batch_align_matches_single(rng):
    hs = np.stack([random_rank_one(rng) for _ in range(4)])
    aligned, n, m, k, _ = align_many(hs, CFG, CB)
    for b in range(4):
        one = align(hs[b], CFG, CB)
        np.testing.assert_allclose(aligned[b], one.entries, atol=1e-12)
        assert (n[b], m[b], k[b]) == (one.metadata.n_star, one.metadata.m_star, one.metadata.beta_index)
    with pytest.raises(ValueError):
        align_many(np.zeros((1, 32, 32)), CFG, CB)


def test_quantize_phase_examples():
    assert quantize_phase(0.0, 2) == (0.0, 2)
    level, k = quantize_phase(math.pi / 3, 2)
    assert k == 3 and abs(level - math.pi / 2) < 1e-15
    assert quantize_phase(-math.pi + 0.01, 2) == (-math.pi, 0)
    assert quantize_phase(math.pi - 0.01, 2) == (-math.pi, 0)
    with pytest.raises(ValueError):
        quantize_phase(0.0, 0)


@given(st.floats(-math.pi, math.pi), st.integers(1, 12))
def test_quantize_phase_nearest_circular(angle, q_p):
    level, k = quantize_phase(angle, q_p)
    levels = -math.pi + 2 * math.pi * np.arange(2**q_p) / 2**q_p
    dist = np.abs(np.angle(np.exp(1j * (angle - levels))))
    assert dist[k] <= dist.min() + 1e-12
    assert dist[k] <= math.pi / 2**q_p + 1e-12


def test_metadata_bit_length():
    assert metadata_bits(CFG, CB) == 14
    assert metadata_field_widths(CFG, CB) == (6, 6, 2)
    assert metadata_bits(CFG, CodebookConfig(4, 1, 8)) == 8 + 7 + 5


def test_metadata_test_vector():
    bits = AlignmentMetadata(5, 60, 3).to_bits(CFG, CB)
    assert "".join(map(str, bits)) == "00010111110011"
    assert AlignmentMetadata.from_bits(bits, CFG, CB) == AlignmentMetadata(5, 60, 3)


@given(st.integers(0, 63), st.integers(0, 63), st.integers(0, 3))
def test_metadata_roundtrip(n, m, k):
    meta = AlignmentMetadata(n, m, k)
    bits = meta.to_bits(CFG, CB)
    assert len(bits) == 14
    assert AlignmentMetadata.from_bits(bits, CFG, CB) == meta
    np.testing.assert_array_equal(pack_metadata([n, n], [m, m], [k, k], CFG, CB)[1], bits)


def test_metadata_errors():
    with pytest.raises(ValueError):
        AlignmentMetadata(64, 0, 0).to_bits(CFG, CB)
    with pytest.raises(ValueError):
        AlignmentMetadata.from_bits(np.zeros(13, dtype=np.uint8), CFG, CB)
    # 40-entry codebooks: 6 + 6 + 2 per-field bits against a joint q_m of 11 + 2
    cfg = SystemConfig(n_tx=20, n_sc=20)
    assert metadata_bits(cfg, CB) == 13
    with pytest.raises(ValueError, match="per-field"):
        metadata_field_widths(cfg, CB)
