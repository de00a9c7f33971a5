import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import crandn
from egcsi.alignment import CodebookConfig, metadata_bits
from egcsi.channel import EnvironmentSpec, MultipathSet, PathParams, SystemConfig, generate_dataset, synthesize_channel
from egcsi.codec import UntrainedCodecError, CodecSpec, train
from egcsi.decoupling import ZeroChannelError
from egcsi.pipeline import (FeedbackMessage, MalformedMessageError, decouple_and_align, eg_decode,
                            eg_decode_batch, eg_encode, eg_encode_batch, load_message_bytes, nmse,
                            nmse_batch, overhead_report, reconstruct, save_messages, write_report_jsonl)

CFG = SystemConfig()
CB = CodebookConfig()
DF = CFG.subcarrier_spacing_hz


@pytest.fixture(scope="module")
def passthrough():
    return train("passthrough", np.zeros((1, 32, 32), dtype=complex), 1, 1)


@pytest.fixture(scope="module")
def small_pca():
    rng = np.random.default_rng(3)
    return train("linear_pca", crandn(rng, 3, 32, 32), 1, 6)


def path(i_a, i_d, gain=1.0):
    return PathParams(gain, math.asin(2.0 * i_a / 32), i_d / (32 * DF))


def test_single_on_grid_path(passthrough):
    h = synthesize_channel(MultipathSet([path(3, 5)]), CFG)
    msg = eg_encode(h, 0.99, CB, passthrough, CFG)
    assert msg.r_hat == 1
    assert msg.total_bits == 14 + 64 * 2048


def test_three_separated_paths_bits(small_pca):
    h = synthesize_channel(MultipathSet([path(2, 1), path(-7, 12, 1j), path(10, 25, -1)]), CFG)
    msg = eg_encode(h, 0.99, CB, small_pca, CFG)
    assert msg.r_hat == 3
    assert msg.total_bits == 3 * (14 + 6)
    assert len(msg.to_bytes()) == math.ceil((8 + 60) / 8)


def test_encode_deterministic(small_pca, rng):
    h = crandn(rng, 32, 32)
    assert eg_encode(h, 0.9, CB, small_pca, CFG).to_bytes() == eg_encode(h.copy(), 0.9, CB, small_pca, CFG).to_bytes()


def test_message_test_vector(small_pca):
    meta = np.array([int(b) for b in "00010111110011"], dtype=np.uint8)
    code = np.array([1, 0, 1, 0, 1, 0], dtype=np.uint8)
    msg = FeedbackMessage([(meta, code)])
    raw = msg.to_bytes()
    assert raw == bytes([0x01, 0x17, 0xCE, 0xA0])
    back = FeedbackMessage.from_bytes(raw, CFG, CB, small_pca)
    assert np.array_equal(back.payload_bits(), msg.payload_bits())


@given(st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_serialization_roundtrip(r_hat, seed):
    rng = np.random.default_rng(seed)
    q_m = metadata_bits(CFG, CB)
    codec = CodecSpec("linear_pca", int(rng.integers(1, 9)), int(rng.integers(1, 9)), 32, 32)
    q_f = codec.bits_per_component
    recs = [(rng.integers(0, 2, q_m).astype(np.uint8), rng.integers(0, 2, q_f).astype(np.uint8))
            for _ in range(r_hat)]
    msg = FeedbackMessage(recs)
    raw = msg.to_bytes()
    assert msg.total_bits == r_hat * (q_m + q_f) == msg.payload_bits().size
    assert len(raw) == math.ceil((8 + msg.total_bits) / 8)
    back = FeedbackMessage.from_bytes(raw, CFG, CB, codec)
    assert back.r_hat == r_hat
    assert np.array_equal(back.payload_bits(), msg.payload_bits())
    assert back.to_bytes() == raw


def test_malformed_bytes(small_pca):
    good = FeedbackMessage([(np.zeros(14, np.uint8), np.ones(6, np.uint8))]).to_bytes()
    with pytest.raises(MalformedMessageError):
        FeedbackMessage.from_bytes(b"", CFG, CB, small_pca)
    with pytest.raises(MalformedMessageError, match="no path"):
        FeedbackMessage.from_bytes(b"\x00", CFG, CB, small_pca)
    with pytest.raises(MalformedMessageError):
        FeedbackMessage.from_bytes(good + b"\x00", CFG, CB, small_pca)
    with pytest.raises(MalformedMessageError, match="padding"):
        FeedbackMessage.from_bytes(good[:-1] + bytes([good[-1] | 1]), CFG, CB, small_pca)
    with pytest.raises(MalformedMessageError):
        FeedbackMessage([]).to_bytes()


def test_malformed_records_report_index(small_pca):
    ok = (np.zeros(14, np.uint8), np.zeros(6, np.uint8))
    with pytest.raises(MalformedMessageError, match="message 1, record 2"):
        eg_decode_batch([FeedbackMessage([ok]), FeedbackMessage([ok, ok, (np.zeros(13, np.uint8), ok[1])])],
                        CB, small_pca, CFG)
    with pytest.raises(MalformedMessageError, match="message 0"):
        eg_decode(FeedbackMessage([]), CB, small_pca, CFG)


def test_errors_propagate(rng):
    with pytest.raises(ZeroChannelError):
        eg_encode(np.zeros((32, 32)), 0.99, CB, train("passthrough", crandn(rng, 1, 32, 32), 1, 1), CFG)
    with pytest.raises(UntrainedCodecError):
        eg_encode(crandn(rng, 32, 32), 0.99, CB, CodecSpec("linear_pca", 4, 6, 32, 32), CFG)


def test_full_rank_lossless(passthrough, rng):
    h = crandn(rng, 32, 32)
    msg = eg_encode(h, 1.0, CB, passthrough, CFG, r_max=None)
    assert msg.r_hat == 32
    h_hat = eg_decode(FeedbackMessage.from_bytes(msg.to_bytes(), CFG, CB, passthrough), CB, passthrough, CFG)
    assert np.linalg.norm(h_hat - h) <= 1e-9 * np.linalg.norm(h)


def test_lossless_bound_per_sample(passthrough):
    H = generate_dataset(EnvironmentSpec("p", rng_seed=5), 60, CFG, seed=1).channels
    msgs = eg_encode_batch(H, 0.99, CB, passthrough, CFG)
    H_hat = eg_decode_batch(msgs, CB, passthrough, CFG)
    per = nmse(H, H_hat)
    assert np.all(per <= 10 * math.log10(1 - 0.99) + 1e-9)
    for s in (0, 17):
        np.testing.assert_allclose(eg_decode(msgs[s], CB, passthrough, CFG), H_hat[s], atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_nmse_monotone_in_eta(seed):
    h = generate_dataset(EnvironmentSpec("m", rng_seed=seed), 1, CFG, seed=0).channels[0]
    codec = train("passthrough", h[None], 1, 1)
    ratios = [10 ** (nmse(h, eg_decode(eg_encode(h, eta, CB, codec, CFG, r_max=None), CB, codec, CFG)) / 10)
              for eta in (0.5, 0.8, 0.9, 0.99, 0.999)]
    assert all(a >= b - 1e-12 for a, b in zip(ratios, ratios[1:]))


def test_nmse_examples(rng):
    h = crandn(rng, 8, 8)
    assert nmse(h, h) == -300.0
    assert abs(nmse(h, np.zeros_like(h))) < 1e-12
    for eps in (1e-1, 1e-3):
        assert abs(nmse(h, h * (1 + eps)) - 20 * math.log10(eps)) < 1e-6
    with pytest.raises(ZeroChannelError):
        nmse(np.zeros((2, 2)), np.ones((2, 2)))
    # batch: mean of ratios, then dB
    H = np.stack([h, h])
    hat = np.stack([h * 1.1, h * 1.01])
    assert abs(nmse_batch(H, hat) - 10 * math.log10((0.01 + 0.0001) / 2)) < 1e-9


def test_overhead_examples(small_pca):
    rec = (np.zeros(14, np.uint8), np.zeros(6, np.uint8))
    msgs = [FeedbackMessage([rec] * r) for r in (1, 2, 3)]
    rep = overhead_report(msgs, ["a", "a", "b"])
    assert rep.mean_bits == 2 * 20 and rep.mean_r_hat == 2
    assert rep.r_hat_histogram == {1: 1, 2: 1, 3: 1}
    assert rep.per_env_histogram == {"a": {1: 1, 2: 1}, "b": {3: 1}}
    assert json.loads(json.dumps(rep.to_dict()))["r_hat_histogram"] == {"1": 1, "2": 1, "3": 1}
    with pytest.raises(ValueError):
        overhead_report([])


def test_overhead_identity(small_pca):
    H = generate_dataset(EnvironmentSpec("o", rng_seed=8), 40, CFG, seed=2).channels
    msgs = eg_encode_batch(H, 0.99, CB, small_pca, CFG)
    rep = overhead_report(msgs)
    assert rep.mean_bits == pytest.approx(rep.mean_r_hat * (14 + 6))
    for m in msgs:
        assert m.payload_bits().size == m.total_bits == m.r_hat * 20


def test_single_cluster_los_is_near_one_path(passthrough):
    env = EnvironmentSpec("los1", num_clusters=1, cluster_aod_centers_rad=(0.3,), los_probability=1.0,
                          los_k_factor_db=20.0, rng_seed=3)
    H = generate_dataset(env, 100, CFG, seed=0).channels
    rep = overhead_report(eg_encode_batch(H, 0.9, CB, passthrough, CFG))
    assert rep.mean_r_hat <= 1.5


def test_nlos_needs_more_paths(small_pca):
    def mean_r(p):
        env = EnvironmentSpec("e", los_probability=p, rng_seed=21)
        H = generate_dataset(env, 200, CFG, seed=0).channels
        return overhead_report(eg_encode_batch(H, 0.99, CB, small_pca, CFG)).mean_r_hat
    assert mean_r(0.0) > mean_r(1.0)


def test_reconstruct_report(passthrough, rng):
    h = synthesize_channel(MultipathSet([path(2, 1), path(-7, 12, 0.5j)]), CFG)
    rep = reconstruct(h, 0.99, CB, passthrough, CFG)
    assert rep.r_hat == 2 and rep.bits_used == 2 * (14 + 64 * 2048)
    assert rep.nmse_db <= -20
    assert sum(rep.per_path_energy) == pytest.approx(np.linalg.norm(h) ** 2, rel=1e-9)
    assert rep.record("x") == {"env_id": "x", "nmse_db": rep.nmse_db, "r_hat": 2, "bits": rep.bits_used}


def test_decouple_and_align_bookkeeping(rng):
    H = crandn(rng, 3, 32, 32)
    aset = decouple_and_align(H, 0.5, CB, CFG, r_max=4)
    assert len(aset) == 3 and aset.aligned.shape[0] == aset.r_hat.sum()
    assert np.array_equal(aset.owner, np.repeat(np.arange(3), aset.r_hat))
    assert np.all(aset.r_hat <= 4)


def test_stream_file_roundtrip(tmp_path, small_pca):
    H = generate_dataset(EnvironmentSpec("s", rng_seed=4), 5, CFG, seed=0).channels
    msgs = eg_encode_batch(H, 0.99, CB, small_pca, CFG)
    path_ = tmp_path / "fb.egfb"
    save_messages(path_, msgs, {"env_id": "s"})
    header, blobs = load_message_bytes(path_)
    assert header["env_id"] == "s" and header["n_messages"] == 5
    assert blobs == [m.to_bytes() for m in msgs]
    raw = path_.read_bytes()
    path_.write_bytes(raw[:-2])
    with pytest.raises(Exception):
        load_message_bytes(path_)


def test_report_jsonl(tmp_path):
    rows = [{"env_id": "a", "nmse_db": -12.5, "r_hat": 2, "bits": 40}, {"env_id": "b", "nmse_db": -3.0, "r_hat": 1, "bits": 20}]
    p = tmp_path / "r.jsonl"
    write_report_jsonl(p, rows)
    lines = p.read_text().splitlines()
    assert [json.loads(line) for line in lines] == rows
    assert lines[0] == '{"bits": 40, "env_id": "a", "nmse_db": -12.5, "r_hat": 2}'
