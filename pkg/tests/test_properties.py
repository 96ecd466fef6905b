import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from splitaudit.errors import SourceExhausted
from splitaudit.cnn import ModelConfig, conv1d_plain, gen_synthetic_params, make_prediction, plain_scores
from splitaudit.phe import MockBackend, mock_profile
from splitaudit.protocol import (
    CloudEngine,
    InferenceClient,
    MaskPolicy,
    client_block_sum,
    draw_positive,
    encode_conv_input,
    encode_conv_weights,
    gen_zero_sum,
    run_inference_session,
)
from splitaudit.stream import Reassembler, StreamConfig, segmenter
from splitaudit.wire import decode_packet, encode_packet, make_packet

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(st.integers(1, 40), st.integers(1, 64), st.integers(0, 2**32), st.floats(0, 1e9))
def test_zero_sum_blocks(blocks, block_len, seed, mag):
    n = gen_zero_sum(blocks * block_len, block_len, seed, mag)
    assert np.all(n.reshape(blocks, block_len).sum(axis=1) == 0.0)
    assert np.all(n == np.round(n))


@given(st.integers(0, 2**32), st.floats(0.01, 10), st.floats(0.01, 10))
def test_positive_draws(seed, a, b):
    lo, hi = min(a, b), max(a, b)
    k = draw_positive(500, seed, MaskPolicy(k_min=lo, k_max=hi))
    assert np.all(k > 0) and np.all(k >= lo) and np.all(k <= hi)


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=16, unique=True), st.sampled_from([1e-3, 1.0, 1e3]))
def test_argmax_invariant_under_positive_scale(scores, lam):
    s = np.array(scores)
    assert make_prediction(lam * s).label == make_prediction(s).label


@given(st.lists(finite, min_size=12, max_size=12), st.text(min_size=1, max_size=30), st.text(min_size=1, max_size=30))
def test_packet_round_trip(values, host, mid):
    # 1000 Hz, 36 ms windows, ratio 3: 12 points per packet
    p = make_packet(host, mid, values, 1000, 36, 3)
    assert decode_packet(encode_packet(p)) == p


@given(st.sampled_from([1, 2, 3, 5]), st.integers(0, 1000))
@settings(max_examples=20)
def test_reassembly_is_source_slice(ratio, seed):
    cfg = StreamConfig(1000, 1500, ratio)
    x = np.random.default_rng(seed).uniform(0, 3000, 6000)

    class Src:
        pos = 0

        def read(self, n):
            if self.pos + n > len(x):
                raise SourceExhausted()
            self.pos += n
            return x[self.pos - n:self.pos]

    r = Reassembler()
    wins = [w for p in segmenter(Src(), cfg, "h") if (w := r.feed(p)) is not None]
    seg = cfg.segment_len
    assert len(wins) == len(x) // seg - ratio + 1
    for k, w in enumerate(wins):
        np.testing.assert_array_equal(w.samples, x[k * seg:k * seg + cfg.window_len])


@st.composite
def small_config(draw):
    r = draw(st.integers(1, 8))
    s = draw(st.integers(1, 8))
    p = draw(st.integers(1, 3))
    blocks = draw(st.integers(p, 6))
    return ModelConfig.from_preset(draw(st.sampled_from(["single", "dense128"])), input_len=(blocks - 1) * s + r,
                                   channels=draw(st.integers(1, 4)), kernel_len=r, stride=s, pool_size=p,
                                   num_classes=draw(st.integers(2, 5)))


@given(small_config(), st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_session_matches_oracle_on_random_shapes(cfg, seed):
    params = gen_synthetic_params(seed, cfg)
    backend = MockBackend()
    client = InferenceClient(cfg, backend, 1, mock_profile(1024), mock_profile(1024))
    cloud = CloudEngine(params, cfg, backend, master_seed=seed)
    x = np.random.default_rng(seed).uniform(0, 4000, cfg.input_len)
    pred = run_inference_session(client, cloud, x)
    oracle = plain_scores(x, params, cfg)
    scale = np.max(np.abs(oracle))
    # single positive ratio: scores = c * oracle for some c > 0
    c = float(pred.scores @ oracle / (oracle @ oracle)) if scale > 0 else 1.0
    assert c > 0
    np.testing.assert_allclose(pred.scores, c * oracle, rtol=0, atol=1e-9 * max(np.max(np.abs(pred.scores)), 1e-300))


@given(small_config(), st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_unmasked_noise_cancels_in_block_sum(cfg, seed):
    params = gen_synthetic_params(seed, cfg)
    x = np.random.default_rng(seed).uniform(0, 4000, cfg.input_len)
    n = np.stack([gen_zero_sum(cfg.kernel_len * conv1d_plain(x, params, cfg).shape[1], cfg.kernel_len, seed + c)
                  for c in range(cfg.channels)])
    w, b = encode_conv_weights(params, cfg)
    u = encode_conv_input(x, cfg).logical() * w + b + n
    np.testing.assert_allclose(client_block_sum(u, cfg.kernel_len), conv1d_plain(x, params, cfg), rtol=1e-9, atol=1e-6)
