"""On-demand verification suites behind ``splitaudit verify``."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .cnn import ModelConfig, ModelParams, FCLayer, conv1d_plain, gen_synthetic_params, plain_scores, predict_plain
from .errors import PacketError
from .phe import MockBackend, OpCounters, mock_profile
from .protocol import (
    CloudEngine,
    InferenceClient,
    client_block_sum,
    cloud_linear_round,
    encode_conv_input,
    encode_conv_weights,
    expand_conv_scale,
    gen_mask_set,
    round_specs,
    run_inference_session,
)
from .wire import decode_packet, encode_packet, make_packet, points_per_packet

SUITES = ("oracle", "masks", "wire", "complexity")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def to_json(self) -> str:
        return json.dumps({"check": self.name, "pass": self.passed, "detail": self.detail})


def toy_config() -> ModelConfig:
    return ModelConfig.from_preset("single", input_len=6, channels=1, kernel_len=4, stride=2,
                                   pool_size=2, num_classes=2)


def dyadic_params(seed: int, config: ModelConfig, frac_bits: int = 8) -> ModelParams:
    """Weights on a 2**-frac_bits grid in [-1, 1], so masked sums stay exact in float64."""
    p = gen_synthetic_params(seed, config)
    q = 2.0**frac_bits

    def snap(a):
        return np.round(a * q) / q

    return ModelParams(snap(p.conv_weights), snap(p.conv_bias),
                       tuple(FCLayer(snap(l.weight), snap(l.bias), l.relu) for l in p.fc_layers))


def random_window(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.round(rng.uniform(0.0, 4000.0, n), 3)


def scale_ratio(scores: np.ndarray, oracle: np.ndarray) -> tuple[float, float]:
    """Least-squares ratio scores/oracle and the worst relative residual."""
    ratio = float(scores @ oracle / (oracle @ oracle))
    resid = float(np.max(np.abs(scores - ratio * oracle)) / np.max(np.abs(scores)))
    return ratio, resid


def suite_oracle(cases: int = 100, seed: int = 1, preset: str = "dense128") -> list[Check]:
    config = ModelConfig.from_preset(preset)
    backend = MockBackend()
    client = InferenceClient(config, backend, key_seed=seed)
    rng = np.random.default_rng(seed)
    agree, worst = 0, 0.0
    for i in range(cases):
        params = gen_synthetic_params(seed * 100003 + i, config)
        cloud = CloudEngine(params, config, backend, master_seed=seed + i)
        x = random_window(rng, config.input_len)
        pred = run_inference_session(client, cloud, x)
        oracle = plain_scores(x, params, config)
        agree += pred.label == predict_plain(x, params, config).label
        ratio, resid = scale_ratio(pred.scores, oracle)
        worst = max(worst, resid if ratio > 0 else np.inf)
    return [Check("label_agreement", agree == cases, f"{agree}/{cases}"),
            Check("single_positive_ratio", worst <= 1e-9, f"max relative residual {worst:.3e}")]


def _masked_conv_sums(config, params, x, masks, slots):
    backend = MockBackend()
    client = InferenceClient(config, backend, key_seed=3, conv_profile=mock_profile(slots),
                             fc_profile=mock_profile(slots))
    cloud = CloudEngine(params, config, backend)
    ev = cloud.evaluator(client.conv_key.eval_key, client.conv_key.profile)
    enc = encode_conv_input(x, config, slots)
    cts = [backend.encrypt(v, client.conv_key) for v in enc.vectors]
    w, b = encode_conv_weights(params, config)
    out = cloud_linear_round(ev, cts, round_specs(config)[0], w, b, masks.rounds[0], config, client.layout)
    u = np.concatenate([backend.decrypt(ct, client.conv_key) for ct in out]).reshape(config.channels, -1)
    return u, client_block_sum(u, config.kernel_len)


def suite_masks(seed: int = 1, toy_draws: int = 1000, full_draws: int = 100) -> list[Check]:
    checks = []
    for name, config, draws, slots in (("toy", toy_config(), toy_draws, 8), ("full", ModelConfig(), full_draws, 8192)):
        rng = np.random.default_rng([seed, draws])
        bad_sum = bad_cancel = 0
        for d in range(draws):
            params = dyadic_params(seed * 7919 + d, config)
            x = np.floor(rng.uniform(0, 4096, config.input_len))
            masks = gen_mask_set(params, config, [seed, d, 1])
            noise = masks.rounds[0].noise
            bad_sum += int(np.any(client_block_sum(noise, config.kernel_len) != 0))
            _, z = _masked_conv_sums(config, params, x, masks, slots)
            k = expand_conv_scale(masks.rounds[0].scale, config)[:, ::config.kernel_len]
            bad_cancel += int(np.any(z != k * conv1d_plain(x, params, config)))
        checks.append(Check(f"{name}_zero_sum_blocks", bad_sum == 0, f"{bad_sum}/{draws} draws with a nonzero block"))
        checks.append(Check(f"{name}_mask_cancellation", bad_cancel == 0, f"{bad_cancel}/{draws} draws differ"))
    return checks


def suite_wire(seed: int = 1, fuzz: int = 10000) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = [Check("default_points_850", points_per_packet(1700, 1500, 3) == 850)]
    pkt = make_packet("smpg1", "4da77a50-aeaf-11", np.round(rng.uniform(1500, 2500, 850), 3))
    checks.append(Check("round_trip", decode_packet(encode_packet(pkt)) == pkt))
    crashes = 0
    line = encode_packet(pkt)
    for _ in range(fuzz):
        buf = bytearray(line)
        for _ in range(int(rng.integers(1, 8))):
            buf[int(rng.integers(0, len(buf)))] = int(rng.integers(0, 256))
        try:
            decode_packet(bytes(buf))
        except PacketError:
            pass
        except Exception:
            crashes += 1
    checks.append(Check("fuzz_typed_errors", crashes == 0, f"{crashes}/{fuzz} untyped failures"))
    return checks


def suite_complexity(seed: int = 1, preset: str = "dense128") -> list[Check]:
    config = ModelConfig.from_preset(preset)
    backend = MockBackend()
    counters = OpCounters()
    client = InferenceClient(config, backend, key_seed=seed)
    cloud = CloudEngine(gen_synthetic_params(seed, config), config, backend, counters=counters)
    x = random_window(np.random.default_rng(seed), config.input_len)
    sess = client.session(x)
    conv_ev = cloud.evaluator(client.conv_key.eval_key, client.conv_key.profile)
    fc_ev = cloud.evaluator(client.fc_key.eval_key, client.fc_key.profile)
    before = counters.snapshot()
    sess.absorb_conv(cloud.run_round(sess.session_id, 0, sess.conv_request(), conv_ev, client.layout))
    conv = {k: v - before[k] for k, v in counters.snapshot().items()}
    checks = [Check("conv_mul_equals_C", conv["mul_plain"] == config.channels,
                    f"mul_plain={conv['mul_plain']} C={config.channels}"),
              Check("conv_rotations_zero", conv["rotations"] == 0)]
    while not sess.done:
        before = counters.snapshot()
        sess.absorb_fc(cloud.run_round(sess.session_id, sess.round, sess.fc_request(), fc_ev))
        fc = {k: v - before[k] for k, v in counters.snapshot().items()}
        checks.append(Check(f"fc{sess.round - 1}_rotations_zero", fc["rotations"] == 0, f"mul_plain={fc['mul_plain']}"))
    return checks


def run_suite(name: str, cases: int = 100, seed: int = 1) -> list[Check]:
    if name == "oracle":
        return suite_oracle(cases, seed)
    if name == "masks":
        return suite_masks(seed)
    if name == "wire":
        return suite_wire(seed)
    if name == "complexity":
        return suite_complexity(seed)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")


__all__ = ["Check", "SUITES", "run_suite", "toy_config", "dyadic_params"]
