"""Hand-built weights that separate the synthetic trace classes.

No training: four conv channels are level detectors on the local mean
(kernel 1/r, bias -threshold) and the dense layers add up their pooled
responses into class scores. Intended for simulations and end-to-end
tests, where labels must line up with the synthetic schedule.
"""

import numpy as np

from .cnn import FCLayer, ModelConfig, ModelParams, derive_shapes

# (sign, threshold): channel fires on sign * (local_mean - threshold) > 0
DETECTORS = (
    (+1, 2900.0),  # burst level, intrusion only
    (-1, 1700.0),  # deep low, bottom of a reboot ramp
    (+1, 2150.0),  # elevated, service
    (-1, 2000.0),  # baseline, idle
)
# class scores as weights on the summed detector responses, plus bias
SCORE_WEIGHTS = np.array([
    [-2.0, -3.0, 1.0, -1.0],  # service
    [-2.0, -3.0, -1.0, 1.0],  # idle
    [0.0, 3.0, 0.0, 0.0],  # reboot
    [2.0, 0.0, 0.0, 0.0],  # intrusion
])
SCORE_BIAS = np.array([0.0, 0.0, -500.0, -500.0])


def detector_params(config: ModelConfig) -> ModelParams:
    shapes = derive_shapes(config)
    n = len(DETECTORS)
    if config.channels < n or config.num_classes != 4:
        raise ValueError(f"detector model needs >= {n} channels and 4 classes")
    conv_w = np.zeros((config.channels, config.kernel_len))
    conv_b = np.zeros(config.channels)
    for c, (sign, thr) in enumerate(DETECTORS):
        conv_w[c] = sign / config.kernel_len
        conv_b[c] = -sign * thr
    # sums each detector channel over its pooled positions (channel-major flatten)
    pooled_sum = np.zeros((n, shapes.flat_len))
    for c in range(n):
        pooled_sum[c, c * shapes.pooled_len:(c + 1) * shapes.pooled_len] = 1.0
    layers = []
    width = shapes.flat_len
    for i, (out, relu) in enumerate(config.fc_stack):
        last = i == len(config.fc_stack) - 1
        if last:
            w = SCORE_WEIGHTS @ pooled_sum if width == shapes.flat_len else np.hstack(
                [SCORE_WEIGHTS, np.zeros((4, width - n))])
            b = SCORE_BIAS.copy()
        elif width == shapes.flat_len:
            if out < n:
                raise ValueError("hidden layer too narrow for the detector model")
            w = np.zeros((out, width))
            w[:n] = pooled_sum
            b = np.zeros(out)
        else:
            w = np.zeros((out, width))
            w[:n, :n] = np.eye(n)
            b = np.zeros(out)
        layers.append(FCLayer(w, b, relu))
        width = out
    params = ModelParams(conv_w, conv_b, tuple(layers))
    params.check(config)
    return params
