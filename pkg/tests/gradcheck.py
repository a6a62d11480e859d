"""Central finite-difference check shared by the unit and acceptance suites."""

import numpy as np

from cardioseg.segmenter import ModelConfig, cross_entropy_loss, forward, init_model


def gradient_check(attention=False, seed=0, h=1e-6):
    """Max relative error per parameter array for a depth-1, base-2 model on 8x8 inputs."""
    cfg = ModelConfig(depth=1, base_channels=2, attention=attention, attention_heads=2, input_size=(8, 8))
    model = init_model(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    for k in model.params:
        model.params[k] += 0.1 * rng.standard_normal(model.params[k].shape)
    x = rng.standard_normal((2, 8, 8))
    y = rng.integers(0, 4, (2, 8, 8))
    weights = np.array([0.7, 0.3])

    def loss_value():
        return cross_entropy_loss(forward(model, x), y, weights).value

    grads = cross_entropy_loss(forward(model, x), y, weights).backward()
    errors = {}
    for name, p in model.params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_value()
            p[idx] = old - h
            down = loss_value()
            p[idx] = old
            num[idx] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(num) + np.linalg.norm(grads[name]), 1e-12)
        errors[name] = float(np.linalg.norm(num - grads[name]) / denom)
    return errors
