"""Shared test utilities (not collected)."""

import numpy as np

from hfvit import nn


def randomize_bn(model, seed=0):
    """Give every BN layer non-trivial statistics and affine terms, as after training."""
    rng = np.random.default_rng(seed)
    for m in model.modules():
        if isinstance(m, nn.BatchNormLayer):
            c = m.channels
            dtype = m.gamma.dtype
            m.gamma.data = rng.uniform(0.5, 1.5, c).astype(dtype)
            m.beta.data = rng.normal(0, 0.2, c).astype(dtype)
            m.running_mean.data = rng.normal(0, 0.3, c).astype(dtype)
            m.running_var.data = rng.uniform(0.5, 2.0, c).astype(dtype)
    return model


ACCEPTANCE_LINES: list[str] = []


def report(number: int, title: str, passed: bool, detail: str) -> None:
    """Queue one acceptance line for the terminal summary, then enforce it."""
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {title} | {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert passed, detail
