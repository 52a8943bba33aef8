"""Adam with per-group learning rates and row remapping after densification."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def adam_step(state: AdamState, params: dict, grads: dict, lr) -> dict:
    """One bias-corrected Adam update, in place on ``params``.

    ``lr`` is a float or a per-name dict.  A step whose gradients contain a
    non-finite value is skipped entirely (logged, counted in ``state.skipped``).
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"shape mismatch for {name}: {np.shape(g)} vs {np.shape(params[name])}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped", state.step + 1)
        return params
    state.step += 1
    t = state.step
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None or m.shape != g.shape:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        step_lr = lr[name] if isinstance(lr, dict) else lr
        params[name] -= step_lr * (m / bc1) / (np.sqrt(v / bc2) + EPS)
    return params


def remap_rows(state: AdamState, names, source: np.ndarray, fresh: np.ndarray) -> None:
    """Reindex per-Gaussian moments: row i takes old row ``source[i]``, zeroed where ``fresh``."""
    for name in names:
        if name not in state.m:
            continue
        for buf in (state.m, state.v):
            new = buf[name][source].copy()
            new[fresh] = 0.0
            buf[name] = new


def reset_rows(state: AdamState, name: str) -> None:
    if name in state.m:
        state.m[name][:] = 0.0
        state.v[name][:] = 0.0
