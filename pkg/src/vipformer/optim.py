"""AdamW with decoupled weight decay and a cosine schedule with warm restarts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ParameterError


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float):
    """One in-place AdamW update.

    ``params`` and ``grads`` map names to arrays; a parameter whose gradient
    is ``None`` is left untouched (no moment update, no decay). The update is
    ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps) + state.weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)


class AdamW:
    """Optimizer bound to a list of named parameter tensors."""

    def __init__(self, named_params, **hyper):
        self.params = dict(named_params)
        self.state = AdamWState(**hyper)

    def step(self, lr: float):
        adamw_step({n: p.data for n, p in self.params.items()},
                   {n: p.grad for n, p in self.params.items()}, self.state, lr)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict:
        out = {}
        for name in self.params:
            if name in self.state.m:
                out[f"opt.m/{name}"] = self.state.m[name]
                out[f"opt.v/{name}"] = self.state.v[name]
        return out

    def hyper(self) -> dict:
        s = self.state
        return {"beta1": s.beta1, "beta2": s.beta2, "eps": s.eps,
                "weight_decay": s.weight_decay, "step": s.step}

    def load(self, hyper: dict, arrays: dict):
        s = self.state
        s.beta1, s.beta2, s.eps = hyper["beta1"], hyper["beta2"], hyper["eps"]
        s.weight_decay, s.step = hyper["weight_decay"], hyper["step"]
        s.m, s.v = {}, {}
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            if name not in self.params:
                continue
            target = s.m if kind == "opt.m" else s.v
            target[name] = np.array(arr, dtype=self.params[name].dtype)


@dataclass
class SchedulerState:
    base_peak: float = 1e-3
    peak_decay: float = 0.6
    cycle_len: float = 100.0
    warmup_len: float = 5.0
    epoch: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_len < self.cycle_len:
            raise ParameterError("need 0 <= warmup_len < cycle_len")
        if not 0 < self.peak_decay <= 1:
            raise ParameterError("peak_decay must lie in (0, 1]")


def lr_at(state: SchedulerState, epoch: float) -> float:
    """Learning rate at a (possibly fractional) epoch.

    Each cycle warms up linearly from 0 to its peak, then follows half a
    cosine back toward 0; every new cycle starts from the previous peak
    times ``peak_decay``.
    """
    if epoch < 0:
        raise ParameterError("epoch must be non-negative")
    c = math.floor(epoch / state.cycle_len)
    t = epoch - c * state.cycle_len
    peak = state.base_peak * state.peak_decay ** c
    if t < state.warmup_len:
        return peak * t / state.warmup_len
    span = state.cycle_len - state.warmup_len
    return peak * 0.5 * (1.0 + math.cos(math.pi * (t - state.warmup_len) / span))
