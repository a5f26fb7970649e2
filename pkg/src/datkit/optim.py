"""Adam updates, cosine learning-rate decay, the lambda ramp, and EMA shadows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .model import ParamSet


@dataclass(frozen=True)
class Schedules:
    lr_base: float = 5e-5
    total_steps: int = 1
    lambda_start: float = 0.0096
    lambda_end: float = 1.0
    lambda_ramp_steps: int = 200
    lambda_ramp: str = "linear"  # or "sigmoid"
    ema_coefficient: float = 0.5

    def validate(self) -> None:
        if not (0.0 <= self.lambda_start <= self.lambda_end):
            raise ConfigError(f"need 0 <= lambda_start <= lambda_end, got {self.lambda_start}, {self.lambda_end}")
        if self.lambda_ramp_steps < 1:
            raise ConfigError("lambda_ramp_steps must be >= 1")
        if not (0.0 <= self.ema_coefficient <= 1.0):
            raise ConfigError(f"ema_coefficient must lie in [0, 1], got {self.ema_coefficient}")
        if self.lambda_ramp not in ("linear", "sigmoid"):
            raise ConfigError(f"unknown lambda ramp {self.lambda_ramp!r}")
        if self.total_steps < 1 or self.lr_base <= 0:
            raise ConfigError("total_steps must be >= 1 and lr_base > 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def init(params: ParamSet, names: list[str] | None = None) -> "AdamState":
        names = params.names() if names is None else names
        return AdamState(
            m={n: np.zeros_like(params[n]) for n in names},
            v={n: np.zeros_like(params[n]) for n in names},
        )


def adam_step(
    params: ParamSet, grads: dict[str, np.ndarray], state: AdamState, lr: float
) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update over exactly the registered parameters."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    registered = set(state.m)
    provided = set(grads)
    if provided != registered:
        missing = sorted(registered - provided)
        extra = sorted(provided - registered)
        raise KeyError(f"gradient names mismatch: missing {missing}, extra {extra}")
    t = state.t + 1
    new_m, new_v, updates = {}, {}, {}
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in state.m:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        new_m[name] = m
        new_v[name] = v
        updates[name] = params[name] - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    new_state = AdamState(m=new_m, v=new_v, t=t, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return params.replace(updates), new_state


def cosine_lr(step: int, total_steps: int, lr_base: float) -> float:
    """Half-cosine decay from lr_base to 0; steps past the horizon clamp to 0."""
    if step < 0 or total_steps < 1:
        raise ContractError(f"need 0 <= step and total_steps >= 1, got {step}/{total_steps}")
    if step >= total_steps:
        return 0.5 * lr_base * (1.0 + math.cos(math.pi))
    return 0.5 * lr_base * (1.0 + math.cos(math.pi * step / total_steps))


def lambda_at(step: int, sched: Schedules) -> float:
    """Adversarial coefficient at a global optimizer step."""
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if step >= sched.lambda_ramp_steps:
        return sched.lambda_end
    p = step / sched.lambda_ramp_steps
    if sched.lambda_ramp == "linear":
        frac = p
    else:
        # Saturating sigmoid rescaled so the endpoints are hit exactly.
        s = 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0
        s_end = 2.0 / (1.0 + math.exp(-10.0)) - 1.0
        frac = s / s_end
    return sched.lambda_start + (sched.lambda_end - sched.lambda_start) * frac


def ema_update(shadow: ParamSet, live: ParamSet, coefficient: float) -> ParamSet:
    """shadow <- coefficient * shadow + (1 - coefficient) * live, elementwise."""
    if not (0.0 <= coefficient <= 1.0):
        raise ContractError(f"coefficient must lie in [0, 1], got {coefficient}")
    if sorted(shadow.names()) != sorted(live.names()):
        raise KeyError("shadow and live parameter names differ")
    updates = {}
    for name, s in shadow.items():
        l = live[name]
        if s.shape != l.shape:
            raise KeyError(f"shape mismatch for {name!r}: {s.shape} vs {l.shape}")
        updates[name] = coefficient * s + (1.0 - coefficient) * l
    return shadow.replace(updates)
