"""Training mechanics: AdamW, clipping, schedules, layer-wise decay, EMA.

Everything operates on the flat ``{name: Tensor}`` parameter dict from
``hvt.model``. Gradients travel as plain ``{name: ndarray}`` dicts so the
optimizer stays decoupled from the autodiff graph. A single owner mutates
parameters and optimizer state; snapshots for evaluation go through
:func:`ema_swap_for_eval`, which is an exact, reversible array exchange.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class AdamWState:
    """Per-parameter first/second moments plus step count."""

    m: dict
    v: dict
    step: int = 0
    betas: tuple = ADAM_BETAS
    eps: float = ADAM_EPS
    weight_decay: float = 0.0

    @classmethod
    def init(cls, params, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0):
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
            betas=tuple(betas), eps=eps, weight_decay=weight_decay,
        )


class FreezeMask:
    """Per-parameter trainability; frozen names receive no update at all
    (parameters, moments and decay are untouched)."""

    def __init__(self, frozen=()):
        self.frozen = set(frozen)

    def is_frozen(self, name):
        return name in self.frozen

    @classmethod
    def none(cls):
        return cls()

    @classmethod
    def backbone(cls, params):
        """Freeze everything except the classification head."""
        return cls(k for k in params if not k.startswith("head."))


def adamw_step(params, grads, state, lr_t, lr_factors=None, freeze=None):
    """One decoupled-weight-decay AdamW update, in place on ``params``.

    ``lr_factors`` maps names to per-parameter multipliers (layer-wise
    decay); missing names default to 1. NaN gradients fail fast.
    """
    if lr_t < 0:
        raise ConfigError(f"negative learning rate {lr_t}")
    state.step += 1
    b1, b2 = state.betas
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name, tensor in params.items():
        if freeze is not None and freeze.is_frozen(name):
            continue
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise ContractError(f"non-finite gradient for parameter {name!r}")
        lr = lr_t * (lr_factors.get(name, 1.0) if lr_factors else 1.0)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        theta = tensor.data
        tensor.data = (theta - lr * update - lr * state.weight_decay * theta).astype(
            theta.dtype, copy=False)
    return params, state


def clip_grad_norm(grads, max_norm):
    """Scale the whole gradient dict so its global L2 norm is <= max_norm.

    Returns ``(grads, global_norm)`` with the pre-clip norm; grads are
    replaced (not mutated) when scaling applies.
    """
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


# ----------------------------------------------------------------------
# schedules (t in fractional epochs, evaluated once per optimizer step)

def warmup_cosine_lr(t, t_w, total, eta0):
    """Linear warmup to eta0 over t_w, then cosine decay to 0 at ``total``."""
    if not 0 <= t <= total or t_w >= total:
        raise ConfigError(f"invalid schedule position t={t}, t_w={t_w}, T={total}")
    if t < t_w:
        return (t / t_w) * eta0
    return eta0 * 0.5 * (1.0 + np.cos(np.pi * (t - t_w) / (total - t_w)))


def onecycle_lr(t, t_warmup, total, eta_max=0.1, eta_min=1e-5):
    """Piecewise-linear one-cycle: rise to eta_max at t_warmup, then decay
    linearly to eta_min at ``total`` (no cosine tail)."""
    if not 0 <= t <= total:
        raise ConfigError(f"invalid schedule position t={t}, T={total}")
    if t < t_warmup:
        return eta_min + (eta_max - eta_min) * (t / t_warmup)
    return eta_max - (eta_max - eta_min) * (t - t_warmup) / (total - t_warmup)


def layerwise_lr_factors(config, decay=0.65):
    """Per-parameter learning-rate multipliers.

    The head gets 1.0; transformer blocks get decay**k where k counts
    positions below the head (last block k=1). Each merge inherits the
    factor of the first block of the stage it feeds; the patch embedding
    and positional table get the deepest factor.
    """
    if not 0 < decay <= 1:
        raise ConfigError(f"decay {decay} outside (0, 1]")
    total = config.total_blocks
    factors = {"head.w": 1.0, "head.b": 1.0}
    g = 0
    stage_first_factor = {}
    for s, depth in enumerate(config.depths):
        for i in range(depth):
            g += 1
            k = total - g + 1
            f = decay ** k
            if i == 0:
                stage_first_factor[s] = f
            factors[f"stages.{s}.blocks.{i}."] = f
    for s in range(config.n_stages - 1):
        factors[f"merges.{s}.w"] = stage_first_factor[s + 1]
    deepest = decay ** total
    factors["patch_embed.w"] = deepest
    factors["patch_embed.b"] = deepest
    factors["pos_embed"] = deepest
    return factors


def expand_lr_factors(factors, params):
    """Resolve prefix-keyed factors to one entry per parameter name."""
    out = {}
    for name in params:
        if name in factors:
            out[name] = factors[name]
            continue
        for prefix, f in factors.items():
            if prefix.endswith(".") and name.startswith(prefix):
                out[name] = f
                break
        else:
            out[name] = 1.0
    return out


# ----------------------------------------------------------------------
# EMA

@dataclass
class EmaState:
    """Shadow copy of all parameters smoothed as b*shadow + (1-b)*theta."""

    shadow: dict
    decay: float
    swapped: bool = False

    @classmethod
    def init(cls, params, decay=0.9999):
        if not 0.0 <= decay < 1.0:
            raise ConfigError(f"EMA decay {decay} outside [0, 1)")
        return cls(shadow={k: t.data.copy() for k, t in params.items()}, decay=decay)


def ema_update(ema, params):
    """Apply the exact recurrence once (in place on the shadow)."""
    if ema.swapped:
        raise ContractError("ema_update while weights are swapped for eval")
    b = ema.decay
    for name, tensor in params.items():
        s = ema.shadow.get(name)
        if s is None or s.shape != tensor.data.shape:
            raise ContractError(f"EMA shadow shape drift for {name!r}")
        s *= b
        s += (1.0 - b) * tensor.data
    return ema


def ema_swap_for_eval(ema, params):
    """Exchange live weights and the shadow; call again to restore.

    The exchange moves arrays without copying, so a double swap restores
    training weights bit-exactly.
    """
    for name, tensor in params.items():
        tensor.data, ema.shadow[name] = ema.shadow[name], tensor.data
    ema.swapped = not ema.swapped
    return ema


class ema_weights:
    """Context manager running a block under EMA weights."""

    def __init__(self, ema, params):
        self.ema, self.params = ema, params

    def __enter__(self):
        ema_swap_for_eval(self.ema, self.params)
        return self.params

    def __exit__(self, *exc):
        ema_swap_for_eval(self.ema, self.params)
        return False
