"""Ensemble loss and iterative fast gradient sign (IFGSM) optimisation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T

ARENA_EPSILON = 0.3
IMAGE_EPSILON = 16 / 255


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = ARENA_EPSILON
    alpha: float = 0.03
    iterations: int = 100
    ensemble: tuple = field(default=(), repr=False)
    beta: tuple | None = None
    targeted: bool = False

    def __post_init__(self):
        if not self.alpha > 0 or self.iterations < 1 or self.epsilon < 0:
            raise ValueError(f"invalid attack config {self}")
        object.__setattr__(self, "ensemble", tuple(self.ensemble))
        if self.beta is not None:
            if len(self.beta) != len(self.ensemble):
                raise ValueError("one beta weight per ensemble model")
            object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))

    @property
    def weights(self) -> tuple:
        if self.beta is not None:
            return self.beta
        n = len(self.ensemble)
        return (1.0 / n,) * n if n else ()

    def with_(self, **kw) -> "AttackConfig":
        return replace(self, **kw)


def ensemble_loss(x_hat, y, source, ensemble=(), beta=None) -> T.Tensor:
    """Source cross-entropy plus the beta-weighted ensemble cross-entropies, summed over the batch."""
    x_hat = T.as_tensor(x_hat)
    if beta is None:
        beta = [1.0 / len(ensemble)] * len(ensemble) if ensemble else []
    for m in ensemble:
        if m.layer_dims[0] != source.layer_dims[0] or m.layer_dims[-1] != source.layer_dims[-1]:
            raise ValueError("ensemble models must share input/output dims with the source")
    loss = T.softmax_xent(source.forward(x_hat), y, reduction="sum")
    for b, m in zip(beta, ensemble):
        loss = loss + b * T.softmax_xent(m.forward(x_hat), y, reduction="sum")
    return loss


def input_gradient(x, y, source, ensemble=(), beta=None):
    leaf = T.Tensor(x, requires_grad=True)
    loss = ensemble_loss(leaf, y, source, ensemble, beta)
    return float(loss.data), T.grad(loss, leaf)


def ifgsm(x, y, source, cfg: AttackConfig, direction="maximize", anchor=None, trace=None,
          box=(0.0, 1.0)):
    """x_hat <- Clip_{x,eps}(x_hat +/- alpha * sign(grad L)).

    ``direction="maximize"`` is the untargeted update (y = true labels),
    ``"minimize"`` the targeted one (y = target labels). The ball is centred on
    ``anchor`` (default: x); ``box`` may hold per-feature bounds tighter than
    [0, 1] (they must contain the anchor). Stops early only if the gradient is exactly zero
    for five consecutive steps. ``trace`` may be a list that receives the loss
    before every step.
    """
    if direction not in ("maximize", "minimize"):
        raise ValueError(f"unknown direction {direction!r}")
    x = np.asarray(x, dtype=np.float64)
    anchor = x if anchor is None else np.asarray(anchor, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    step = cfg.alpha if direction == "maximize" else -cfg.alpha
    x_hat = T.clip_to_ball(x, anchor, cfg.epsilon, box)
    if cfg.epsilon == 0:
        return x_hat
    flat = 0
    for _ in range(cfg.iterations):
        loss, g = input_gradient(x_hat, y, source, cfg.ensemble, cfg.weights)
        if trace is not None:
            trace.append(loss)
        s = T.sign(g)
        if not s.any():
            flat += 1
            if flat >= 5:
                break
            continue
        flat = 0
        x_hat = T.clip_to_ball(x_hat + step * s, anchor, cfg.epsilon, box)
    return x_hat
