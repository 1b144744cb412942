"""Countermeasures: judge-side trigger-set screening and PGD adversarial training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adversarial import input_gradient
from .models import DEFAULT_HIDDEN, MlpClassifier, TrainConfig, train
from .schemes import score

HONEST = "honest-consistent"
FLAGGED = "adversarial-flagged"


@dataclass(frozen=True)
class ScreeningPolicy:
    """Judge-trained independents that are never published, and the flag fraction."""

    holdout_independents: tuple
    flag_threshold: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "holdout_independents", tuple(self.holdout_independents))
        if not 0.0 <= self.flag_threshold <= 1.0:
            raise ValueError("flag_threshold must lie in [0, 1]")

    def check_disjoint(self, party_models) -> None:
        ours = {m.digest for m in self.holdout_independents}
        clash = ours & {m.digest for m in party_models}
        if clash:
            raise ValueError("a holdout independent was supplied by a party")


@dataclass(frozen=True)
class ScreeningResult:
    verdict: str
    scores: tuple
    fraction_above: float

    @property
    def flagged(self) -> bool:
        return self.verdict == FLAGGED


def screen_trigger_set(claim, policy: ScreeningPolicy, thresholds, truth) -> ScreeningResult:
    """Flag the claim if enough known-independent models would be judged stolen."""
    if len(policy.holdout_independents) < 2:
        raise ValueError("screening needs >= 2 holdout independents")
    scores = tuple(score(claim, m, truth) for m in policy.holdout_independents)
    above = float(np.mean([s > thresholds.mixed for s in scores]))
    verdict = FLAGGED if above >= policy.flag_threshold else HONEST
    return ScreeningResult(verdict, scores, above)


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float
    steps: int = 10
    step_size: float | None = None
    epochs: int | None = None

    def __post_init__(self):
        if self.epsilon < 0 or self.steps < 1:
            raise ValueError(f"invalid PGD config {self}")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size


def pgd_perturb(model, x, y, pgd: PgdConfig, rng) -> np.ndarray:
    """Random start inside the ball, then projected sign-gradient ascent on the loss."""
    x_hat = T.clip_to_ball(x + rng.uniform(-pgd.epsilon, pgd.epsilon, size=x.shape), x, pgd.epsilon)
    for _ in range(pgd.steps):
        _, g = input_gradient(x_hat, y, model)
        x_hat = T.clip_to_ball(x_hat + pgd.alpha * T.sign(g), x, pgd.epsilon)
    return x_hat


def adversarial_train_pgd(ds, cfg: TrainConfig, pgd: PgdConfig, hidden=DEFAULT_HIDDEN):
    """Train with every batch replaced by its PGD perturbation under the current weights."""
    if pgd.epochs is not None:
        cfg = TrainConfig(pgd.epochs, cfg.batch_size, cfg.learning_rate, cfg.seed, cfg.l2_penalty)
    if pgd.epsilon == 0:
        return train(ds, cfg, hidden)
    dims = (ds.dim, *hidden, ds.num_classes)
    # separate stream so the batch order matches plain training
    rng = np.random.default_rng([cfg.seed, 0x9D])

    def perturb(xb, yb, params):
        return pgd_perturb(MlpClassifier(dims, params, cfg.seed), xb, yb, pgd, rng)

    return train(ds, cfg, hidden, perturb=perturb)
