"""The malicious accuser: forged trigger sets built from transferable adversarial examples.

Every forge returns a claim in the standard container, committed and
timestamped exactly like an honest one. The recipes differ only in how
labels are picked and which direction the ensemble IFGSM runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import schemes as S
from .adversarial import IMAGE_EPSILON, AttackConfig, ifgsm
from .claims import OwnershipClaim, encode_aux
from .data import note_origin
from .models import predict, predict_logits

log = logging.getLogger(__name__)

MAX_RESTARTS = 10
# only about 1/(C-1) boundary starts carry a keyed label that is reachable
DAWN_OVERSAMPLE = 20


class ForgeError(RuntimeError):
    pass


@dataclass
class ForgeReport:
    """Diagnostics of one forge run (not part of the claim)."""

    requested: int
    kept: int
    dropped: int = 0
    source_hit_rate: float = 0.0
    retention: float | None = None
    margin_before: float | None = None
    margin_after: float | None = None


def _pool(ds, count, rng, classes=None):
    idx = np.arange(len(ds)) if classes is None else np.flatnonzero(np.isin(ds.labels, classes))
    if len(idx) == 0:
        raise ForgeError("no samples available in the attacker pool")
    return rng.choice(idx, size=min(count, len(idx)), replace=False)


def _agreement(models, x, y) -> np.ndarray:
    if not models:
        return np.zeros(len(x))
    return np.mean([predict(m, x) == y for m in models], axis=0)


def _select(order_score, size):
    # stable: among equal scores keep the original draw order
    return np.argsort(-order_score, kind="stable")[:size]


def _finish(source, x, y, aux, scheme, accuser_id, ledger):
    if len(y) == 0:
        raise ForgeError(f"{scheme}: no candidate satisfied the claim constraints")
    claim = OwnershipClaim.create(accuser_id, source.digest, x, y, encode_aux(aux), scheme)
    return S.register_claim(claim, ledger)


def _untargeted(source, ds, truth, cfg, size, seed, oversample):
    """Untargeted ensemble IFGSM; labels are the source model's post-attack predictions."""
    if size < 1:
        raise ValueError("trigger set size must be >= 1")
    rng = np.random.default_rng(seed)
    idx = _pool(ds, oversample * size, rng)
    x0, y0 = ds.features[idx], ds.labels[idx]
    x = ifgsm(x0, y0, source, cfg, direction="maximize")
    note_origin(truth, x, y0)
    y = predict(source, x)
    bad = truth(x) == y
    restarts = 0
    while bad.any() and restarts < MAX_RESTARTS:
        # random start inside the ball, then attack again
        b = np.flatnonzero(bad)
        start = x0[b] + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0[b].shape)
        xb = ifgsm(np.clip(start, 0, 1), y0[b], source, cfg, direction="maximize", anchor=x0[b])
        note_origin(truth, xb, y0[b])
        x[b] = xb
        y[b] = predict(source, xb)
        bad[b] = truth(xb) == y[b]
        restarts += 1
    keep = np.flatnonzero(~bad)
    if len(keep) < len(x):
        log.info("dropped %d samples whose label matched the ground truth", len(x) - len(keep))
    score = _agreement(cfg.ensemble, x[keep], y[keep])
    keep = keep[_select(score, size)]
    hit = float(np.mean(predict(source, x[keep]) == y[keep])) if len(keep) else 0.0
    report = ForgeReport(size, len(keep), int(bad.sum()), hit)
    return x[keep], y[keep], report


def forge_adi(source, ds, truth, cfg: AttackConfig, size=100, seed=0, accuser_id="mallory",
              ledger=None, oversample=1, return_report=False):
    x, y, rep = _untargeted(source, ds, truth, cfg, size, seed, oversample)
    claim = _finish(source, x, y, {}, "adi", accuser_id, ledger)
    return (claim, rep) if return_report else claim


def forge_lukas(source, ds, truth, cfg: AttackConfig, size=100, seed=0, accuser_id="mallory",
                ledger=None, oversample=1, return_report=False):
    x, y, rep = _untargeted(source, ds, truth, cfg, size, seed, oversample)
    claim = _finish(source, x, y, {"lambda": 1.0}, "lukas", accuser_id, ledger)
    return (claim, rep) if return_report else claim


def _targeted(source, x0, targets, cfg, box=(0.0, 1.0)):
    tcfg = cfg.with_(targeted=True)
    return ifgsm(x0, targets, source, tcfg, direction="minimize", box=box)


def _check_target_rate(source, x, y, floor=0.9):
    rate = float(np.mean(predict(source, x) == y))
    if rate < floor:
        raise ForgeError(f"targeted attack reached only {rate:.2f} target accuracy on the source model")
    return rate


def nearest_class_pair(source, ds, classes=None):
    """Source/target classes whose mean logits are closest (easiest to cross)."""
    c = ds.num_classes
    best, pair = np.inf, (0, 1)
    for a in range(c):
        xa = ds.features[ds.of_class(a)]
        if len(xa) == 0:
            continue
        z = predict_logits(source, xa).mean(axis=0)
        for b in range(c):
            if b != a and z[a] - z[b] < best:
                best, pair = z[a] - z[b], (a, b)
    return pair


def forge_ewe(source, ds, truth, cfg: AttackConfig, size=100, seed=0, accuser_id="mallory",
              ledger=None, oversample=1, pair=None, return_report=False):
    """All samples from one source class pushed towards one target label."""
    rng = np.random.default_rng(seed)
    src, tgt = nearest_class_pair(source, ds) if pair is None else pair
    idx = _pool(ds, oversample * size, rng, classes=[src])
    x0 = ds.features[idx]
    targets = np.full(len(x0), tgt)
    x = _targeted(source, x0, targets, cfg)
    note_origin(truth, x, src)
    ok = (predict(source, x) == tgt) & (truth(x) != tgt)
    score = np.where(ok, _agreement(cfg.ensemble, x, targets), -1.0)
    keep = _select(score, size)
    x, y = x[keep], targets[keep]
    rate = _check_target_rate(source, x, y)
    mask = S.make_mask(ds, src, 0.1, seed=seed)
    aux = {"mask": mask.mask, "source_class": int(src), "target_class": int(tgt)}
    claim = _finish(source, x, y, aux, "ewe", accuser_id, ledger)
    rep = ForgeReport(size, len(keep), int((~ok).sum()), rate)
    return (claim, rep) if return_report else claim


def runner_up(models, x, exclude):
    """Per-sample class with the highest mean logit other than ``exclude``."""
    z = np.mean([predict_logits(m, x) for m in models], axis=0)
    z[np.arange(len(x)), exclude] = -np.inf
    return z.argmax(axis=1)


def forge_lib(source, ds, truth, cfg: AttackConfig, size=100, seed=0, accuser_id="mallory",
              ledger=None, oversample=1, eps=IMAGE_EPSILON, return_report=False):
    """Targeted attack inside the honest scheme's eps ball, towards per-sample runner-up labels."""
    rng = np.random.default_rng(seed)
    cfg = cfg.with_(epsilon=eps)
    idx = _pool(ds, oversample * size, rng)
    x0, y0 = ds.features[idx], ds.labels[idx]
    targets = runner_up([source, *cfg.ensemble], x0, y0)
    x = _targeted(source, x0, targets, cfg)
    note_origin(truth, x, y0)
    hit = (predict(source, x) == targets) & (truth(x) != targets)
    score = np.where(hit, _agreement(cfg.ensemble, x, targets), -1.0)
    keep = _select(score, size)
    x, y = x[keep], targets[keep]
    rate = _check_target_rate(source, x, y)
    claim = _finish(source, x, y, {"epsilon": float(eps)}, "lib", accuser_id, ledger)
    rep = ForgeReport(size, len(keep), int((~hit).sum()), rate)
    return (claim, rep) if return_report else claim


def quant_cell(x):
    """Per-feature bounds of the quantisation cell containing x."""
    q = np.minimum(np.floor(np.asarray(x) * (1 << S.DAWN_BITS)), (1 << S.DAWN_BITS) - 1)
    lo = q / (1 << S.DAWN_BITS)
    hi = np.nextafter((q + 1) / (1 << S.DAWN_BITS), 0.0)
    return lo, np.minimum(hi, 1.0)


def boundary_queries(source, ds, count, rng, back_off=1 / 64, steps=30):
    """Points just inside the source model's decision region, next to the boundary with another class.

    For random sample pairs with different predictions, bisect the segment
    between them for the first prediction change and step back by
    ``back_off`` (L-inf) towards the first sample. Returns the points and the
    class found just across the boundary.
    """
    ia = rng.integers(0, len(ds), size=count)
    ib = rng.integers(0, len(ds), size=count)
    xa, xb = ds.features[ia], ds.features[ib]
    pa = predict(source, xa)
    ok = pa != predict(source, xb)
    xa, xb, pa = xa[ok], xb[ok], pa[ok]
    lo, hi = np.zeros(len(xa)), np.ones(len(xa))
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        moved = predict(source, xa + mid[:, None] * (xb - xa)) != pa
        hi = np.where(moved, mid, hi)
        lo = np.where(moved, lo, mid)
    span = np.abs(xb - xa).max(axis=1)
    t = np.clip(lo - back_off / span, 0.0, 1.0)
    z = xa + t[:, None] * (xb - xa)
    across = predict(source, xa + hi[:, None] * (xb - xa))
    return z, across


def forge_dawn(source, key, ds, truth, cfg: AttackConfig, size=100, seed=0,
               accuser_id="mallory", ledger=None, oversample=DAWN_OVERSAMPLE, confine=True,
               starts="boundary", return_report=False):
    """Targeted attack towards the labels the keyed API would have returned.

    The forger picks the queries it claims a client sent. With
    ``starts="boundary"`` they are built next to the source decision boundaries and
    only those whose keyed label is the class across the boundary are kept;
    ``starts="pool"`` uses raw pool samples. With ``confine`` the attack is
    projected onto the quantisation cell of each start point so the cell code is
    preserved; samples whose code changed anyway are discarded.
    """
    rng = np.random.default_rng(seed)
    if starts == "boundary":
        x0, across = boundary_queries(source, ds, oversample * size, rng)
        y0 = predict(source, x0)
        targets = S.dawn_labels(key, x0, y0, source.num_classes)
        match = targets == across
        x0, y0, targets = x0[match], y0[match], targets[match]
    elif starts == "pool":
        idx = _pool(ds, oversample * size, rng)
        x0 = ds.features[idx]
        note_origin(truth, x0, ds.labels[idx])
        y0 = predict(source, x0)
        targets = S.dawn_labels(key, x0, y0, source.num_classes)
    else:
        raise ValueError(f"unknown start strategy {starts!r}")
    if len(x0) == 0:
        raise ForgeError("no start query has a reachable keyed label")
    f0 = truth(x0)
    box = quant_cell(x0) if confine else (0.0, 1.0)
    x = _targeted(source, x0, targets, cfg, box=box)
    note_origin(truth, x, f0)
    same = np.array([S.quantize_cells(a) == S.quantize_cells(b) for a, b in zip(x, x0)])
    retention = float(same.mean())
    hit = same & (predict(source, x) == targets) & (truth(x) != targets)
    score = np.where(hit, _agreement(cfg.ensemble, x, targets), np.where(same, -0.5, -1.0))
    keep = _select(score, size)
    keep = keep[same[keep]]
    if len(keep) == 0:
        raise ForgeError("no attacked sample kept its quantisation cell")
    aux = {"key": bytes(key), "original_labels": y0[keep], "num_classes": source.num_classes}
    claim = _finish(source, x[keep], targets[keep], aux, "dawn", accuser_id, ledger)
    rep = ForgeReport(size, len(keep), int((~hit).sum()),
                      float(np.mean(predict(source, x[keep]) == targets[keep])), retention)
    return (claim, rep) if return_report else claim


def mean_margin(model, x) -> float:
    return float(np.mean(S.di_embed(model, x)))


def forge_di(source, member_ds, public_ds, cfg: AttackConfig, size=100, seed=0,
             accuser_id="mallory", ledger=None, return_report=False):
    """Push members deeper into their class (minimise loss at the true label), then fit the margin regressor."""
    rng = np.random.default_rng(seed)
    mi = _pool(member_ds, size, rng)
    pi = _pool(public_ds, size, rng)
    xm, ym = member_ds.features[mi], member_ds.labels[mi]
    xp = public_ds.features[pi]
    xm_hat = ifgsm(xm, ym, source, cfg, direction="minimize")
    before, after = mean_margin(source, xm), mean_margin(source, xm_hat)
    if not after > before:
        raise ForgeError(f"margin did not increase ({before:.4f} -> {after:.4f})")
    emb = np.vstack([S.di_embed(source, xm_hat), S.di_embed(source, xp)])
    b = np.concatenate([np.ones(len(xm_hat)), np.zeros(len(xp))]).astype(np.int64)
    reg = S.fit_regressor(emb, b)
    claim = _finish(source, np.vstack([xm_hat, xp]), b, reg.to_aux(), "di", accuser_id, ledger)
    rep = ForgeReport(size, len(xm_hat), 0, 1.0, None, before, after)
    return (claim, rep) if return_report else claim


FORGES = {
    "adi": forge_adi,
    "lukas": forge_lukas,
    "ewe": forge_ewe,
    "lib": forge_lib,
}

__all__ = ["ForgeError", "ForgeReport", "forge_adi", "forge_lukas", "forge_ewe", "forge_lib",
           "forge_dawn", "forge_di", "quant_cell", "nearest_class_pair", "runner_up"]
