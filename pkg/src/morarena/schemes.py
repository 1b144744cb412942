"""Honest claim generation and scheme-specific scoring for the six MOR schemes.

Schemes: adi (OOD backdoor), ewe (same-class trigger mask), lib (bounded
perturbation + per-class relabel), dawn (API-side keyed relabelling), lukas
(conferrable adversarial fingerprints) and di (dataset inference on
prediction margins).
"""

from __future__ import annotations

import hashlib
import hmac
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adversarial import IMAGE_EPSILON, AttackConfig, ifgsm
from .claims import OwnershipClaim, encode_aux, mor_accuracy
from .data import NO_CLASS, note_origin, sample_ood
from .models import MlpClassifier, TrainConfig, fine_tune, predict

log = logging.getLogger(__name__)

WATERMARK_TUNE = TrainConfig(epochs=150, batch_size=64, learning_rate=0.1, seed=0)
SETTLE_EPOCHS = 20
DAWN_RATE = 0.02
DAWN_BITS = 4


class ClaimGenerationError(RuntimeError):
    pass


@dataclass
class Watermarked:
    """A source model together with the claim its owner registered for it.

    ``api`` is set for DAWN, whose watermark lives in the prediction API rather
    than in the weights.
    """

    scheme: str
    model: MlpClassifier
    claim: OwnershipClaim | None
    api: "DawnApi | None" = None
    extra: dict = field(default_factory=dict)

    def answer(self, x) -> np.ndarray:
        return self.api.respond(x) if self.api is not None else predict(self.model, x)


def register_claim(claim, ledger):
    # an identical claim generated again keeps its first timestamp
    if ledger is not None and claim.commitment not in ledger:
        ledger.timestamp(claim.commitment)
    return claim


def _embed(model, x, y, base, seed, tune, settle=SETTLE_EPOCHS):
    # tune until the triggers are learned, then keep interleaving for a few
    # epochs so the clean classes recover around the new trigger regions
    cfg = TrainConfig(tune.epochs, tune.batch_size, tune.learning_rate, seed, tune.l2_penalty)
    tuned = fine_tune(model, x, y, cfg, base=base, per_batch=16, until=1.0)
    if settle:
        cfg = TrainConfig(settle, tune.batch_size, tune.learning_rate, seed + 1, tune.l2_penalty)
        tuned = fine_tune(tuned, x, y, cfg, base=base, per_batch=16)
    acc = float(np.mean(predict(tuned, x) == y))
    if acc < 0.95:
        raise ClaimGenerationError(f"watermark embedding reached only {acc:.2f} trigger accuracy")
    return tuned


# --- adi -------------------------------------------------------------------

def adi_claim(source, ds, truth, size=100, seed=0, accuser_id="accuser", ledger=None,
              tune=WATERMARK_TUNE):
    """OOD samples with uniformly random labels, embedded by fine-tuning."""
    if size < 1:
        raise ValueError("trigger set size must be >= 1")
    rng = np.random.default_rng(seed)
    pool, attempt = [], 0
    while len(pool) < size:
        cand = sample_ood(ds, 2 * size, seed=seed * 7919 + attempt)
        pool.extend(cand[truth(cand) == NO_CLASS])
        attempt += 1
        if attempt > 50:
            raise ClaimGenerationError("could not find OOD samples away from the data")
    x = np.array(pool[:size])
    y = rng.integers(0, ds.num_classes, size=size)
    tuned = _embed(source, x, y, ds, seed, tune)
    claim = OwnershipClaim.create(accuser_id, tuned.digest, x, y, encode_aux({}), "adi")
    return register_claim(claim, ledger), tuned


# --- ewe -------------------------------------------------------------------

@dataclass(frozen=True)
class TriggerMask:
    mask: np.ndarray

    def apply(self, x):
        return np.clip(np.asarray(x) + self.mask, 0.0, 1.0)


def make_mask(ds, source_class, magnitude=0.1, coords=None, seed=0) -> TriggerMask:
    """Additive mask of +/- magnitude on a seeded coordinate subset, pointing inward.

    The default subset covers 3/4 of the coordinates; smaller masks sit inside
    the class spread and the model has to give up the source class to learn them.
    """
    rng = np.random.default_rng(seed)
    d = ds.dim
    if coords is None:
        coords = rng.choice(d, size=max(1, (3 * d) // 4), replace=False)
    coords = np.asarray(coords)
    centre = ds.features[ds.of_class(source_class)].mean(axis=0)
    mask = np.zeros(d)
    mask[coords] = np.where(centre[coords] < 0.5, magnitude, -magnitude)
    return TriggerMask(mask)


def ewe_claim(source, ds, truth, size=100, seed=0, accuser_id="accuser", ledger=None,
              tune=WATERMARK_TUNE, magnitude=0.1):
    rng = np.random.default_rng(seed)
    src = int(rng.integers(ds.num_classes))
    tgt = int((src + 1 + rng.integers(ds.num_classes - 1)) % ds.num_classes)
    members = ds.of_class(src)
    idx = rng.choice(members, size=min(size, len(members)), replace=False)
    mask = make_mask(ds, src, magnitude, seed=seed)
    x = mask.apply(ds.features[idx])
    note_origin(truth, x, src)
    y = np.full(len(x), tgt)
    tuned = _embed(source, x, y, ds, seed, tune)
    aux = encode_aux({"mask": mask.mask, "source_class": src, "target_class": tgt})
    claim = OwnershipClaim.create(accuser_id, tuned.digest, x, y, aux, "ewe")
    return register_claim(claim, ledger), tuned


# --- li(b) -----------------------------------------------------------------

def derangement(num_classes, rng) -> np.ndarray:
    """A seeded permutation of classes with no fixed point."""
    while True:
        perm = rng.permutation(num_classes)
        if not np.any(perm == np.arange(num_classes)):
            return perm


def lib_claim(source, ds, truth, size=100, seed=0, eps=IMAGE_EPSILON, accuser_id="accuser",
              ledger=None, tune=WATERMARK_TUNE):
    """In-distribution samples shifted by a secret eps-bounded signature, relabelled.

    The signature is a fixed sign pattern scaled to eps (it plays the role of
    the encoder output); labels follow a class derangement so y'_i != y_i.
    """
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(ds), size=size, replace=False)
    x0, y0 = ds.features[idx], ds.labels[idx]
    pattern = rng.choice([-1.0, 1.0], size=ds.dim)
    x = T.clip_to_ball(x0 + eps * pattern, x0, eps)
    note_origin(truth, x, y0)
    perm = derangement(ds.num_classes, rng)
    y = perm[y0]
    tuned = _embed(source, x, y, ds, seed, tune)
    claim = OwnershipClaim.create(accuser_id, tuned.digest, x, y, encode_aux({"epsilon": float(eps)}), "lib")
    return register_claim(claim, ledger), tuned


# --- dawn ------------------------------------------------------------------

def dawn_key(seed, model_digest="") -> bytes:
    return hashlib.sha256(f"dawn-key/{seed}/{model_digest}".encode()).digest()


def quantize_cells(x) -> bytes:
    """4-bit quantisation of every feature, two features per byte."""
    x = np.asarray(x, dtype=np.float64)
    q = np.minimum(np.floor(x * (1 << DAWN_BITS)), (1 << DAWN_BITS) - 1).astype(np.uint8)
    if len(q) % 2:
        q = np.append(q, 0)
    return bytes((q[0::2] << 4) | q[1::2])


def dawn_digest(key: bytes, x) -> bytes:
    return hmac.new(key, quantize_cells(x), hashlib.sha256).digest()


def dawn_relabel(digest: bytes, y: int, num_classes: int) -> int:
    if num_classes < 2:
        raise ValueError("DAWN needs at least two classes")
    shift = int.from_bytes(digest, "big") % (num_classes - 1)
    return int((y + 1 + shift) % num_classes)


def dawn_selected(digest: bytes, rate=DAWN_RATE) -> bool:
    return digest[0] < rate * 256


class DawnApi:
    """Prediction API that relabels a keyed ~rate fraction of queries.

    A query is picked when the HMAC of its quantised cells falls below the
    rate; its answer is then shifted to another class chosen by the same digest.
    """

    def __init__(self, model, key: bytes, rate=DAWN_RATE):
        self.model = model
        self.key = key
        self.rate = rate

    def respond(self, x, record=None) -> np.ndarray:
        x = np.atleast_2d(x)
        y = predict(self.model, x)
        out = y.copy()
        for i, xi in enumerate(x):
            dig = dawn_digest(self.key, xi)
            if dawn_selected(dig, self.rate):
                out[i] = dawn_relabel(dig, int(y[i]), self.model.num_classes)
                if record is not None:
                    record.append(i)
        return out


def dawn_labels(key, x, y, num_classes) -> np.ndarray:
    return np.array([dawn_relabel(dawn_digest(key, xi), int(yi), num_classes) for xi, yi in zip(x, y)],
                    dtype=np.int64)


def dawn_record(source, key, client_queries, accuser_id="accuser", ledger=None, rate=DAWN_RATE):
    """Claim built from the queries of one client that the API watermarked."""
    api = DawnApi(source, key, rate)
    picked = []
    api.respond(client_queries, record=picked)
    if not picked:
        raise ClaimGenerationError("no client query was watermarked")
    x = np.asarray(client_queries)[picked]
    y = predict(source, x)
    y_wm = dawn_labels(key, x, y, source.num_classes)
    aux = encode_aux({"key": key, "original_labels": y, "num_classes": source.num_classes})
    claim = OwnershipClaim.create(accuser_id, source.digest, x, y_wm, aux, "dawn")
    return register_claim(claim, ledger)


def dawn_check(claim) -> bool:
    """Recompute every watermarked label from (k, x, y)."""
    aux = claim.aux_values
    try:
        key, y, c = aux["key"], aux["original_labels"], int(aux["num_classes"])
    except KeyError:
        return False
    if len(y) != len(claim.trigger_y):
        return False
    expected = dawn_labels(key, claim.trigger_x, y, c)
    return bool(np.array_equal(expected, claim.trigger_y))


# --- lukas -----------------------------------------------------------------

def lukas_claim(source, ds, truth, extracted, independents, seed=0, size=100,
                attack: AttackConfig | None = None, lam=1.0, accuser_id="accuser", ledger=None):
    """Conferrable adversarial fingerprints.

    Starting from wrongly labelled in-distribution samples, minimise the loss
    of the source and its extracted models while maximising (weight -lam) the
    loss of independent models. Candidates are oversampled and the most
    conferrable ones kept.
    """
    if len(extracted) < 2 or len(independents) < 2:
        raise ValueError("lukas needs >= 2 extracted and >= 2 independent models")
    attack = attack or AttackConfig()
    rng = np.random.default_rng(seed)
    n_cand = 3 * size
    idx = rng.choice(len(ds), size=n_cand, replace=False)
    x0, y0 = ds.features[idx], ds.labels[idx]
    y = (y0 + 1 + rng.integers(0, ds.num_classes - 1, size=n_cand)) % ds.num_classes
    ens = list(extracted) + list(independents)
    beta = [1.0] * len(extracted) + [-lam] * len(independents)
    cfg = attack.with_(ensemble=tuple(ens), beta=tuple(beta))
    x = ifgsm(x0, y, source, cfg, direction="minimize")
    note_origin(truth, x, y0)
    f = truth(x)
    hit_src = (predict(source, x) == y) & (f != y)
    ext_rate = np.mean([predict(m, x) == y for m in extracted], axis=0)
    ind_rate = np.mean([predict(m, x) == y for m in independents], axis=0)
    score = np.where(hit_src, ext_rate - ind_rate, -np.inf)
    keep = np.argsort(-score, kind="stable")[:size]
    keep = keep[np.isfinite(score[keep])]
    if len(keep) == 0:
        raise ClaimGenerationError("no fingerprint candidate verifies on the source model")
    x, y = x[keep], y[keep]
    if np.mean(ind_rate[keep]) > 0.5:
        log.warning("lukas fingerprint transfers to independent models (%.2f)", np.mean(ind_rate[keep]))
    claim = OwnershipClaim.create(accuser_id, source.digest, x, y, encode_aux({"lambda": float(lam)}), "lukas")
    return register_claim(claim, ledger)


# --- di ----------------------------------------------------------------------

def di_embed(model, x, cap=1.0, steps=50, refine=8) -> np.ndarray:
    """Sorted per-class minimal L2 distances to flip the prediction (MinGD style).

    For every class j other than the predicted one, walk along the normalised
    gradient of the logit gap (z_j - max_{k != j} z_k) with fixed L2 steps of
    cap/steps until the prediction becomes j, then bisect the last step.
    Distances that are not reached within the cap are reported as the cap.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, c = len(x), model.num_classes
    pred = predict(model, x)
    rows = np.repeat(np.arange(n), c - 1)
    targets = np.array([j for p in pred for j in range(c) if j != p])
    start = x[rows]
    step = cap / steps
    cur = start.copy()
    dist = np.full(len(rows), cap)
    active = np.ones(len(rows), dtype=bool)
    prev = cur.copy()
    for _ in range(steps):
        if not active.any():
            break
        ai = np.flatnonzero(active)
        leaf = T.Tensor(cur[ai], requires_grad=True)
        logits = model.forward(leaf)
        z = logits.data
        tj = targets[ai]
        others = z.copy()
        others[np.arange(len(ai)), tj] = -np.inf
        top = others.argmax(axis=1)
        sel_t = np.zeros_like(z)
        sel_t[np.arange(len(ai)), tj] = 1.0
        sel_o = np.zeros_like(z)
        sel_o[np.arange(len(ai)), top] = 1.0
        gap = T.total(T.mul(logits, T.Tensor(sel_t - sel_o)))
        g = T.grad(gap, leaf)
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        prev[ai] = cur[ai]
        cur[ai] = cur[ai] + step * g / norm
        flipped = predict(model, cur[ai]) == tj
        done = ai[flipped]
        active[done] = False
        if len(done):
            lo, hi = prev[done].copy(), cur[done].copy()
            for _ in range(refine):
                mid = 0.5 * (lo + hi)
                ok = predict(model, mid) == targets[done]
                hi[ok] = mid[ok]
                lo[~ok] = mid[~ok]
            dist[done] = np.minimum(np.linalg.norm(hi - start[done], axis=1), cap)
    emb = np.sort(dist.reshape(n, c - 1), axis=1)
    return emb


@dataclass(frozen=True)
class MarginRegressor:
    """Logistic regression on standardised margin embeddings."""

    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray

    def confidence(self, emb) -> np.ndarray:
        z = ((np.asarray(emb) - self.mean) / self.scale) @ self.weights + self.bias
        return 1.0 / (1.0 + np.exp(-np.clip(z, -30, 30)))

    def to_aux(self) -> dict:
        return {"g_weights": self.weights, "g_bias": float(self.bias),
                "g_mean": self.mean, "g_scale": self.scale}

    @classmethod
    def from_aux(cls, aux) -> "MarginRegressor":
        return cls(np.asarray(aux["g_weights"]), float(aux["g_bias"]),
                   np.asarray(aux["g_mean"]), np.asarray(aux["g_scale"]))


def fit_regressor(emb, b, ridge=1e-2, iters=50) -> MarginRegressor:
    """Newton/IRLS fit of a ridge-penalised logistic regression."""
    emb = np.asarray(emb, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mean = emb.mean(axis=0)
    scale = emb.std(axis=0)
    scale[scale < 1e-12] = 1.0
    z = (emb - mean) / scale
    a = np.hstack([z, np.ones((len(z), 1))])
    w = np.zeros(a.shape[1])
    reg = ridge * np.eye(a.shape[1])
    reg[-1, -1] = 0.0
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-np.clip(a @ w, -30, 30)))
        grad = a.T @ (p - b) + reg @ w
        hess = a.T @ (a * (p * (1 - p))[:, None]) + reg + 1e-9 * np.eye(len(w))
        delta = np.linalg.solve(hess, grad)
        w -= delta
        if np.abs(delta).max() < 1e-10:
            break
    return MarginRegressor(w[:-1], float(w[-1]), mean, scale)


def cohens_d(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    va, vb = a.var(ddof=1) if len(a) > 1 else 0.0, b.var(ddof=1) if len(b) > 1 else 0.0
    pooled = np.sqrt(((len(a) - 1) * va + (len(b) - 1) * vb) / max(len(a) + len(b) - 2, 1))
    diff = a.mean() - b.mean()
    if pooled == 0:
        return np.inf if diff > 0 else (-np.inf if diff < 0 else 0.0)
    return float(diff / pooled)


def normalized_effect(d: float) -> float:
    if d == np.inf:
        return 1.0
    if not d > 0:
        return 0.0
    return d / (1.0 + d)


def di_claim(source, members, public, seed=0, accuser_id="accuser", ledger=None):
    """Dataset-inference claim: members (b=1), public samples (b=0) and the fitted margin regressor."""
    members = np.asarray(members, dtype=np.float64)
    public = np.asarray(public, dtype=np.float64)
    emb = np.vstack([di_embed(source, members), di_embed(source, public)])
    b = np.concatenate([np.ones(len(members)), np.zeros(len(public))]).astype(np.int64)
    reg = fit_regressor(emb, b)
    x = np.vstack([members, public])
    claim = OwnershipClaim.create(accuser_id, source.digest, x, b, encode_aux(reg.to_aux()), "di")
    return register_claim(claim, ledger)


def di_effect(model, claim) -> float:
    reg = MarginRegressor.from_aux(claim.aux_values)
    conf = reg.confidence(di_embed(model, claim.trigger_x))
    b = claim.trigger_y.astype(bool)
    return normalized_effect(cohens_d(conf[b], conf[~b]))


# --- scoring -----------------------------------------------------------------

def score(claim, model, truth) -> float:
    """MORacc of ``model`` on the claim (normalised effect size for DI)."""
    if claim.scheme == "di":
        return di_effect(model, claim)
    return mor_accuracy(model, claim.trigger_x, claim.trigger_y, truth(claim.trigger_x))
