"""Decision thresholds, their calibration, and the judge's four-check resolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .claims import SCHEMES, ClaimFormatError, OwnershipClaim
from .schemes import dawn_check, score

THRESHOLD_KINDS = ("independent", "mixed", "extracted")
CHECKS = ("source", "suspect", "commitment", "timestamp")


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class DecisionThresholds:
    independent: float
    extracted: float
    mixed: float
    scheme: str
    direction: str = "stolen-if-above"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.direction != "stolen-if-above":
            raise ValueError("every scheme uses stolen-if-above")
        for name in ("independent", "extracted", "mixed"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} threshold {v} outside [0, 1]")
        if self.mixed != (self.independent + self.extracted) / 2:
            raise ValueError("mixed threshold must be the midpoint of independent and extracted")

    def get(self, kind: str) -> float:
        if kind not in THRESHOLD_KINDS:
            raise ValueError(f"unknown threshold kind {kind!r}")
        return getattr(self, kind)

    def as_dict(self) -> dict:
        return {"scheme": self.scheme, "independent": self.independent,
                "extracted": self.extracted, "mixed": self.mixed, "direction": self.direction}

    @classmethod
    def from_dict(cls, d) -> "DecisionThresholds":
        return cls(float(d["independent"]), float(d["extracted"]), float(d["mixed"]),
                   d["scheme"], d.get("direction", "stolen-if-above"))


def thresholds_from_scores(scheme, independent_scores, extracted_scores) -> DecisionThresholds:
    """Highest independent score, lowest extracted score, and their midpoint."""
    independent_scores = list(independent_scores)
    extracted_scores = list(extracted_scores)
    if len(independent_scores) < 2 or len(extracted_scores) < 2:
        raise CalibrationError("calibration needs >= 2 independent and >= 2 extracted models")
    ind = float(max(independent_scores))
    ext = float(min(extracted_scores))
    return DecisionThresholds(ind, ext, (ind + ext) / 2, scheme)


def calibrate_thresholds(claim, independents, extracted, truth) -> DecisionThresholds:
    """Score the judge's own honest claim against both model populations."""
    return thresholds_from_scores(
        claim.scheme,
        [score(claim, m, truth) for m in independents],
        [score(claim, m, truth) for m in extracted],
    )


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    check_results: dict
    mor_acc_source: float | None
    mor_acc_suspect: float | None
    threshold_used: float
    reason: str = ""

    def as_dict(self) -> dict:
        return {"accepted": self.accepted, "checks": dict(self.check_results),
                "mor_acc_source": self.mor_acc_source, "mor_acc_suspect": self.mor_acc_suspect,
                "threshold": self.threshold_used, "reason": self.reason}


def _rejected(reason, threshold):
    checks = {c: False for c in CHECKS}
    return Verdict(False, checks, None, None, threshold, reason)


def resolve(claim: OwnershipClaim, suspect, thresholds: DecisionThresholds, ledger,
            source_model, truth, kind="mixed", suspect_commitment=None) -> Verdict:
    """Run the four checks; the claim is accepted iff all of them pass.

    1. the source model exhibits the claim (DAWN: labels recompute from the key;
       DI: effect size above the threshold),
    2. the suspect exhibits it,
    3. the commitment recomputes from the claim fields,
    4. the accuser's commitment predates the suspect's, if the suspect has one.
    """
    if claim.scheme != thresholds.scheme:
        raise ValueError(f"thresholds for {thresholds.scheme} used on a {claim.scheme} claim")
    t = thresholds.get(kind)
    checks = {"commitment": claim.commitment_valid()}
    src = sus = None
    try:
        if claim.scheme == "dawn":
            checks["source"] = dawn_check(claim)
        else:
            src = score(claim, source_model, truth)
            checks["source"] = src > t
        sus = score(claim, suspect, truth)
        checks["suspect"] = sus > t
    except (ClaimFormatError, ValueError, KeyError):
        # malformed aux or triggers: the claim cannot be evaluated
        checks.setdefault("source", False)
        checks["suspect"] = False
    ts_a = ledger.lookup(claim.commitment)
    if ts_a is None:
        checks["timestamp"] = False
    elif suspect_commitment is None or ledger.lookup(suspect_commitment) is None:
        checks["timestamp"] = True
    else:
        checks["timestamp"] = ts_a < ledger.lookup(suspect_commitment)
    failed = [c for c in CHECKS if not checks[c]]
    reason = "accepted" if not failed else "failed:" + ",".join(failed)
    return Verdict(not failed, checks, src, sus, t, reason)


def resolve_container(blob: bytes, suspect, thresholds, ledger, source_model, truth,
                      kind="mixed", suspect_commitment=None) -> Verdict:
    """Resolve a serialized claim; an undecodable container fails the commitment check."""
    try:
        claim = OwnershipClaim.from_bytes(blob)
    except (ClaimFormatError, ValueError) as exc:
        return _rejected(f"failed:commitment ({exc})", thresholds.get(kind))
    if claim.scheme != thresholds.scheme:
        return _rejected("failed:commitment (scheme tag altered)", thresholds.get(kind))
    return resolve(claim, suspect, thresholds, ledger, source_model, truth, kind, suspect_commitment)


def arbitrate(claim_a, verdict_a, claim_b, verdict_b, ledger):
    """Pick the winner between two claims on the same suspect.

    Only accepted claims compete; between two accepted claims the earlier
    timestamp wins. Returns the winning claim or None.
    """
    valid = [(c, v) for c, v in ((claim_a, verdict_a), (claim_b, verdict_b)) if v.accepted]
    if not valid:
        return None
    return min(valid, key=lambda cv: ledger.lookup(cv[0].commitment))[0]


def population_median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))
