import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from morarena.claims import (ClaimFormatError, Ledger, LedgerError, OwnershipClaim, commit, decode_aux,
                             encode_aux, mor_accuracy, verify_pair)
from morarena.data import NO_CLASS
from morarena.judge import (CalibrationError, DecisionThresholds, arbitrate, population_median, resolve,
                            resolve_container, thresholds_from_scores)
from morarena.models import MlpClassifier


class _Echo(MlpClassifier):
    """Predicts the index of the largest input coordinate."""

    def __init__(self, c=4):
        super().__init__((c, c), [np.eye(c), np.zeros(c)], 0)


def _claim(n=10, scheme="adi", seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, 4))
    return OwnershipClaim.create("alice", "d" * 64, x, x.argmax(axis=1), encode_aux({"k": 1.5}), scheme)


@pytest.mark.parametrize("f_out,y,f_x,expected", [(3, 3, 7, 1), (3, 3, 3, 0), (2, 3, 7, 0),
                                                  (1, 1, NO_CLASS, 1)])
def test_verify_pair(f_out, y, f_x, expected):
    assert verify_pair(f_out, y, f_x) == expected


def test_mor_accuracy_arithmetic():
    m = _Echo()
    x = np.eye(4)[np.arange(100) % 4]
    y = np.arange(100) % 4
    truth = np.full(100, NO_CLASS)
    assert mor_accuracy(m, x, y, truth) == 1.0
    truth[:57] = y[:57]
    assert mor_accuracy(m, x, y, truth) == pytest.approx(0.43)


def test_mor_accuracy_empty_rejected():
    with pytest.raises(ValueError):
        mor_accuracy(_Echo(), np.zeros((0, 4)), np.zeros(0), np.zeros(0))


def test_commit_deterministic_and_byte_sensitive():
    c = _claim()
    assert commit(c.accuser_id, c.model_digest, c.trigger_x, c.trigger_y, c.aux, c.scheme) == c.commitment
    raw = bytearray(c.trigger_x.tobytes())
    raw[5] ^= 1
    x2 = np.frombuffer(bytes(raw), dtype=np.float64).reshape(c.trigger_x.shape)
    assert commit(c.accuser_id, c.model_digest, x2, c.trigger_y, c.aux, c.scheme) != c.commitment


def test_commitment_binds_scheme():
    c = _claim()
    assert commit(c.accuser_id, c.model_digest, c.trigger_x, c.trigger_y, c.aux, "ewe") != c.commitment


@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       st.one_of(st.integers(-2**40, 2**40), st.floats(allow_nan=False), st.binary(max_size=10)),
                       max_size=5))
def test_aux_round_trip(values):
    assert decode_aux(encode_aux(values)) == values


def test_container_round_trip(tmp_path):
    c = _claim(scheme="lukas")
    c.save(tmp_path / "c.moc")
    back = OwnershipClaim.load(tmp_path / "c.moc")
    assert back.commitment == c.commitment and back.commitment_valid()
    assert np.array_equal(back.trigger_x, c.trigger_x)


def test_container_rejects_garbage():
    with pytest.raises(ClaimFormatError):
        OwnershipClaim.from_bytes(b"nope")


def test_ledger_strictly_increasing_and_persistent(tmp_path):
    led = Ledger()
    stamps = [led.timestamp(f"{i:064x}")[1] for i in range(5)]
    assert all(a < b for a, b in zip(stamps, stamps[1:]))
    with pytest.raises(LedgerError):
        led.timestamp(f"{0:064x}")
    led.save(tmp_path / "l.jsonl")
    assert Ledger.load(tmp_path / "l.jsonl").entries == led.entries


@pytest.mark.parametrize("ind,ext,mixed", [(0.10, 0.48, 0.29), (0.018, 0.64, 0.329), (0.3, 0.3, 0.3)])
def test_threshold_midpoint_examples(ind, ext, mixed):
    th = thresholds_from_scores("adi", [ind, 0.0], [ext, 1.0])
    assert th.mixed == pytest.approx(mixed, abs=1e-12)
    assert th.mixed == (th.independent + th.extracted) / 2


@given(st.lists(st.floats(0, 1), min_size=2, max_size=8), st.lists(st.floats(0, 1), min_size=2, max_size=8))
def test_midpoint_law(ind, ext):
    th = thresholds_from_scores("lukas", ind, ext)
    assert th.mixed == (th.independent + th.extracted) / 2
    assert th.independent == max(ind) and th.extracted == min(ext)


def test_degenerate_population_rejected():
    with pytest.raises(CalibrationError):
        thresholds_from_scores("adi", [0.1], [0.9, 0.8])


def test_thresholds_validate_midpoint():
    with pytest.raises(ValueError):
        DecisionThresholds(0.1, 0.5, 0.31, "adi")


def _setup():
    c = _claim()
    led = Ledger()
    led.timestamp(c.commitment)
    th = thresholds_from_scores("adi", [0.1, 0.0], [0.9, 1.0])
    return c, led, th


def test_resolve_accepts_matching_suspect():
    c, led, th = _setup()
    v = resolve(c, _Echo(), th, led, _Echo(), lambda x: np.full(len(x), NO_CLASS))
    assert v.accepted and v.mor_acc_suspect == 1.0


def test_resolve_rejects_at_check_two():
    c, led, th = _setup()
    rev = MlpClassifier((4, 4), [-np.eye(4), np.zeros(4)], 0)
    v = resolve(c, rev, th, led, _Echo(), lambda x: np.full(len(x), NO_CLASS))
    assert not v.accepted and not v.check_results["suspect"] and v.check_results["source"]


def test_resolve_tampered_triggers_fail_check_three():
    c, led, th = _setup()
    t = c.with_triggers(trigger_x=c.trigger_x * 0.5)
    v = resolve(t, _Echo(), th, led, _Echo(), lambda x: np.full(len(x), NO_CLASS))
    assert not v.check_results["commitment"] and not v.accepted


def test_timestamp_check():
    c, led, th = _setup()
    truth = lambda x: np.full(len(x), NO_CLASS)  # noqa: E731
    later = "f" * 64
    led.timestamp(later)
    assert resolve(c, _Echo(), th, led, _Echo(), truth, suspect_commitment=later).check_results["timestamp"]
    earlier = Ledger()
    earlier.timestamp(later)
    earlier.timestamp(c.commitment)
    v = resolve(c, _Echo(), th, earlier, _Echo(), truth, suspect_commitment=later)
    assert not v.check_results["timestamp"]
    # an absent suspect commitment passes
    assert resolve(c, _Echo(), th, earlier, _Echo(), truth, suspect_commitment="0" * 64).check_results["timestamp"]


def test_resolve_is_pure():
    c, led, th = _setup()
    truth = lambda x: np.full(len(x), NO_CLASS)  # noqa: E731
    assert resolve(c, _Echo(), th, led, _Echo(), truth) == resolve(c, _Echo(), th, led, _Echo(), truth)


def test_container_fuzz_fails_commitment():
    c, led, th = _setup()
    blob = c.to_bytes()
    rng = np.random.default_rng(0)
    truth = lambda x: np.full(len(x), NO_CLASS)  # noqa: E731
    for _ in range(100):
        b = bytearray(blob)
        b[int(rng.integers(len(b)))] ^= int(rng.integers(1, 256))
        with np.errstate(all="ignore"):
            v = resolve_container(bytes(b), _Echo(), th, led, _Echo(), truth)
        assert not v.check_results["commitment"]


def test_arbitrate_prefers_earlier_and_ignores_order():
    c1, c2 = _claim(seed=1), _claim(seed=2)
    led = Ledger()
    led.timestamp(c2.commitment)
    led.timestamp(c1.commitment)
    th = thresholds_from_scores("adi", [0.1, 0.0], [0.9, 1.0])
    truth = lambda x: np.full(len(x), NO_CLASS)  # noqa: E731
    v1 = resolve(c1, _Echo(), th, led, _Echo(), truth)
    v2 = resolve(c2, _Echo(), th, led, _Echo(), truth)
    assert arbitrate(c1, v1, c2, v2, led) is c2
    assert arbitrate(c2, v2, c1, v1, led) is c2


def test_population_median():
    assert population_median([0.1, 0.9, 0.5]) == 0.5
