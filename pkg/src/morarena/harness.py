"""Experiment configuration, per-seed worlds and the pipelines the CLI and tests run.

A ``World`` holds everything one seed needs: the dataset split, ground truth,
the accuser's source model and attack ensemble, the suspect, and the judge's
calibration populations. Models are trained lazily and cached, so pipelines
that share a seed share their models.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, fields
from functools import cached_property
from pathlib import Path

import numpy as np

from . import falseclaim as FC
from . import schemes as S
from .adversarial import AttackConfig
from .claims import SCHEMES, Ledger
from .data import GroundTruth, gen_blobs, load_csv, split_disjoint
from .defenses import PgdConfig, ScreeningPolicy, adversarial_train_pgd, screen_trigger_set
from .judge import THRESHOLD_KINDS, calibrate_thresholds, resolve
from .models import TrainConfig, accuracy, extract_ftal, predict, train

CONFIG_VERSION = 1
SEED_ENV = "MORARENA_SEED"
PRESETS = ("different", "same-structure", "same-data")


class ConfigError(ValueError):
    pass


def _dims(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat key = value configuration. Every key is documented in the README."""

    version: int = CONFIG_VERSION
    seed: int = 0
    seeds: int = 5
    dataset: str = "blobs"
    classes: int = 10
    dim: int = 20
    per_class: int = 600
    spread: float = 0.08
    split: tuple = (0.45, 0.45, 0.10)
    truth_radius: float = 0.3
    accuser_hidden: tuple = (64, 64)
    suspect_hidden: tuple = (96, 48)
    preset: str = "different"
    epochs: int = 30
    learning_rate: float = 0.1
    batch_size: int = 64
    ftal_epochs: int = 5
    ftal_learning_rate: float = 0.01
    population: int = 5
    ensemble: int = 4
    scheme: str = "adi"
    threshold: str = "mixed"
    trigger_size: int = 100
    epsilon: float = 0.3
    lib_epsilon: float = 0.3
    alpha: float = 0.03
    iterations: int = 100
    oversample: int = 1
    defense: str = "none"
    pgd_epsilon: float = 0.15
    pgd_steps: int = 10
    screening_models: int = 3
    flag_threshold: float = 1.0
    out: str = "runs"

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.threshold not in THRESHOLD_KINDS:
            raise ConfigError(f"unknown threshold {self.threshold!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.defense not in ("none", "pgd"):
            raise ConfigError(f"unknown defense {self.defense!r}")
        if self.seeds < 1 or self.population < 2 or self.ensemble < 0 or self.trigger_size < 1:
            raise ConfigError("seeds >= 1, population >= 2, ensemble >= 0, trigger_size >= 1")

    @classmethod
    def parse(cls, text: str, origin="<config>") -> "ExperimentConfig":
        kinds = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{lineno}: expected key = value")
            key, val = (p.strip() for p in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in kinds:
                raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
            values[key] = val
        return cls.from_strings(values, origin)

    @classmethod
    def from_strings(cls, values: dict, origin="<config>") -> "ExperimentConfig":
        out = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            try:
                if f.name == "split":
                    out[f.name] = _floats(raw)
                elif f.name.endswith("hidden"):
                    out[f.name] = _dims(raw)
                elif isinstance(f.default, bool):
                    out[f.name] = str(raw).lower() in ("1", "true", "yes")
                elif isinstance(f.default, int):
                    out[f.name] = int(raw)
                elif isinstance(f.default, float):
                    out[f.name] = float(raw)
                else:
                    out[f.name] = str(raw)
            except ValueError:
                raise ConfigError(f"{origin}: bad value for {f.name}: {raw!r}") from None
        return cls(**out)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        return cls.parse(path.read_text(), str(path))

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(e) for e in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dump())

    @property
    def digest(self) -> str:
        """Identifies the experiment; the output directory is not part of it."""
        body = self.with_(out="").dump()
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def with_(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def with_env(self) -> "ExperimentConfig":
        """Apply the global seed override from the environment, if set."""
        env = os.environ.get(SEED_ENV)
        if env is None or env == "":
            return self
        try:
            return self.with_(seed=int(env))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None

    @property
    def train_cfg(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, 0)

    def attack(self, ensemble=(), epsilon=None) -> AttackConfig:
        return AttackConfig(self.epsilon if epsilon is None else epsilon, self.alpha,
                            self.iterations, tuple(ensemble))

    def run_seeds(self):
        return [self.seed + i for i in range(self.seeds)]


def derive_seed(seed: int, role: str, index: int = 0) -> int:
    h = hashlib.sha256(f"{seed}/{role}/{index}".encode()).digest()
    return int.from_bytes(h[:4], "little")


ALT_HIDDEN = ((64, 64), (96, 48))


class World:
    """All parties' data and models for one seed (lazy, cached, read-only)."""

    def __init__(self, cfg: ExperimentConfig, seed: int, dataset=None, ledger=None, models=None,
                 thresholds=None):
        """``dataset``, ``ledger``, ``models`` (by role name) and ``thresholds`` (by
        scheme) replace what would otherwise be built from the config, so CLI
        commands compose through files."""
        self.cfg = cfg
        self.seed = int(seed)
        self._cache = {}
        self._lock = threading.Lock()
        if dataset is not None:
            self.__dict__["dataset"] = dataset
        if ledger is not None:
            self._cache["ledger"] = ledger
        for role, model in (models or {}).items():
            self._cache[("model", role)] = model
        for scheme, th in (thresholds or {}).items():
            self._cache[("thresholds", scheme)] = th

    def _memo(self, key, fn):
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        val = fn()
        with self._lock:
            return self._cache.setdefault(key, val)

    def _train(self, ds, role, index=0, hidden=None):
        cfg = dataclasses.replace(self.cfg.train_cfg, seed=derive_seed(self.seed, role, index))
        return train(ds, cfg, hidden or self.cfg.accuser_hidden)

    def _ftal(self, source, query_x, role, index=0, labels=None):
        cfg = TrainConfig(self.cfg.ftal_epochs, self.cfg.batch_size, self.cfg.ftal_learning_rate,
                          derive_seed(self.seed, role, index))
        return extract_ftal(source, query_x, cfg, labels=labels, source_lr=self.cfg.learning_rate)

    # --- data ---------------------------------------------------------------

    @cached_property
    def dataset(self):
        c = self.cfg
        if c.dataset == "blobs":
            return gen_blobs(self.seed, c.classes, c.dim, c.per_class, c.spread)
        return load_csv(c.dataset)

    @cached_property
    def split(self):
        return split_disjoint(self.dataset, self.cfg.split, seed=self.seed)

    @cached_property
    def truth(self):
        return GroundTruth(self.dataset, self.cfg.truth_radius)

    # --- parties --------------------------------------------------------------

    @property
    def accuser_source(self):
        """The accuser's source model, trained on part A."""
        return self._memo(("model", "accuser"), lambda: self._train(self.split.part_a, "accuser"))

    @cached_property
    def attack_ensemble(self):
        """Attacker-trained independents on the attacker's own pool."""
        return [self._train(self.split.part_a, "ensemble", i) for i in range(self.cfg.ensemble)]

    def suspect(self, preset=None):
        preset = preset or self.cfg.preset
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")

        def build():
            data = self.split.part_a if preset == "same-data" else self.split.part_b
            hidden = self.cfg.accuser_hidden if preset == "same-structure" else self.cfg.suspect_hidden
            return self._train(data, f"suspect-{preset}", hidden=hidden)
        return self._memo(("model", f"suspect-{preset}"), build)

    def hardened_suspect(self, epsilon=None):
        eps = self.cfg.pgd_epsilon if epsilon is None else epsilon

        def build():
            cfg = dataclasses.replace(self.cfg.train_cfg,
                                      seed=derive_seed(self.seed, "suspect-different"))
            return adversarial_train_pgd(self.split.part_b, cfg,
                                         PgdConfig(eps, self.cfg.pgd_steps), self.cfg.suspect_hidden)
        return self._memo(("hardened", eps), build)

    # --- judge ----------------------------------------------------------------

    @cached_property
    def judge_source(self):
        return self._train(self.split.part_a, "judge")

    @cached_property
    def judge_independents(self):
        return [self._train(self.split.part_b, "judge-ind", i, ALT_HIDDEN[i % 2])
                for i in range(self.cfg.population)]

    @cached_property
    def screening_models(self):
        """Judge-private independents on the holdout split; never used elsewhere."""
        return [self._train(self.split.holdout, "screen", i, ALT_HIDDEN[i % 2])
                for i in range(self.cfg.screening_models)]

    @cached_property
    def judge_private(self):
        """Judge-owned independents used only to build the judge's Lukas fingerprint."""
        return [self._train(self.split.holdout, "judge-private", i, ALT_HIDDEN[i % 2])
                for i in range(3)]

    def ledger(self) -> Ledger:
        return self._memo("ledger", Ledger)

    # --- honest claims --------------------------------------------------------

    def _honest(self, scheme, source, party):
        """Honest claim by ``party`` ('judge' or 'accuser') plus what a thief would steal."""
        led = self.ledger()
        pool = self.split.part_a
        seed = derive_seed(self.seed, f"{party}-{scheme}")
        size = self.cfg.trigger_size
        accuser_id = f"{party}-{self.seed}"
        api = None
        if scheme in ("adi", "ewe", "lib"):
            gen = getattr(S, f"{scheme}_claim")
            extra = {"eps": self.cfg.lib_epsilon} if scheme == "lib" else {}
            claim, model = gen(source, pool, self.truth, size=size, seed=seed,
                               accuser_id=accuser_id, ledger=led, **extra)
        elif scheme == "dawn":
            key = S.dawn_key(seed, source.digest)
            api = S.DawnApi(source, key)
            model = source
            claim = S.dawn_record(source, key, pool.features, accuser_id=accuser_id, ledger=led)
        elif scheme == "lukas":
            model = source
            ext = [self._ftal(source, pool.features, f"{party}-lukas-ext", i) for i in range(3)]
            ind = self.judge_private if party == "judge" else self.attack_ensemble[:3]
            if len(ind) < 2:
                ind = [self._train(pool, f"{party}-lukas-ind", i) for i in range(3)]
            claim = S.lukas_claim(source, pool, self.truth, ext, ind, seed=seed, size=size,
                                  attack=self.cfg.attack(), accuser_id=accuser_id, ledger=led)
        elif scheme == "di":
            model = source
            rng = np.random.default_rng(seed)
            members = pool.features[rng.choice(len(pool), size=size, replace=False)]
            hold = self.split.holdout
            public = hold.features[rng.choice(len(hold), size=min(size, len(hold)), replace=False)]
            claim = S.di_claim(source, members, public, seed=seed, accuser_id=accuser_id, ledger=led)
        else:
            raise ConfigError(f"unknown scheme {scheme!r}")
        return S.Watermarked(scheme, model, claim, api)

    def stolen(self, wm: S.Watermarked, role, index=0):
        """FTAL extraction of a watermarked model over the accuser pool (API labels for DAWN)."""
        q = self.split.part_a.features
        return self._ftal(wm.model, q, role, index, labels=wm.answer(q))

    def judge_claim(self, scheme):
        return self._memo(("judge", scheme), lambda: self._honest(scheme, self.judge_source, "judge"))

    def judge_extracted(self, scheme):
        def build():
            wm = self.judge_claim(scheme)
            return [self.stolen(wm, f"judge-ext-{scheme}", i) for i in range(self.cfg.population)]
        return self._memo(("judge-ext", scheme), build)

    def thresholds(self, scheme):
        def build():
            return calibrate_thresholds(self.judge_claim(scheme).claim, self.judge_independents,
                                        self.judge_extracted(scheme), self.truth)
        return self._memo(("thresholds", scheme), build)

    def honest_accuser(self, scheme):
        return self._memo(("accuser", scheme),
                          lambda: self._honest(scheme, self.accuser_source, "accuser"))

    # --- forged claims --------------------------------------------------------

    def forge(self, scheme, epsilon=None, ensemble=None, oversample=None):
        c = self.cfg
        n = c.ensemble if ensemble is None else ensemble
        ens = self.attack_ensemble[:n] if n <= len(self.attack_ensemble) else [
            self._train(self.split.part_a, "ensemble", i) for i in range(n)]
        over = c.oversample if oversample is None else oversample
        eps = c.epsilon if epsilon is None else float(epsilon)
        lib_eps = c.lib_epsilon if epsilon is None else float(epsilon)
        key = ("forge", scheme, eps, lib_eps, n, over)

        def build():
            cfg = c.attack(ens, eps)
            seed = derive_seed(self.seed, f"forge-{scheme}")
            src, pool, led = self.accuser_source, self.split.part_a, self.ledger()
            kw = dict(size=c.trigger_size, seed=seed, accuser_id=f"mallory-{self.seed}", ledger=led,
                      return_report=True)
            if scheme == "lib":
                kw["eps"] = lib_eps
            if scheme in FC.FORGES:
                return FC.FORGES[scheme](src, pool, self.truth, cfg, oversample=over, **kw)
            if scheme == "dawn":
                k = S.dawn_key(seed, "mallory")
                return FC.forge_dawn(src, k, pool, self.truth, cfg,
                                     oversample=max(over, FC.DAWN_OVERSAMPLE), **kw)
            if scheme == "di":
                return FC.forge_di(src, pool, self.split.holdout, cfg, **kw)
            raise ConfigError(f"unknown scheme {scheme!r}")
        return self._memo(key, build)


# --- records ------------------------------------------------------------------

_append_lock = threading.Lock()


def append_record(path, record: dict) -> None:
    """Append one JSON object per line; appends are serialized."""
    line = json.dumps(record, sort_keys=True, default=_jsonable)
    with _append_lock:
        with Path(path).open("a") as fh:
            fh.write(line + "\n")


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def read_records(path) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _record(cfg, world, kind, scheme, started, **payload):
    rec = {"kind": kind, "config": cfg.digest, "seed": world.seed, "scheme": scheme,
           "wall_clock": round(time.perf_counter() - started, 4)}
    rec.update(payload)
    return rec


# --- pipelines ----------------------------------------------------------------

def run_calibrate(world: World, scheme) -> dict:
    t0 = time.perf_counter()
    th = world.thresholds(scheme)
    return _record(world.cfg, world, "calibrate", scheme, t0, thresholds=th.as_dict())


def run_honest(world: World, scheme, kind=None) -> dict:
    """Honest claim against an FTAL-extracted suspect and an honest independent suspect."""
    t0 = time.perf_counter()
    kind = kind or world.cfg.threshold
    th = world.thresholds(scheme)
    wm = world.honest_accuser(scheme)
    led = world.ledger()
    stolen = world.stolen(wm, f"thief-{scheme}")
    independent = world.suspect("different")
    v_st = resolve(wm.claim, stolen, th, led, wm.model, world.truth, kind)
    v_in = resolve(wm.claim, independent, th, led, wm.model, world.truth, kind)
    return _record(world.cfg, world, "honest", scheme, t0, threshold=kind, thresholds=th.as_dict(),
                   stolen=v_st.as_dict(), independent=v_in.as_dict())


def run_forge(world: World, scheme, kind=None, preset=None, epsilon=None, ensemble=None,
              oversample=None, suspect=None) -> dict:
    """Forged claim against an independent suspect, resolved at every threshold kind."""
    t0 = time.perf_counter()
    kind = kind or world.cfg.threshold
    th = world.thresholds(scheme)
    claim, rep = world.forge(scheme, epsilon, ensemble, oversample)
    sus = suspect if suspect is not None else world.suspect(preset)
    led = world.ledger()
    v = resolve(claim, sus, th, led, world.accuser_source, world.truth, kind)
    value = v.mor_acc_suspect
    return _record(world.cfg, world, "forge", scheme, t0, threshold=kind, thresholds=th.as_dict(),
                   preset=preset or world.cfg.preset,
                   epsilon=world.cfg.epsilon if epsilon is None else epsilon,
                   ensemble=world.cfg.ensemble if ensemble is None else ensemble,
                   verdict=v.as_dict(), mor_acc=value, claim_size=len(claim),
                   exceeds_mixed=bool(value > th.mixed), exceeds_extracted=bool(value > th.extracted),
                   exceeds_independent=bool(value > th.independent),
                   retention=rep.retention, source_hit_rate=rep.source_hit_rate)


def run_screen(world: World, scheme) -> dict:
    t0 = time.perf_counter()
    th = world.thresholds(scheme)
    policy = ScreeningPolicy(tuple(world.screening_models), world.cfg.flag_threshold)
    party = [world.accuser_source, world.suspect(), *world.attack_ensemble]
    policy.check_disjoint(party)
    honest = screen_trigger_set(world.honest_accuser(scheme).claim, policy, th, world.truth)
    forged = screen_trigger_set(world.forge(scheme)[0], policy, th, world.truth)
    return _record(world.cfg, world, "screen", scheme, t0, thresholds=th.as_dict(),
                   honest={"verdict": honest.verdict, "scores": honest.scores},
                   forged={"verdict": forged.verdict, "scores": forged.scores})


def run_defend(world: World, scheme="adi") -> dict:
    """Forged untargeted claims against an undefended and a PGD-hardened suspect."""
    t0 = time.perf_counter()
    c = world.cfg
    eps_d = c.pgd_epsilon
    plain = world.suspect("different")
    hard = world.hardened_suspect(eps_d)
    hold = world.split.holdout

    def mor(eps, model):
        claim, _ = world.forge(scheme, epsilon=eps)
        return S.score(claim, model, world.truth)
    return _record(c, world, "defend", scheme, t0, defender_epsilon=eps_d,
                   undefended=mor(eps_d, plain), hardened=mor(eps_d, hard),
                   hardened_2x=mor(2 * eps_d, hard),
                   clean_plain=accuracy(plain, hold.features, hold.labels),
                   clean_hardened=accuracy(hard, hold.features, hold.labels))


def forged_score(world: World, scheme, epsilon=None, suspect=None):
    """(suspect score, trigger count) of a forged claim; a forge that yields no
    triggers leaves the attacker nothing to present and scores 0."""
    sus = world.suspect() if suspect is None else suspect
    try:
        claim, _ = world.forge(scheme, epsilon=epsilon)
    except FC.ForgeError:
        return 0.0, 0
    return S.score(claim, sus, world.truth), len(claim)


def run_sweep(world: World, scheme="adi", grid=(0.05, 0.1, 0.2, 0.3)) -> dict:
    t0 = time.perf_counter()
    values, sizes = {}, {}
    for e in grid:
        values[str(e)], sizes[str(e)] = forged_score(world, scheme, e)
    return _record(world.cfg, world, "sweep", scheme, t0, values=values, claim_sizes=sizes)


def e2e(cfg: ExperimentConfig, scheme=None, kind=None, records_path=None) -> list:
    """train -> calibrate -> forge -> resolve for every seed."""
    scheme = scheme or cfg.scheme
    out = []
    for seed in cfg.run_seeds():
        w = World(cfg, seed)
        rec = run_forge(w, scheme, kind)
        out.append(rec)
        if records_path is not None:
            append_record(records_path, rec)
    return out


def source_fidelity(world: World) -> float:
    """Agreement of an FTAL copy of the accuser source with the source on the holdout."""
    h = world.split.holdout.features
    ext = world._ftal(world.accuser_source, world.split.part_a.features, "fidelity")
    return float(np.mean(predict(ext, h) == predict(world.accuser_source, h)))
