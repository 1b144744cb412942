import json

import pytest

from morarena.harness import (SEED_ENV, ConfigError, ExperimentConfig, World, append_record, derive_seed,
                              read_records, run_forge, run_honest, source_fidelity)
from morarena.judge import population_median

NON_DI = ("adi", "ewe", "lib", "dawn", "lukas")


def test_config_round_trip():
    cfg = ExperimentConfig(per_class=50, accuser_hidden=(32, 16), split=(0.4, 0.4, 0.2), scheme="lib")
    assert ExperimentConfig.parse(cfg.dump()) == cfg


def test_config_comments_and_dashes():
    cfg = ExperimentConfig.parse("# arena\ntrigger-size = 7  # small\n\nepsilon = 0.2\n")
    assert cfg.trigger_size == 7 and cfg.epsilon == 0.2


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError, match=r"cfg:3: unknown key 'colour'"):
        ExperimentConfig.parse("seed = 1\nseeds = 2\ncolour = red\n", "cfg")


@pytest.mark.parametrize("text", ["scheme = nope", "threshold = median", "population = 1", "epochs = ten",
                                  "version = 2", "seed 3"])
def test_invalid_config_rejected(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.parse(text)


def test_seed_environment_override(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "42")
    assert ExperimentConfig().with_env().seed == 42
    monkeypatch.setenv(SEED_ENV, "x")
    with pytest.raises(ConfigError):
        ExperimentConfig().with_env()
    monkeypatch.delenv(SEED_ENV)
    assert ExperimentConfig().with_env().seed == 0


def test_digest_ignores_output_directory():
    assert ExperimentConfig(out="a").digest == ExperimentConfig(out="b").digest
    assert ExperimentConfig(epochs=3).digest != ExperimentConfig().digest


def test_derive_seed_is_stable_and_role_specific():
    assert derive_seed(3, "judge", 1) == derive_seed(3, "judge", 1)
    assert len({derive_seed(3, "judge", i) for i in range(50)}) == 50
    assert derive_seed(3, "judge") != derive_seed(3, "accuser")


def test_records_reproducible_except_wall_clock(small_world):
    cfg = small_world.cfg
    a = run_forge(World(cfg, 11), "adi")
    b = run_forge(World(cfg, 11), "adi")
    a.pop("wall_clock"), b.pop("wall_clock")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_record_file_round_trip(tmp_path, small_world):
    rec = run_honest(small_world, "adi")
    path = tmp_path / "records.jsonl"
    append_record(path, rec)
    append_record(path, rec)
    back = read_records(path)
    assert len(back) == 2 and back[0]["stolen"]["accepted"] == rec["stolen"]["accepted"]


def test_missing_record_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_records(tmp_path / "none.jsonl")


def test_injected_models_replace_training(small_world):
    src = small_world.accuser_source
    w = World(small_world.cfg, 11, models={"accuser": src})
    assert w.accuser_source is src


@pytest.mark.parametrize("scheme", NON_DI)
def test_threshold_ordering(arena, scheme):
    ths = [w.thresholds(scheme) for w in arena.worlds()]
    assert all(t.independent <= t.extracted for t in ths)


def test_di_threshold_ordering_reverses(arena):
    ths = [w.thresholds("di") for w in arena.worlds()]
    assert sum(t.independent > t.extracted for t in ths) >= 3


@pytest.mark.parametrize("scheme", NON_DI + ("di",))
def test_extracted_median_at_least_independent_median(arena, scheme):
    recs = [run_honest(w, scheme) for w in arena.worlds()]
    stolen = population_median([r["stolen"]["mor_acc_suspect"] for r in recs])
    independent = population_median([r["independent"]["mor_acc_suspect"] for r in recs])
    assert stolen >= independent


def test_source_fidelity(arena):
    assert source_fidelity(arena.world(0)) >= 0.95
