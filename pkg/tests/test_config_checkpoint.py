import copy
import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from oltr.checkpoint import MANIFEST, CheckpointError, ConfigHashWarning, load_checkpoint, read_manifest, save_checkpoint
from oltr.config import DEFAULTS, SCHEMA, ConfigError, ExperimentConfig
from oltr.datagen import LongTailProfile, generate_gaussian_mixture
from oltr.training import ModelConfig, TrainConfig, train, train_step

SCHEMA_FILE = Path(__file__).resolve().parents[1] / "schemas" / "config.schema.json"


# -- config ------------------------------------------------------------------

def test_published_schema_matches_code():
    assert json.loads(SCHEMA_FILE.read_text()) == SCHEMA


def test_defaults_carry_fixed_constants():
    cfg = ExperimentConfig()
    assert cfg.objective().lam == 0.1 and cfg.objective().margin == 5.0
    assert cfg.threshold == 0.1
    assert cfg.data == DEFAULTS


@pytest.mark.parametrize("raw,where", [
    ({"training": {"epoch": 3}}, "training"),
    ({"bogus": 1}, "<root>"),
    ({"objective": {"lam": "big"}}, "objective.lam"),
    ({"training": {"precision": "f16"}}, "training.precision"),
    ({"openset": {"threshold": 2.0}}, "openset.threshold"),
    ({"training": {"classes_per_batch": 30}}, "training.classes_per_batch"),
    ({"active": {"stages": [[3]]}}, "active.stages.0"),
])
def test_invalid_configs_name_the_field(raw, where):
    with pytest.raises(ConfigError) as err:
        ExperimentConfig(raw)
    assert err.value.where == where


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{\n  "training": {\n    "epochs": 3,\n  }\n}\n')
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_file(path)
    assert err.value.where == "line 4"


def test_partial_config_merges_with_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"training": {"epochs": 3}}))
    cfg = ExperimentConfig.from_file(path)
    assert cfg.training().epochs == 3 and cfg.training().lr == DEFAULTS["training"]["lr"]


def test_overrides_and_hash():
    base = ExperimentConfig()
    other = base.with_overrides(seed=4, precision="f64")
    assert other.dataset["seed"] == 4 and other.training().seed == 4 and other.training().precision == "f64"
    assert base.hash() != other.hash()
    assert base.hash() == ExperimentConfig(json.loads(base.to_json())).hash()


# -- checkpoint --------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    train_set, _, _ = generate_gaussian_mixture(0, 6, 4, 1, LongTailProfile("exp", 4, 30, 5.0), 5,
                                                mean_radius=5.0)
    state, _ = train(train_set, ModelConfig(feat_dim=6, hidden=(8,)),
                     config=TrainConfig(epochs=1, classes_per_batch=2, precision="f64"))
    return state, train_set


def test_round_trip_continues_bitwise(trained, tmp_path):
    state, ds = trained
    direct = copy.deepcopy(state)
    save_checkpoint(state, tmp_path / "ck", "abc")
    restored = load_checkpoint(tmp_path / "ck", "abc")
    xb, yb = ds.x[:8], ds.y[:8]
    assert train_step(direct, xb, yb) == train_step(restored, xb, yb)
    for k in direct.params:
        assert direct.params[k].data.tobytes() == restored.params[k].data.tobytes(), k
        assert direct.velocity[k].tobytes() == restored.velocity[k].tobytes(), k
    assert direct.bank.centroids.tobytes() == restored.bank.centroids.tobytes()
    assert direct.rng.integers(1 << 30) == restored.rng.integers(1 << 30)


def test_manifest_lists_every_blob(trained, tmp_path):
    state, _ = trained
    save_checkpoint(state, tmp_path / "ck", "abc", extra={"note": 1})
    manifest = read_manifest(tmp_path / "ck")
    files = {p.name for p in (tmp_path / "ck").iterdir()} - {MANIFEST}
    assert files == {e["file"] for e in manifest["tensors"]}
    for e in manifest["tensors"]:
        assert (tmp_path / "ck" / e["file"]).stat().st_size == e["nbytes"]
        assert e["dtype"] in ("<f4", "<f8")
    assert manifest["objective"] == {"lam": 0.1, "margin": 5.0}
    assert manifest["extra"] == {"note": 1}


def test_truncated_blob_names_tensor(trained, tmp_path):
    state, _ = trained
    save_checkpoint(state, tmp_path / "ck")
    blob = tmp_path / "ck" / "param__cls.w.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(tmp_path / "ck")
    assert err.value.tensor == "param/cls.w"


def test_missing_blob_names_tensor(trained, tmp_path):
    state, _ = trained
    save_checkpoint(state, tmp_path / "ck")
    (tmp_path / "ck" / "bank__centroids.bin").unlink()
    with pytest.raises(CheckpointError, match="bank/centroids"):
        load_checkpoint(tmp_path / "ck")


def test_hash_mismatch_warns_and_loads(trained, tmp_path):
    state, _ = trained
    save_checkpoint(state, tmp_path / "ck", "abc")
    with pytest.warns(ConfigHashWarning):
        restored = load_checkpoint(tmp_path / "ck", "xyz")
    assert restored.epoch == state.epoch
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_checkpoint(tmp_path / "ck", "abc")


def test_saving_twice_is_byte_identical(trained, tmp_path):
    state, _ = trained
    save_checkpoint(state, tmp_path / "a", "h")
    save_checkpoint(state, tmp_path / "b", "h")
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_f32_state_round_trips(tmp_path):
    train_set, _, _ = generate_gaussian_mixture(1, 4, 3, 1, LongTailProfile("exp", 3, 20, 4.0), 5)
    state, _ = train(train_set, ModelConfig(feat_dim=4, hidden=(8,)), config=TrainConfig(epochs=0, classes_per_batch=2))
    save_checkpoint(state, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.params["cls.w"].dtype == np.float32
    assert back.params["cls.w"].data.tobytes() == state.params["cls.w"].data.tobytes()
