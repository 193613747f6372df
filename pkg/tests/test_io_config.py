import json

import numpy as np
import pytest

from oslow.config import DEFAULTS, flow_config, load_config, train_config, validate
from oslow.exceptions import CheckpointError, ConfigError
from oslow.io import (
    Manifest,
    format_csv,
    load_checkpoint,
    read_csv,
    read_sidecar,
    regenerate,
    save_checkpoint,
    sha256_file,
    sidecar_dag,
    write_dataset,
)
from oslow.scm_bench import DatasetDescriptor, generate
from oslow.trainer import TrainConfig, train

DESC = DatasetDescriptor("affine", "polynomial", "erdos-renyi", "laplace", 4, 120, 21)


@pytest.fixture(scope="module")
def trained():
    return train(generate(DESC).data, TrainConfig(epochs=3, k=3, batch_size=64))


def test_csv_round_trip_is_exact(tmp_path):
    data = np.random.default_rng(0).normal(size=(20, 3)) * 1e3
    path = tmp_path / "d.csv"
    path.write_text(format_csv(data))
    assert path.read_text().splitlines()[0] == "x1,x2,x3"
    assert np.array_equal(read_csv(path), data)


def test_csv_shape_mismatch(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x1,x2\n1,2,3\n")
    with pytest.raises(ValueError):
        read_csv(path)


def test_sidecar_regenerates_identical_bytes(tmp_path):
    ds = generate(DESC)
    csv_path, side_path = write_dataset(tmp_path, ds, DESC)
    side = read_sidecar(side_path)
    assert side["data_sha256"] == sha256_file(csv_path)
    assert side["descriptor"]["noise"] == "laplace"
    assert sidecar_dag(side) == ds.dag
    again, desc = regenerate(side_path)
    assert desc == DESC
    other = tmp_path / "again"
    other.mkdir()
    csv2, _ = write_dataset(other, again, desc)
    assert sha256_file(csv2) == side["data_sha256"]


def test_sidecar_version_is_checked(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"format_version": 99}))
    with pytest.raises(ValueError):
        read_sidecar(path)


def test_checkpoint_round_trip(tmp_path, trained):
    path = tmp_path / "m.ckpt.npz"
    save_checkpoint(path, trained)
    ck = load_checkpoint(path)
    assert ck.ordering == trained.final_ordering
    assert ck.train_config == trained.config
    assert np.array_equal(ck.gamma, trained.gamma)
    assert all(np.array_equal(ck.model.params[k], v) for k, v in trained.model.params.items())
    assert np.array_equal(ck.stats.means, trained.standardization_stats.means)


def test_checkpoint_version_mismatch(tmp_path, trained):
    path = tmp_path / "m.ckpt.npz"
    save_checkpoint(path, trained)
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays["meta"]))
    meta["format_version"] = 0
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.npz")


def test_manifest_tracks_files_and_records(tmp_path):
    f = tmp_path / "a.txt"
    f.write_text("one")
    m = Manifest(tmp_path / "manifest.json", {"seed": 1}, 1)
    m.add_file(f)
    m.add_record({"dataset_id": "a", "method": "oslow", "seed": 0})
    m.add_record({"dataset_id": "b", "method": "oslow", "seed": 0, "error": "numeric"})
    m.save(finished=True)
    back = Manifest.load_or_create(tmp_path / "manifest.json")
    assert back.completed() == {("a", "oslow", 0)}
    assert "a.txt" in back.data["files"] and back.data["finished"]
    assert back.verify() == []
    f.write_text("two")
    assert back.verify() == ["a.txt"]


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("")
    assert load_config(path) == DEFAULTS
    assert load_config() == DEFAULTS


def test_config_overrides_and_number_coercion(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\ntrain:\n  lr_theta: 1e-3\n  epochs: 10\nflow:\n  hidden_multipliers: [2]\n")
    cfg = load_config(path)
    assert cfg["train"]["lr_theta"] == 1e-3 and isinstance(cfg["train"]["lr_theta"], float)
    tcfg = train_config(cfg, 3)
    assert tcfg.epochs == 10 and tcfg.seed == 3 and tcfg.flow.hidden_multipliers == (2,)


@pytest.mark.parametrize("text,line", [
    ("train:\n  epochs: 10\n  epoks: 3\n", 3),
    ("seed: 0\ntrain:\n  method: annealing\n", 3),
    ("gen:\n  num_samples: many\n", 2),
    ("bench:\n  methods: [oslow, magic]\n", 2),
    ("colour: red\n", 1),
])
def test_config_errors_name_the_line(tmp_path, text, line):
    path = tmp_path / "c.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError, match=f"c.yaml:{line}:"):
        load_config(path)


def test_config_rejects_invalid_values():
    with pytest.raises(ConfigError):
        validate({"train": {"k": 0}})
    with pytest.raises(ConfigError):
        validate({"train": {"one_step": "yes"}})
    with pytest.raises(ConfigError):
        validate(["not", "a", "mapping"])


def test_auto_base_distribution_follows_noise():
    cfg = load_config()
    assert flow_config(cfg, 3, "laplace").base_distribution == "standard-laplace"
    assert flow_config(cfg, 3, "normal").base_distribution == "standard-normal"
    cfg["flow"]["base_distribution"] = "standard-normal"
    assert flow_config(cfg, 3, "laplace").base_distribution == "standard-normal"
