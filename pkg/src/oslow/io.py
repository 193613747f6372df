"""On-disk formats: dataset CSV + sidecar, checkpoints, results, manifests."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import CheckpointError
from .flow import FlowConfig, FlowModel
from .scm_bench import Dataset, DatasetDescriptor, DagSpec, generate
from .trainer import StandardizationStats, TrainConfig, TrainResult

SIDECAR_VERSION = 1
CHECKPOINT_VERSION = 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------- datasets
def format_csv(data: np.ndarray) -> str:
    d = data.shape[1]
    lines = [",".join(f"x{i + 1}" for i in range(d))]
    lines += [",".join(f"{v:.17g}" for v in row) for row in data]
    return "\n".join(lines) + "\n"


def read_csv(path) -> np.ndarray:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: header has {len(header)} columns but rows have {data.shape[1]}")
    return data


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def write_dataset(directory, ds: Dataset, desc: DatasetDescriptor) -> tuple[Path, Path]:
    """``<name>.csv`` plus a ``<name>.json`` sidecar able to regenerate it."""
    directory = Path(directory)
    csv_path = directory / f"{desc.name}.csv"
    atomic_write_text(csv_path, format_csv(ds.data))
    sidecar = {
        "format_version": SIDECAR_VERSION,
        "descriptor": desc.to_dict(),
        "family": desc.family,
        "dag": ds.dag.to_dict(),
        "scm": ds.spec.to_dict(),
        "seed": desc.seed,
        "data_sha256": sha256_file(csv_path),
    }
    side = sidecar_path(csv_path)
    write_json(side, sidecar)
    return csv_path, side


def read_sidecar(path) -> dict:
    side = read_json(path)
    if side.get("format_version") != SIDECAR_VERSION:
        raise ValueError(f"{path}: unsupported sidecar version {side.get('format_version')!r}")
    return side


def regenerate(sidecar: dict | str | Path) -> tuple[Dataset, DatasetDescriptor]:
    if not isinstance(sidecar, dict):
        sidecar = read_sidecar(sidecar)
    desc = DatasetDescriptor.from_dict(sidecar["descriptor"])
    return generate(desc), desc


def sidecar_dag(sidecar: dict) -> DagSpec:
    return DagSpec.from_dict(sidecar["dag"])


# ---------------------------------------------------------------- results
def write_result(path, result: TrainResult, extra: dict | None = None) -> None:
    doc = result.to_dict()
    doc["tool_version"] = __version__
    doc.update(extra or {})
    write_json(path, doc)


def save_checkpoint(path, result: TrainResult) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "tool_version": __version__,
        "flow": result.model.config.to_dict(),
        "train": result.config.to_dict(),
        "ordering": list(result.final_ordering),
        "stats": result.standardization_stats.to_dict(),
    }
    arrays = {f"param/{k}": v for k, v in result.model.params.items()}
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), gamma=result.gamma, **arrays)
    os.replace(tmp, path)


class Checkpoint:
    def __init__(self, model: FlowModel, ordering: tuple[int, ...], stats: StandardizationStats,
                 gamma: np.ndarray, train_config: TrainConfig):
        self.model = model
        self.ordering = ordering
        self.stats = stats
        self.gamma = gamma
        self.train_config = train_config


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            params = {k.split("/", 1)[1]: z[k].copy() for k in z.files if k.startswith("param/")}
            gamma = z["gamma"].copy()
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: incompatible checkpoint version {meta.get('format_version')!r}, "
                              f"expected {CHECKPOINT_VERSION}")
    cfg = FlowConfig(**meta["flow"])
    return Checkpoint(FlowModel(cfg, params), tuple(meta["ordering"]),
                      StandardizationStats.from_dict(meta["stats"]), gamma, TrainConfig.from_dict(meta["train"]))


# ---------------------------------------------------------------- manifests
def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Run manifest: config echo, seed, file hashes and metric records."""

    def __init__(self, path, config: dict | None = None, seed: int | None = None):
        self.path = Path(path)
        self.data = {
            "tool_version": __version__,
            "config": config or {},
            "seed": seed,
            "started": now_iso(),
            "finished": None,
            "files": {},
            "records": [],
        }

    @classmethod
    def load_or_create(cls, path, config: dict | None = None, seed: int | None = None) -> "Manifest":
        m = cls(path, config, seed)
        if m.path.exists():
            m.data.update(read_json(m.path))
            if config is not None:
                m.data["config"] = config
        return m

    def add_file(self, path) -> None:
        path = Path(path)
        self.data["files"][self._key(path)] = sha256_file(path)

    def _key(self, path: Path) -> str:
        try:
            return str(path.resolve().relative_to(self.path.parent.resolve()))
        except ValueError:
            return str(path.resolve())

    def add_record(self, record: dict) -> None:
        self.data["records"].append(record)

    @property
    def records(self) -> list[dict]:
        return self.data["records"]

    def completed(self) -> set[tuple[str, str, int]]:
        return {(r["dataset_id"], r["method"], r["seed"]) for r in self.records if not r.get("error")}

    def verify(self) -> list[str]:
        """Files whose on-disk hash no longer matches."""
        bad = []
        for rel, digest in self.data["files"].items():
            p = Path(rel) if os.path.isabs(rel) else self.path.parent / rel
            if not p.exists() or sha256_file(p) != digest:
                bad.append(rel)
        return bad

    def save(self, finished: bool = False) -> None:
        if finished:
            self.data["finished"] = now_iso()
        write_json(self.path, self.data)
