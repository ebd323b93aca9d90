"""Loading, validating and writing feature-embedding datasets.

CSV is the canonical format (header row, one ``label`` column, the rest
numeric). NPY files are accepted read-only; labels come from a sibling
``<stem>.labels.npy`` file when present.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from geood.exceptions import DataError
from geood.validation import check_features, check_labels

logger = logging.getLogger(__name__)


class Role(str, Enum):
    TRAIN = "train"
    ID_EVAL = "id_eval"
    OOD = "ood"


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """A labeled N x d feature matrix with its split role.

    Features are stored as read-only float64 regardless of file precision.
    Labels are signed integers; -1 marks an unlabeled (OOD) row.
    """

    features: np.ndarray
    labels: np.ndarray
    name: str = "embeddings"
    role: Role = Role.TRAIN

    def __post_init__(self):
        role = Role(self.role)
        X = check_features(self.features, name=f"{self.name} features").copy()
        y = check_labels(self.labels, X.shape[0], name=f"{self.name} labels").copy()
        if role is Role.TRAIN:
            _check_train_labels(y, self.name)
        elif role is Role.ID_EVAL and np.any(y < 0):
            raise DataError(f"{self.name}: id_eval labels must be non-negative")
        elif np.any(y < -1):
            raise DataError(f"{self.name}: labels below -1 are not allowed")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "role", role)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        """Number of classes, ``max(label) + 1``; 0 for fully unlabeled sets."""
        return int(self.labels.max()) + 1 if self.labels.size and self.labels.max() >= 0 else 0

    @property
    def is_labeled(self) -> bool:
        return bool(np.all(self.labels >= 0))

    def with_features(self, features: np.ndarray, name: str | None = None) -> "EmbeddingSet":
        """Return a copy carrying new features (same labels and role)."""
        return EmbeddingSet(features, self.labels, name or self.name, self.role)


def _check_train_labels(y: np.ndarray, name: str) -> None:
    if np.any(y < 0):
        raise DataError(f"{name}: train labels must be in [0, K)")
    counts = np.bincount(y)
    missing = np.flatnonzero(counts < 2)
    if missing.size:
        raise DataError(
            f"{name}: every train class needs >= 2 samples; class {int(missing[0])} "
            f"has {int(counts[missing[0]])}"
        )


@dataclass(frozen=True)
class ExperimentManifest:
    """Binds the train / id-eval / OOD files of one model into an experiment."""

    model_name: str
    train_path: Path
    id_eval_path: Path
    ood_entries: tuple[tuple[str, Path], ...]
    feature_dim: int
    metadata: dict = field(default_factory=dict, compare=False)

    def load_train(self) -> EmbeddingSet:
        return load_embeddings(self.train_path, Role.TRAIN, expected_dim=self.feature_dim, name="train")

    def load_id_eval(self) -> EmbeddingSet:
        return load_embeddings(self.id_eval_path, Role.ID_EVAL, expected_dim=self.feature_dim, name="id_eval")

    def load_ood(self) -> dict[str, EmbeddingSet]:
        return {
            name: load_embeddings(path, Role.OOD, expected_dim=self.feature_dim, name=name)
            for name, path in self.ood_entries
        }


def load_manifest(path) -> ExperimentManifest:
    """Read a JSON manifest; relative file references resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("model_name", "train", "id_eval", "ood", "feature_dim"):
        if key not in doc:
            raise DataError(f"{path}: manifest is missing key {key!r}")
    base = path.parent

    def resolve(p) -> Path:
        p = Path(p)
        p = p if p.is_absolute() else base / p
        if not p.is_file():
            raise FileNotFoundError(f"manifest references a missing file: {p}")
        return p

    ood = doc["ood"]
    if not isinstance(ood, list) or not ood:
        raise DataError(f"{path}: manifest needs at least one OOD entry")
    entries = []
    for item in ood:
        if not isinstance(item, dict) or "name" not in item or "path" not in item:
            raise DataError(f"{path}: OOD entries must be objects with 'name' and 'path'")
        entries.append((str(item["name"]), resolve(item["path"])))
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise DataError(f"{path}: duplicate OOD dataset names")
    extra = {k: v for k, v in doc.items() if k not in ("model_name", "train", "id_eval", "ood", "feature_dim")}
    return ExperimentManifest(
        model_name=str(doc["model_name"]),
        train_path=resolve(doc["train"]),
        id_eval_path=resolve(doc["id_eval"]),
        ood_entries=tuple(entries),
        feature_dim=int(doc["feature_dim"]),
        metadata=extra,
    )


def write_manifest(path, model_name: str, train, id_eval, ood: dict, feature_dim: int, **metadata) -> Path:
    """Write a manifest with file references stored relative to ``path``'s directory."""
    path = Path(path)
    base = path.parent

    def rel(p) -> str:
        p = Path(p)
        try:
            return p.resolve().relative_to(base.resolve()).as_posix()
        except ValueError:
            return str(p)

    doc = {
        "model_name": model_name,
        "train": rel(train),
        "id_eval": rel(id_eval),
        "ood": [{"name": name, "path": rel(p)} for name, p in ood.items()],
        "feature_dim": int(feature_dim),
        **metadata,
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_embeddings(path, role="train", *, expected_dim: int | None = None, name: str | None = None) -> EmbeddingSet:
    """Load an :class:`EmbeddingSet` from a CSV or NPY file.

    Args:
        path: ``.csv`` or ``.npy`` file.
        role: split role; controls label requirements.
        expected_dim: if given, the feature dimension must match.
        name: dataset identifier, defaults to the file stem.

    Raises:
        FileNotFoundError: the file does not exist.
        DataError: parse failure, dimension mismatch, non-finite entry
            (row index reported) or invalid train labels.
    """
    path = Path(path)
    role = Role(role)
    name = name or path.stem
    if not path.is_file():
        raise FileNotFoundError(f"embedding file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".npy":
        X, y = _read_npy(path, role)
    elif suffix == ".csv":
        X, y = _read_csv(path, role)
    else:
        raise DataError(f"{path}: unsupported file extension {suffix!r} (expected .csv or .npy)")
    if expected_dim is not None and X.shape[1] != expected_dim:
        raise DataError(f"{path}: feature dimension {X.shape[1]} does not match expected {expected_dim}")
    try:
        return EmbeddingSet(X, y, name, role)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _read_csv(path: Path, role: Role) -> tuple[np.ndarray, np.ndarray]:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot parse CSV ({exc})") from exc
    cols = [c.strip() for c in df.columns]
    df.columns = cols
    if "label" in cols:
        if cols.count("label") > 1:
            raise DataError(f"{path}: more than one 'label' column")
        label_col = df.pop("label")
        try:
            y = pd.to_numeric(label_col, errors="raise").to_numpy()
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric label ({exc})") from exc
    elif role is Role.OOD:
        y = np.full(len(df), -1, dtype=np.int64)
    else:
        raise DataError(f"{path}: CSV header has no 'label' column")
    if df.shape[1] == 0:
        raise DataError(f"{path}: no feature columns")
    if len(df) == 0:
        raise DataError(f"{path}: no data rows")
    try:
        # numpy's str -> float conversion is correctly rounded; pandas' fast parser is not
        values = df.to_numpy(dtype=str).astype(np.float64)
    except ValueError:
        values = df.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        row = int(np.argwhere(bad.any(axis=1))[0, 0])
        raise DataError(f"{path}: non-finite or non-numeric entry in data row {row}")
    return values, y


def _read_npy(path: Path, role: Role) -> tuple[np.ndarray, np.ndarray]:
    try:
        arr = np.load(path, allow_pickle=False)
    except ValueError as exc:
        raise DataError(f"{path}: cannot parse NPY ({exc})") from exc
    if arr.ndim != 2:
        raise DataError(f"{path}: NPY array must be 2-D, got shape {arr.shape}")
    if arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8) or arr.dtype.byteorder == ">":
        raise DataError(f"{path}: NPY dtype must be little-endian float32/float64, got {arr.dtype}")
    X = arr.astype(np.float64)
    label_path = path.with_name(path.stem + ".labels.npy")
    if label_path.is_file():
        y = np.load(label_path, allow_pickle=False)
    elif role is Role.OOD:
        y = np.full(X.shape[0], -1, dtype=np.int64)
    else:
        raise DataError(f"{path}: role {role.value} needs a sibling label file {label_path.name}")
    return X, y


def save_embeddings_csv(es: EmbeddingSet, path) -> Path:
    """Write ``es`` as canonical CSV; floats use 17 significant digits so reloads are exact."""
    path = Path(path)
    header = ",".join(["label"] + [f"f{j}" for j in range(es.dim)])
    with path.open("w", newline="") as fh:
        fh.write(header + "\n")
        for label, row in zip(es.labels, es.features):
            fh.write(str(int(label)) + "," + ",".join(format(v, ".17g") for v in row) + "\n")
    return path


def split_train(es: EmbeddingSet, holdout_fraction: float, seed: int) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Stratified train / id-eval split, deterministic for a fixed ``seed``.

    Each class contributes ``round(holdout_fraction * n_k)`` rows to the
    evaluation split. Rows keep their original relative order.
    """
    if es.role is not Role.TRAIN:
        raise DataError("split_train expects a train set")
    if not 0.0 < holdout_fraction < 1.0:
        raise DataError(f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")
    rng = np.random.default_rng(seed)
    hold = np.zeros(es.n_samples, dtype=bool)
    for k in range(es.n_classes):
        idx = np.flatnonzero(es.labels == k)
        n_hold = int(round(holdout_fraction * idx.size))
        if idx.size - n_hold < 2:
            raise DataError(
                f"holdout fraction {holdout_fraction} leaves class {k} with "
                f"{idx.size - n_hold} train samples (need >= 2)"
            )
        hold[rng.permutation(idx)[:n_hold]] = True
    train = EmbeddingSet(es.features[~hold], es.labels[~hold], f"{es.name}_train", Role.TRAIN)
    id_eval = EmbeddingSet(es.features[hold], es.labels[hold], f"{es.name}_id_eval", Role.ID_EVAL)
    return train, id_eval
