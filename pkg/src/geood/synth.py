"""Seeded synthetic embeddings with controllable geometry.

Every ID class is Gaussian with one shared covariance ``Q diag(lambda) Q^T``
where ``lambda_i = exp(slope * i)`` rescaled to trace ``dim``. Class means
form a regular simplex with edge ``class_separation * sqrt(lambda_1)``
centered at the origin.

Randomness comes from one ``SeedSequence(seed)`` split into independent
Philox streams: geometry, train, id_eval, and one per OOD kind (each
further split per class). Adding an OOD kind therefore never changes the
ID data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from geood.embeddings_io import EmbeddingSet, Role, save_embeddings_csv, write_manifest
from geood.exceptions import DataError

logger = logging.getLogger(__name__)

OOD_KINDS = ("radial_shell", "subspace_shift", "isotropic_far")
VARIABLE_PARAMS = ("within_spectrum_slope", "class_separation", "ood_scale", "dim", "norm_log_sigma")
_STREAMS = ("geometry", "train", "id_eval", *OOD_KINDS)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_classes: int = 5
    dim: int = 32
    samples_per_class: int = 500
    within_spectrum_slope: float = -0.1
    class_separation: float = 3.0
    ood_kind: str = "subspace_shift"
    ood_scale: float = 3.0
    eval_per_class: int | None = None  # default: samples_per_class // 2
    n_ood: int | None = None  # default: n_classes * eval_per_class
    norm_log_sigma: float = 0.0  # std of the log-normal factor applied to each ID vector's norm

    def __post_init__(self):
        if self.dim < 2:
            raise DataError(f"dim must be >= 2, got {self.dim}")
        if self.n_classes < 1:
            raise DataError("n_classes must be >= 1")
        if self.n_classes > self.dim:
            raise DataError("n_classes must not exceed dim (simplex embedding)")
        if self.samples_per_class < 2:
            raise DataError("samples_per_class must be >= 2")
        if self.ood_kind not in OOD_KINDS:
            raise DataError(f"unknown ood_kind {self.ood_kind!r}; expected one of {OOD_KINDS}")
        if self.samples_per_class < self.dim / 2:
            logger.warning("samples_per_class=%d is below dim/2=%g", self.samples_per_class, self.dim / 2)

    @property
    def n_eval(self) -> int:
        return self.eval_per_class if self.eval_per_class is not None else max(2, self.samples_per_class // 2)

    @property
    def n_ood_samples(self) -> int:
        return self.n_ood if self.n_ood is not None else self.n_classes * self.n_eval

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True, eq=False)
class SynthExperiment:
    """One synthetic "model": train, id_eval and named OOD sets plus ground truth."""

    name: str
    config: SynthConfig
    train: EmbeddingSet
    id_eval: EmbeddingSet
    ood: dict[str, EmbeddingSet] = field(default_factory=dict)
    spectrum: np.ndarray | None = None
    rotation: np.ndarray | None = None
    class_means: np.ndarray | None = None


def _streams(seed: int) -> dict[str, np.random.SeedSequence]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return dict(zip(_STREAMS, children))


def _rng(seq: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seq))


def target_spectrum(dim: int, slope: float) -> np.ndarray:
    lam = np.exp(slope * np.arange(1, dim + 1, dtype=np.float64))
    return lam * (dim / lam.sum())


def _geometry(cfg: SynthConfig):
    rng = _rng(_streams(cfg.seed)["geometry"])
    lam = target_spectrum(cfg.dim, cfg.within_spectrum_slope)
    Q, R = np.linalg.qr(rng.standard_normal((cfg.dim, cfg.dim)))
    Q = Q * np.sign(np.diag(R))
    K = cfg.n_classes
    if K == 1:
        means = np.zeros((1, cfg.dim))
    else:
        B, Rb = np.linalg.qr(rng.standard_normal((cfg.dim, K)))
        B = B * np.sign(np.diag(Rb))
        simplex = np.eye(K) - 1.0 / K  # vertices at mutual distance sqrt(2)
        means = (cfg.class_separation * np.sqrt(lam[0]) / np.sqrt(2.0)) * simplex @ B.T
    far_dir = rng.standard_normal(cfg.dim)
    far_dir /= np.linalg.norm(far_dir)
    return lam, Q, means, far_dir


def _draw_id(cfg, lam, Q, means, seq, n_per_class) -> tuple[np.ndarray, np.ndarray]:
    """ID samples, one child stream per class."""
    feats, labels = [], []
    scale = Q * np.sqrt(lam)
    for k, child in enumerate(seq.spawn(cfg.n_classes)):
        rng = _rng(child)
        X = means[k] + rng.standard_normal((n_per_class, cfg.dim)) @ scale.T
        if cfg.norm_log_sigma > 0:
            X = X * np.exp(cfg.norm_log_sigma * rng.standard_normal(n_per_class))[:, None]
        feats.append(X)
        labels.append(np.full(n_per_class, k, dtype=np.int64))
    return np.concatenate(feats), np.concatenate(labels)


def parse_ood_spec(spec: str, default_scale: float) -> tuple[str, float]:
    """``"kind"`` or ``"kind@scale"`` -> ``(kind, scale)``."""
    kind, _, scale = spec.partition("@")
    if kind not in OOD_KINDS:
        raise DataError(f"unknown ood_kind {kind!r}; expected one of {OOD_KINDS}")
    try:
        return kind, float(scale) if scale else default_scale
    except ValueError as exc:
        raise DataError(f"bad OOD scale in {spec!r}") from exc


def _draw_ood(cfg: SynthConfig, kind: str, lam, Q, means, far_dir) -> np.ndarray:
    # all scales of one kind share the kind's stream (common random numbers)
    seq = _streams(cfg.seed)[kind]
    n = cfg.n_ood_samples
    per_class = -(-n // cfg.n_classes)
    base_seq, extra_seq = seq.spawn(2)
    if kind == "isotropic_far":
        rng = _rng(extra_seq)
        return cfg.ood_scale * far_dir + rng.standard_normal((n, cfg.dim))
    X, _ = _draw_id(cfg, lam, Q, means, base_seq, per_class)
    X = X[_rng(extra_seq).permutation(X.shape[0])[:n]]
    if kind == "radial_shell":
        return X * cfg.ood_scale
    signs = _rng(extra_seq.spawn(1)[0]).choice([-1.0, 1.0], size=n)
    return X + (signs * cfg.ood_scale * np.sqrt(lam[-1]))[:, None] * Q[:, -1]


def generate_experiment(cfg: SynthConfig, ood_kinds: Sequence[str] | None = None,
                        name: str | None = None) -> SynthExperiment:
    """Generate train / id_eval plus one OOD set per requested kind.

    Entries of ``ood_kinds`` are ``"kind"`` (using ``cfg.ood_scale``) or
    ``"kind@scale"``; each becomes the OOD set's name.
    """
    specs = [cfg.ood_kind] if ood_kinds is None else list(ood_kinds)
    parsed = {spec: parse_ood_spec(spec, cfg.ood_scale) for spec in specs}
    lam, Q, means, far_dir = _geometry(cfg)
    streams = _streams(cfg.seed)
    Xtr, ytr = _draw_id(cfg, lam, Q, means, streams["train"], cfg.samples_per_class)
    Xev, yev = _draw_id(cfg, lam, Q, means, streams["id_eval"], cfg.n_eval)
    ood = {
        spec: EmbeddingSet(_draw_ood(replace(cfg, ood_scale=scale), kind, lam, Q, means, far_dir),
                           np.full(cfg.n_ood_samples, -1), spec, Role.OOD)
        for spec, (kind, scale) in parsed.items()
    }
    return SynthExperiment(
        name=name or f"synth_seed{cfg.seed}",
        config=cfg,
        train=EmbeddingSet(Xtr, ytr, "train", Role.TRAIN),
        id_eval=EmbeddingSet(Xev, yev, "id_eval", Role.ID_EVAL),
        ood=ood,
        spectrum=lam,
        rotation=Q,
        class_means=means,
    )


def generate(cfg: SynthConfig) -> tuple[EmbeddingSet, EmbeddingSet, EmbeddingSet]:
    """``(train, id_eval, ood)`` for ``cfg.ood_kind``."""
    exp = generate_experiment(cfg)
    return exp.train, exp.id_eval, exp.ood[cfg.ood_kind]


def model_family(base: SynthConfig, vary: str, values: Sequence[float],
                 ood_kinds: Sequence[str] | None = None) -> list[SynthExperiment]:
    """Experiments that differ only in ``vary``; all share ``base.seed``."""
    if vary not in VARIABLE_PARAMS:
        raise DataError(f"cannot vary {vary!r}; expected one of {VARIABLE_PARAMS}")
    if len(values) == 0:
        raise DataError("model_family needs at least one value")
    family = []
    for i, v in enumerate(values):
        v = int(v) if vary == "dim" else float(v)
        cfg = replace(base, **{vary: v})
        family.append(generate_experiment(cfg, ood_kinds, name=f"{vary}_{i:02d}"))
    return family


def write_experiment(exp: SynthExperiment, directory) -> Path:
    """Write CSVs and a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train = save_embeddings_csv(exp.train, directory / "train.csv")
    id_eval = save_embeddings_csv(exp.id_eval, directory / "id_eval.csv")
    ood = {name: save_embeddings_csv(es, directory / f"ood_{name}.csv") for name, es in exp.ood.items()}
    return write_manifest(directory / "manifest.json", exp.name, train, id_eval, ood, exp.train.dim,
                          synth_config=exp.config.to_dict())
