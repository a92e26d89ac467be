"""Angular error, leave-one-subject-out protocol and debiasing indicators."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler

from gazedebias import dataset as ds
from gazedebias.dataset import ConfigError, Dataset, GazeDirection, Sample
from gazedebias.losses import LossWeights
from gazedebias.model import ArchConfig, ModelState, encoder_forward
from gazedebias.trainer import MetaConfig, run_training

log = logging.getLogger(__name__)


class DegenerateFeaturesWarning(UserWarning):
    pass


def gaze_to_vector(g) -> np.ndarray:
    """(yaw, pitch) -> unit 3-vector; works on a single pair or an (N, 2) array."""
    g = np.asarray(g, dtype=np.float64)
    yaw, pitch = g[..., 0], g[..., 1]
    return np.stack(
        [-np.cos(pitch) * np.sin(yaw), -np.sin(pitch), -np.cos(pitch) * np.cos(yaw)], axis=-1
    )


def angular_error(a, b) -> np.ndarray | float:
    """Angle in degrees between gaze directions; vectorised over leading axes."""
    va, vb = gaze_to_vector(a), gaze_to_vector(b)
    dot = np.clip(np.sum(va * vb, axis=-1), -1.0, 1.0)
    err = np.degrees(np.arccos(dot))
    return float(err) if np.ndim(err) == 0 else err


@dataclass
class MetricsReport:
    per_subject_errors: dict[int, float] = field(default_factory=dict)
    per_subject_counts: dict[int, int] = field(default_factory=dict)
    overall_mean: float = float("nan")
    subject_std: float = float("nan")
    probe_accuracy: float | None = None
    style_variances: dict[int, tuple[float, float]] | None = None
    heatmap: list[list[float | None]] | None = None
    per_sample_errors: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_sample_errors")
        d["per_subject_errors"] = {str(k): v for k, v in self.per_subject_errors.items()}
        d["per_subject_counts"] = {str(k): v for k, v in self.per_subject_counts.items()}
        if self.style_variances is not None:
            d["style_variances"] = {str(k): list(v) for k, v in self.style_variances.items()}
        return d

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "metrics.json").write_text(json.dumps(self.to_dict(), indent=1))
        with (directory / "per_subject.csv").open("w") as fh:
            fh.write("subject,mean_angle_error_deg,count\n")
            for s in sorted(self.per_subject_errors):
                fh.write(f"{s},{self.per_subject_errors[s]!r},{self.per_subject_counts.get(s, '')}\n")
        if self.heatmap is not None:
            write_grid_csv(self.heatmap, directory / "heatmap.csv")


def predict(state: ModelState, images, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Inference over arbitrarily many images -> (gaze (N, 2), features (N, d)) as numpy."""
    images = np.asarray(images)
    gazes, feats = [], []
    for start in range(0, len(images), batch_size):
        g, h = encoder_forward(state, torch.from_numpy(images[start:start + batch_size]))
        gazes.append(g.numpy())
        feats.append(h.numpy())
    if not gazes:
        d = state.arch.feature_dim
        return np.zeros((0, 2)), np.zeros((0, d))
    return np.concatenate(gazes), np.concatenate(feats)


def summarize_errors(errors: np.ndarray, subjects: np.ndarray) -> MetricsReport:
    report = MetricsReport(per_sample_errors=errors)
    for s in sorted(int(x) for x in np.unique(subjects)):
        sel = errors[subjects == s]
        report.per_subject_errors[s] = float(sel.mean())
        report.per_subject_counts[s] = int(len(sel))
    report.overall_mean = float(errors.mean())
    report.subject_std = float(np.std(list(report.per_subject_errors.values())))
    return report


def evaluate(state: ModelState, test: Dataset) -> MetricsReport:
    if len(test) == 0:
        raise ConfigError("empty test set")
    pred, _ = predict(state, test.images)
    errors = np.asarray(angular_error(pred.astype(np.float64), test.gazes), dtype=np.float64).reshape(-1)
    return summarize_errors(errors, test.subjects)


def run_loso(
    data: Dataset,
    arch: ArchConfig,
    cfg: MetaConfig,
    w: LossWeights,
    seed: int,
    ablation: str = "full",
    subjects: Sequence[int] | None = None,
    fold_callback=None,
    trace_callback=None,
) -> MetricsReport:
    """Train once per held-out subject and pool the held-out errors.

    ``fold_callback(subject, state, fold_report)`` and
    ``trace_callback(subject, trace)`` run after each fold.
    """
    all_subjects = data.subject_ids
    if len(all_subjects) < 2:
        raise ConfigError("leave-one-subject-out needs at least two subjects")
    if ablation in ("full", "no-adv"):
        cfg.check_subjects(len(all_subjects) - 1)
    fold_arch = ArchConfig(**{**arch.__dict__, "identity_count": len(all_subjects) - 1})
    errors, owners, folds = [], [], []
    for held_out in (subjects if subjects is not None else all_subjects):
        train, test = ds.split_leave_one_subject_out(data, held_out)
        try:
            state, trace = run_training(train, fold_arch, cfg, w, seed, ablation=ablation)
        except Exception as exc:
            raise RuntimeError(f"fold for held-out subject {held_out} failed: {exc}") from exc
        fold = evaluate(state, test)
        errors.append(fold.per_sample_errors)
        owners.append(test.subjects)
        folds.append(held_out)
        log.info("fold %d: %.3f deg", held_out, fold.overall_mean)
        if fold_callback is not None:
            fold_callback(held_out, state, fold)
        if trace_callback is not None:
            trace_callback(held_out, trace)
    report = summarize_errors(np.concatenate(errors), np.concatenate(owners))
    report.meta["folds"] = [int(f) for f in folds]
    return report


# ---------------------------------------------------------------------------
# identity probing

def fit_linear_probe(x: np.ndarray, y: np.ndarray, seed: int, test_size: float = 0.2) -> float:
    """Held-out accuracy of a multinomial logistic probe on standardised inputs."""
    x = np.asarray(x, dtype=np.float64).reshape(len(y), -1)
    x_tr, x_te, y_tr, y_te = train_test_split(x, y, test_size=test_size, random_state=seed, stratify=y)
    scaler = StandardScaler().fit(x_tr)
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(scaler.transform(x_tr), y_tr)
    return float(clf.score(scaler.transform(x_te), y_te))


def identity_probe(state: ModelState, data: Dataset, seed: int, shuffle_labels: bool = False) -> float:
    """Accuracy of a fresh linear probe predicting subject id from frozen h^g.

    Lower means less identity information in the features. Returns chance and
    warns when all feature rows are identical.
    """
    subjects = data.subject_ids
    if len(subjects) < 2:
        raise ConfigError("identity probe needs at least two subjects")
    _, feats = predict(state, data.images)
    labels = np.asarray(data.subjects)
    if shuffle_labels:
        labels = np.random.default_rng(seed).permutation(labels)
    chance = 1.0 / len(subjects)
    if np.all(feats == feats[:1]):
        warnings.warn("features are constant; probe returns chance", DegenerateFeaturesWarning)
        return chance
    return fit_linear_probe(feats, labels, seed)


def pixel_mean_probe(data: Dataset, seed: int) -> float:
    """Probe on per-image, per-channel raw pixel means: the confound baseline."""
    means = np.asarray(data.images, dtype=np.float64).mean(axis=(2, 3))
    return fit_linear_probe(means, np.asarray(data.subjects), seed)


# ---------------------------------------------------------------------------
# style clusters, heatmaps, features

def style_variance(state: ModelState, clusters: Sequence[Sequence[Sample]]) -> dict[int, tuple[float, float]]:
    """Population variance of predicted (yaw, pitch) inside each cluster."""
    out = {}
    for ci, cluster in enumerate(clusters):
        if len(cluster) == 0:
            raise ConfigError(f"cluster {ci} is empty")
        pred, _ = predict(state, np.stack([s.image for s in cluster]))
        pred = pred.astype(np.float64)
        out[ci] = (float(np.var(pred[:, 0])), float(np.var(pred[:, 1])))
    return out


DEFAULT_CLUSTER_GAZES = (
    (0.0, 0.0),
    (0.3, 0.0),
    (-0.3, 0.0),
    (0.0, 0.3),
    (0.0, -0.3),
    (0.25, 0.25),
    (-0.25, -0.25),
)


def build_style_clusters(
    config: ds.SynthConfig, n_styles: int = 70, base_gazes=DEFAULT_CLUSTER_GAZES, seed: int = 0
) -> list[list[Sample]]:
    return [
        ds.generate_style_cluster(GazeDirection(*g), n_styles, config, seed + 1000 * i)
        for i, g in enumerate(base_gazes)
    ]


@dataclass
class Heatmap:
    means: np.ndarray  # (n_yaw, n_pitch), NaN marks empty cells
    counts: np.ndarray
    yaw_edges: np.ndarray
    pitch_edges: np.ndarray

    def as_rows(self) -> list[list[float | None]]:
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.means]


def _bin(values: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n + 1)
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, n - 1)
    return idx, edges


def heatmap_from_errors(gazes: np.ndarray, errors: np.ndarray, bins: tuple[int, int]) -> Heatmap:
    n_yaw, n_pitch = bins
    if n_yaw < 1 or n_pitch < 1:
        raise ConfigError("bins must be >= 1")
    yi, yaw_edges = _bin(gazes[:, 0], n_yaw)
    pi, pitch_edges = _bin(gazes[:, 1], n_pitch)
    sums = np.zeros((n_yaw, n_pitch))
    counts = np.zeros((n_yaw, n_pitch), dtype=np.int64)
    np.add.at(sums, (yi, pi), errors)
    np.add.at(counts, (yi, pi), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return Heatmap(means, counts, yaw_edges, pitch_edges)


def error_heatmap(state: ModelState, test: Dataset, bins: tuple[int, int] = (5, 5)) -> Heatmap:
    report = evaluate(state, test)
    return heatmap_from_errors(np.asarray(test.gazes), report.per_sample_errors, bins)


def write_grid_csv(grid, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for row in grid:
            fh.write(",".join("" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))
                              for v in row) + "\n")
    return path


def export_features(state: ModelState, data: Dataset, path: str | Path) -> Path:
    """Write h^g rows as raw little-endian float32 with a JSON sidecar header.

    Each row is (index, subject, h_1 .. h_d) and all values are stored as
    float32, so ids must stay below 2**24.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _, feats = predict(state, data.images)
    rows = np.column_stack([
        np.asarray(data.index, dtype=np.float32),
        np.asarray(data.subjects, dtype=np.float32),
        feats.astype(np.float32),
    ]).astype("<f4")
    rows.tofile(path)
    header = {
        "rows": int(len(rows)),
        "feature_dim": int(state.arch.feature_dim),
        "columns": ["index", "subject"] + [f"h{i}" for i in range(state.arch.feature_dim)],
        "dtype": "float32-le",
    }
    Path(str(path) + ".json").write_text(json.dumps(header, indent=1))
    return path


def load_features(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    path = Path(path)
    header = json.loads(Path(str(path) + ".json").read_text())
    raw = np.fromfile(path, dtype="<f4").reshape(header["rows"], header["feature_dim"] + 2)
    return raw[:, 0].astype(np.int64), raw[:, 1].astype(np.int64), raw[:, 2:], header
