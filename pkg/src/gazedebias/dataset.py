"""Synthetic confounded gaze data, dataset views and subject-wise sampling.

Images are rendered from an eye-like template: a bright sclera ellipse fixed at
the image centre and a dark pupil disc displaced affinely by (yaw, pitch). Each
subject owns an appearance latent which tints the skin around the eye with a
low-frequency colour pattern scaled by ``confound_strength``. The tint sums to
zero across channels, so identity leaks into pixel statistics without touching
the luminance that carries the gaze signal.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration or argument values."""


class GazeDirection(NamedTuple):
    yaw: float
    pitch: float


@dataclass(frozen=True)
class SynthConfig:
    subject_count: int = 10
    samples_per_subject: int = 200
    image_shape: tuple[int, int, int] = (3, 32, 32)
    appearance_dim: int = 6
    gaze_range: float = 0.5
    confound_strength: float = 0.5
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))

    def validate(self) -> None:
        if self.subject_count < 1 or self.samples_per_subject < 1:
            raise ConfigError("subject_count and samples_per_subject must be positive")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"image_shape must be (channels, height, width), got {self.image_shape}")
        if self.image_shape[1] < 8 or self.image_shape[2] < 8:
            raise ConfigError("image height and width must be at least 8")
        if self.appearance_dim < 1:
            raise ConfigError("appearance_dim must be >= 1")
        if not 0 < self.gaze_range <= math.pi / 2:
            raise ConfigError("gaze_range must lie in (0, pi/2]")
        if self.confound_strength < 0 or self.noise_std < 0:
            raise ConfigError("confound_strength and noise_std must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
        try:
            cfg = cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# rendering

def _texture_modes(height: int, width: int, count: int) -> np.ndarray:
    """Low-frequency cosine basis, first mode constant. Shape (count, H, W)."""
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    freqs = sorted(
        ((u, v) for u in range(4) for v in range(4)),
        key=lambda uv: (uv[0] + uv[1], uv),
    )
    if count > len(freqs):
        raise ConfigError(f"appearance_dim must be <= {len(freqs)}")
    modes = []
    for u, v in freqs[:count]:
        mode = np.outer(np.cos(math.pi * v * ys), np.cos(math.pi * u * xs))
        modes.append(mode)
    return np.stack(modes)


def _chroma_basis(channels: int) -> np.ndarray:
    """Orthonormal rows spanning the zero-sum colour directions, shape (channels - 1, channels)."""
    # QR of centred identity columns gives an orthonormal basis of the sum-zero plane
    centred = np.eye(channels) - 1.0 / channels
    q, _ = np.linalg.qr(centred)
    return q[:, : channels - 1].T


def appearance_field(style: np.ndarray, channels: int, height: int, width: int) -> np.ndarray:
    """Subject-specific additive field, shape (channels, H, W).

    With several channels the field is a zero-sum colour tint: the first
    ``channels - 1`` latent entries pick the tint colour, the rest modulate it
    with low-frequency cosine modes. Luminance (the channel mean) is untouched,
    so filters with equal weights across channels cancel it exactly. A single
    channel image falls back to a luminance texture built from all entries.
    """
    style = np.asarray(style, dtype=np.float64)
    if channels == 1:
        modes = _texture_modes(height, width, len(style))
        return np.tensordot(style, modes, axes=1)[None]
    n_colour = channels - 1
    if len(style) <= n_colour:
        raise ConfigError(f"appearance_dim must exceed {n_colour} for {channels}-channel images")
    colour = style[:n_colour] @ _chroma_basis(channels)
    modes = _texture_modes(height, width, len(style) - n_colour + 1)
    spatial = modes[0] + 0.5 * np.tensordot(style[n_colour:], modes[1:], axes=1)
    return colour[:, None, None] * spatial[None]


def render_image(
    style: np.ndarray,
    gaze: GazeDirection | Sequence[float],
    noise_seed: int,
    config: SynthConfig,
) -> np.ndarray:
    """Pure renderer: (appearance latent, gaze, noise seed) -> float32 image in [0, 1]."""
    channels, height, width = config.image_shape
    yaw, pitch = float(gaze[0]), float(gaze[1])
    style = np.asarray(style, dtype=np.float64)

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ry, rx = 0.30 * height, 0.42 * width

    # pupil offset is affine in (yaw, pitch); full gaze_range maps to 60% of the sclera radius
    py = cy + 0.6 * ry * (pitch / config.gaze_range)
    px = cx + 0.6 * rx * (yaw / config.gaze_range)
    pupil_r = 0.16 * min(height, width)

    sclera = 1.0 / (1.0 + np.exp(4.0 * (np.sqrt(((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2) - 1.0) * 4.0))
    dist = np.sqrt((ys - py) ** 2 + (xs - px) ** 2)
    pupil = 1.0 / (1.0 + np.exp(2.0 * (dist - pupil_r)))

    skin, white, dark = 0.45, 0.8, 0.15
    eye = skin + sclera * (white - skin) - pupil * sclera * (white - dark)

    img = np.repeat(eye[None], channels, axis=0)
    # appearance lives on the skin only; the sclera and pupil are shared by all subjects
    img += 0.1 * config.confound_strength * (1.0 - sclera) * appearance_field(style, channels, height, width)
    rng = np.random.default_rng(noise_seed)
    img += config.noise_std * rng.standard_normal((channels, height, width))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset container

@dataclass
class Sample:
    image: np.ndarray
    gaze: GazeDirection
    subject: int
    style: np.ndarray | None = None
    noise_seed: int | None = None


@dataclass
class Dataset:
    """Subject-indexed sample collection; views share the parent's label space.

    ``index`` holds the position of each row in the root dataset, so views keep
    a stable sample identity.
    """

    images: np.ndarray  # (N, C, H, W) float32
    gazes: np.ndarray  # (N, 2) float64, columns (yaw, pitch)
    subjects: np.ndarray  # (N,) int64
    subject_count: int
    image_shape: tuple[int, int, int]
    provenance: dict = field(default_factory=dict)
    styles: np.ndarray | None = None  # (N, appearance_dim) for synthetic data
    noise_seeds: np.ndarray | None = None
    index: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.image_shape = tuple(int(s) for s in self.image_shape)
        n = len(self.subjects)
        if self.index is None:
            self.index = np.arange(n, dtype=np.int64)
        if self.images.shape[1:] != self.image_shape:
            raise ConfigError(f"images have shape {self.images.shape[1:]}, expected {self.image_shape}")
        if len(self.images) != n or len(self.gazes) != n:
            raise ConfigError("images, gazes and subjects must have equal length")
        if n and (self.subjects.min() < 0 or self.subjects.max() >= self.subject_count):
            raise ConfigError("subject id out of range")

    def __len__(self) -> int:
        return len(self.subjects)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            image=self.images[i],
            gaze=GazeDirection(float(self.gazes[i, 0]), float(self.gazes[i, 1])),
            subject=int(self.subjects[i]),
            style=None if self.styles is None else self.styles[i],
            noise_seed=None if self.noise_seeds is None else int(self.noise_seeds[i]),
        )

    @property
    def subject_ids(self) -> list[int]:
        """Subjects actually present in this dataset or view, sorted."""
        return sorted(int(s) for s in np.unique(self.subjects))

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            images=self.images[rows],
            gazes=self.gazes[rows],
            subjects=self.subjects[rows],
            subject_count=self.subject_count,
            image_shape=self.image_shape,
            provenance=self.provenance,
            styles=None if self.styles is None else self.styles[rows],
            noise_seeds=None if self.noise_seeds is None else self.noise_seeds[rows],
            index=self.index[rows],
        )

    def select_subjects(self, subjects: Sequence[int]) -> "Dataset":
        mask = np.isin(self.subjects, np.asarray(list(subjects), dtype=np.int64))
        return self.subset(np.flatnonzero(mask))


def generate_synthetic_dataset(config: SynthConfig) -> Dataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    k, n = config.subject_count, config.samples_per_subject
    latents = rng.standard_normal((k, config.appearance_dim))
    gazes = rng.uniform(-config.gaze_range, config.gaze_range, size=(k * n, 2))
    noise_seeds = rng.integers(0, 2**63 - 1, size=k * n, dtype=np.int64)
    subjects = np.repeat(np.arange(k, dtype=np.int64), n)
    styles = latents[subjects]
    images = np.stack(
        [render_image(styles[i], gazes[i], int(noise_seeds[i]), config) for i in range(k * n)]
    )
    return Dataset(
        images=images,
        gazes=gazes,
        subjects=subjects,
        subject_count=k,
        image_shape=config.image_shape,
        provenance={"synthetic": config.to_dict()},
        styles=styles,
        noise_seeds=noise_seeds,
    )


def generate_style_cluster(
    base_gaze: GazeDirection | Sequence[float], n_styles: int, config: SynthConfig, seed: int
) -> list[Sample]:
    """Render ``n_styles`` fresh appearances that all look in the same direction."""
    if n_styles < 2:
        raise ConfigError("n_styles must be >= 2")
    config.validate()
    gaze = GazeDirection(float(base_gaze[0]), float(base_gaze[1]))
    rng = np.random.default_rng(seed)
    latents = rng.standard_normal((n_styles, config.appearance_dim))
    noise_seeds = rng.integers(0, 2**63 - 1, size=n_styles, dtype=np.int64)
    return [
        Sample(
            image=render_image(latents[i], gaze, int(noise_seeds[i]), config),
            gaze=gaze,
            subject=-1,
            style=latents[i],
            noise_seed=int(noise_seeds[i]),
        )
        for i in range(n_styles)
    ]


# ---------------------------------------------------------------------------
# splitting and sampling

def split_leave_one_subject_out(d: Dataset, held_out: int) -> tuple[Dataset, Dataset]:
    if held_out not in d.subject_ids:
        raise ConfigError(f"subject {held_out} is not present in the dataset")
    test_mask = d.subjects == held_out
    return d.subset(np.flatnonzero(~test_mask)), d.subset(np.flatnonzero(test_mask))


def sample_meta_train_subjects(train: Dataset, k: int, rng: np.random.Generator) -> list[int]:
    pool = train.subject_ids
    if not 1 <= k <= len(pool):
        raise ConfigError(f"k={k} outside [1, {len(pool)}]")
    chosen = rng.choice(len(pool), size=k, replace=False)
    return sorted(pool[i] for i in chosen)


def sample_meta_adapt_subjects(
    train: Dataset, exclude: Sequence[int], p: int, rng: np.random.Generator
) -> list[int]:
    excluded = set(int(s) for s in exclude)
    pool = [s for s in train.subject_ids if s not in excluded]
    if p < 1 or p > len(pool):
        raise ConfigError(f"cannot draw p={p} adapt subjects from {len(pool)} remaining")
    chosen = rng.choice(len(pool), size=p, replace=False)
    return sorted(pool[i] for i in chosen)


class Batch(NamedTuple):
    images: np.ndarray
    gazes: np.ndarray
    subjects: np.ndarray
    rows: np.ndarray


def make_batches(
    d: Dataset, subjects: Sequence[int], batch_size: int, rng: np.random.Generator
) -> Iterator[Batch]:
    """Endless stream of shuffled batches over the pooled samples of ``subjects``.

    Each pass is a fresh permutation; the final batch of a pass may be short.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    rows = np.flatnonzero(np.isin(d.subjects, np.asarray(list(subjects), dtype=np.int64)))
    if len(rows) == 0:
        raise ConfigError("no samples for the requested subjects")
    while True:
        order = rows[rng.permutation(len(rows))]
        for start in range(0, len(order), batch_size):
            sel = order[start:start + batch_size]
            yield Batch(d.images[sel], d.gazes[sel], d.subjects[sel], sel)


# ---------------------------------------------------------------------------
# serialization

MANIFEST = "manifest.json"


def save_dataset(d: Dataset, directory: str | Path, image_format: str = "float32") -> Path:
    """Write a manifest plus one raw image file per sample.

    ``image_format`` is ``float32`` (row-major little-endian) or ``png8``.
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(len(d)):
        if image_format == "float32":
            name = f"images/{int(d.index[i]):06d}.f32"
            d.images[i].astype("<f4").tofile(directory / name)
        elif image_format == "png8":
            from PIL import Image

            name = f"images/{int(d.index[i]):06d}.png"
            arr = np.round(np.clip(d.images[i], 0, 1) * 255).astype(np.uint8)
            mode_arr = arr[0] if arr.shape[0] == 1 else np.moveaxis(arr, 0, -1)
            Image.fromarray(mode_arr).save(directory / name)
        else:
            raise ConfigError(f"unknown image format {image_format!r}")
        rec = {
            "index": int(d.index[i]),
            "subject": int(d.subjects[i]),
            "yaw": float(d.gazes[i, 0]),
            "pitch": float(d.gazes[i, 1]),
            "file": name,
        }
        if d.styles is not None:
            rec["style"] = [float(x) for x in d.styles[i]]
            rec["noise_seed"] = int(d.noise_seeds[i])
        records.append(rec)
    manifest = {
        "subject_count": d.subject_count,
        "image_shape": list(d.image_shape),
        "image_format": image_format,
        "provenance": d.provenance,
        "samples": records,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    shape = tuple(manifest["image_shape"])
    fmt = manifest.get("image_format", "float32")
    recs = manifest["samples"]
    images = np.empty((len(recs),) + shape, dtype=np.float32)
    for i, rec in enumerate(recs):
        path = directory / rec["file"]
        if fmt == "float32":
            images[i] = np.fromfile(path, dtype="<f4").reshape(shape)
        elif fmt == "png8":
            from PIL import Image

            arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
            images[i] = arr.reshape(shape) if arr.ndim == 2 else np.moveaxis(arr, -1, 0)
        else:
            raise ConfigError(f"unknown image format {fmt!r}")
    has_style = all("style" in r for r in recs) and recs
    return Dataset(
        images=images,
        gazes=np.array([[r["yaw"], r["pitch"]] for r in recs], dtype=np.float64).reshape(-1, 2),
        subjects=np.array([r["subject"] for r in recs], dtype=np.int64),
        subject_count=int(manifest["subject_count"]),
        image_shape=shape,
        provenance=manifest.get("provenance", {}),
        styles=np.array([r["style"] for r in recs]) if has_style else None,
        noise_seeds=np.array([r["noise_seed"] for r in recs], dtype=np.int64) if has_style else None,
        index=np.array([r["index"] for r in recs], dtype=np.int64),
    )
