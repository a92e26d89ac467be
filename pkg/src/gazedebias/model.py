"""Desk-scale gaze encoder and identity classifier over flat parameter vectors.

Both networks are evaluated functionally: each parameter block is a single 1-D
tensor and layer weights are reshaped views into it. That keeps the Reptile
vector algebra trivial and makes freezing one block a matter of not touching
its vector.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
import numpy as np
import torch
import torch.nn.functional as F

from gazedebias import losses
from gazedebias.dataset import ConfigError


class NumericalError(FloatingPointError):
    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message if batch_index is None else f"{message} (batch {batch_index})")
        self.batch_index = batch_index


@dataclass(frozen=True)
class ArchConfig:
    image_shape: tuple[int, int, int] = (3, 32, 32)
    conv_blocks: tuple[tuple[int, int, int], ...] = ((8, 3, 2), (16, 3, 2), (32, 3, 2))
    feature_dim: int = 256
    classifier_hidden: tuple[int, ...] = (64,)
    identity_count: int = 9
    feature_activation: str = "none"

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        object.__setattr__(self, "conv_blocks", tuple(tuple(int(v) for v in b) for b in self.conv_blocks))
        object.__setattr__(self, "classifier_hidden", tuple(int(h) for h in self.classifier_hidden))
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2")
        if self.identity_count < 2:
            raise ConfigError("identity_count must be >= 2")
        if self.feature_activation not in ("none", "relu"):
            raise ConfigError(f"feature_activation must be 'none' or 'relu', got {self.feature_activation!r}")
        if any(min(b) < 1 for b in self.conv_blocks):
            raise ConfigError("conv block entries must be positive")

    def encoder_layout(self) -> list[tuple[str, tuple[int, ...]]]:
        layout: list[tuple[str, tuple[int, ...]]] = []
        cin = self.image_shape[0]
        for i, (cout, k, _) in enumerate(self.conv_blocks):
            layout.append((f"conv{i}.weight", (cout, cin, k, k)))
            layout.append((f"conv{i}.bias", (cout,)))
            cin = cout
        layout.append(("feature.weight", (self.feature_dim, cin)))
        layout.append(("feature.bias", (self.feature_dim,)))
        layout.append(("gaze.weight", (2, self.feature_dim)))
        layout.append(("gaze.bias", (2,)))
        return layout

    def classifier_layout(self) -> list[tuple[str, tuple[int, ...]]]:
        layout: list[tuple[str, tuple[int, ...]]] = []
        fan_in = self.feature_dim
        for i, width in enumerate(self.classifier_hidden + (self.identity_count,)):
            layout.append((f"fc{i}.weight", (width, fan_in)))
            layout.append((f"fc{i}.bias", (width,)))
            fan_in = width
        return layout

    @property
    def encoder_size(self) -> int:
        return sum(math.prod(s) for _, s in self.encoder_layout())

    @property
    def classifier_size(self) -> int:
        return sum(math.prod(s) for _, s in self.classifier_layout())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["conv_blocks"] = [list(b) for b in self.conv_blocks]
        d["classifier_hidden"] = list(self.classifier_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown arch config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelState:
    encoder_params: torch.Tensor
    classifier_params: torch.Tensor
    arch: ArchConfig

    def __post_init__(self) -> None:
        if self.encoder_params.shape != (self.arch.encoder_size,):
            raise ConfigError(
                f"encoder vector has shape {tuple(self.encoder_params.shape)}, expected ({self.arch.encoder_size},)"
            )
        if self.classifier_params.shape != (self.arch.classifier_size,):
            raise ConfigError(
                f"classifier vector has shape {tuple(self.classifier_params.shape)}, "
                f"expected ({self.arch.classifier_size},)"
            )

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder_params.dtype

    def clone(self) -> "ModelState":
        return ModelState(self.encoder_params.clone(), self.classifier_params.clone(), self.arch)

    def to(self, dtype: torch.dtype) -> "ModelState":
        return ModelState(self.encoder_params.to(dtype), self.classifier_params.to(dtype), self.arch)


def _unflatten(vec: torch.Tensor, layout) -> dict[str, torch.Tensor]:
    out, offset = {}, 0
    for name, shape in layout:
        n = math.prod(shape)
        out[name] = vec[offset:offset + n].view(shape)
        offset += n
    return out


def init_model(arch: ArchConfig, seed: int, dtype: torch.dtype = torch.float32) -> ModelState:
    """He-uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.

    The larger ReLU-preserving scale matters here: with the 1/sqrt(fan_in)
    default the pooled features start so small that the identity classifier
    cannot separate subjects and the adversarial game never starts.
    """
    rng = np.random.default_rng(seed)

    def build(layout) -> torch.Tensor:
        chunks = []
        for name, shape in layout:
            if name.endswith(".bias"):
                chunks.append(np.zeros(math.prod(shape)))
            else:
                fan_in = math.prod(shape[1:])
                bound = math.sqrt(6.0 / fan_in)
                chunks.append(rng.uniform(-bound, bound, size=math.prod(shape)))
        return torch.from_numpy(np.concatenate(chunks)).to(dtype)

    return ModelState(build(arch.encoder_layout()), build(arch.classifier_layout()), arch)


def get_params(state: ModelState, which: str) -> torch.Tensor:
    if which == "encoder":
        return state.encoder_params.clone()
    if which == "classifier":
        return state.classifier_params.clone()
    raise ValueError(f"which must be 'encoder' or 'classifier', got {which!r}")


def set_params(state: ModelState, which: str, vec: torch.Tensor) -> ModelState:
    """Return a new state with one block replaced; the other block is shared untouched."""
    vec = torch.as_tensor(vec).detach().clone()
    if which == "encoder":
        return ModelState(vec, state.classifier_params, state.arch)
    if which == "classifier":
        return ModelState(state.encoder_params, vec, state.arch)
    raise ValueError(f"which must be 'encoder' or 'classifier', got {which!r}")


def _as_images(images, arch: ArchConfig, dtype: torch.dtype) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images).to(dtype)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if tuple(x.shape[1:]) != arch.image_shape:
        raise ConfigError(f"image shape {tuple(x.shape[1:])} does not match arch {arch.image_shape}")
    return x


def encoder_apply(encoder_params: torch.Tensor, arch: ArchConfig, images) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable encoder: images -> (gaze (N, 2), features h^g (N, d))."""
    p = _unflatten(encoder_params, arch.encoder_layout())
    x = _as_images(images, arch, encoder_params.dtype)
    x = (x - 0.5) / 0.5  # [0, 1] pixels -> [-1, 1]
    for i, (_, k, stride) in enumerate(arch.conv_blocks):
        x = F.relu(F.conv2d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=stride, padding=k // 2))
    pooled = x.mean(dim=(2, 3))
    features = F.linear(pooled, p["feature.weight"], p["feature.bias"])
    if arch.feature_activation == "relu":
        features = F.relu(features)
    gaze = F.linear(features, p["gaze.weight"], p["gaze.bias"])
    return gaze, features


def classifier_logits(classifier_params: torch.Tensor, arch: ArchConfig, features: torch.Tensor) -> torch.Tensor:
    if features.dim() != 2 or features.shape[1] != arch.feature_dim:
        raise ConfigError(f"features must be (N, {arch.feature_dim}), got {tuple(features.shape)}")
    p = _unflatten(classifier_params, arch.classifier_layout())
    x = features
    n_layers = len(arch.classifier_hidden) + 1
    for i in range(n_layers):
        x = F.linear(x, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
        if i < n_layers - 1:
            x = F.relu(x)
    return x


def encoder_forward(state: ModelState, images) -> tuple[torch.Tensor, torch.Tensor]:
    with torch.no_grad():
        return encoder_apply(state.encoder_params, state.arch, images)


def classifier_forward(state: ModelState, features) -> torch.Tensor:
    """Identity distributions p^id, shape (N, identity_count), rows sum to one."""
    feats = torch.as_tensor(features).to(state.dtype)
    if feats.dim() == 1:
        feats = feats.unsqueeze(0)
    with torch.no_grad():
        return torch.softmax(classifier_logits(state.classifier_params, state.arch, feats), dim=1)


IDENTITY_PATH = "identity_path"
ENCODER_PATH = "encoder_path"


def path_loss(
    encoder_params: torch.Tensor,
    classifier_params: torch.Tensor,
    arch: ArchConfig,
    batch,
    loss_selector: str,
    weights: losses.LossWeights,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Scalar objective of one training path plus its component values.

    ``batch`` is (images, gazes, labels) with labels already mapped to
    classifier indices.
    """
    images, gazes, labels = batch[0], batch[1], batch[2]
    gaze_pred, features = encoder_apply(encoder_params, arch, images)
    probs = torch.softmax(classifier_logits(classifier_params, arch, features), dim=1)
    if loss_selector == IDENTITY_PATH:
        l_idc = losses.identity_loss(labels, probs)
        return weights.lambda_idc * l_idc, {"L_idc": float(l_idc.detach())}
    if loss_selector == ENCODER_PATH:
        l_adv = losses.adversarial_loss(probs)
        l_g = losses.gaze_loss(torch.as_tensor(np.asarray(gazes)).to(gaze_pred.dtype), gaze_pred)
        total = losses.total_encoder_loss(l_adv, l_g, weights)
        return total, {"L_adv": float(l_adv.detach()), "L_g": float(l_g.detach()), "L_total": float(total.detach())}
    raise ValueError(f"unknown loss selector {loss_selector!r}")


def gradients(
    state: ModelState,
    batch,
    loss_selector: str,
    weights: losses.LossWeights | None = None,
    batch_index: int | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Exact reverse-mode gradients of the selected path loss w.r.t. both blocks."""
    weights = weights or losses.LossWeights()
    enc = state.encoder_params.detach().clone().requires_grad_(True)
    cls = state.classifier_params.detach().clone().requires_grad_(True)
    loss, _ = path_loss(enc, cls, state.arch, batch, loss_selector, weights)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite {loss_selector} loss", batch_index)
    g_enc, g_cls = torch.autograd.grad(loss, (enc, cls), allow_unused=True)
    if g_enc is None:
        g_enc = torch.zeros_like(enc)
    if g_cls is None:
        g_cls = torch.zeros_like(cls)
    return g_enc.detach(), g_cls.detach()


# ---------------------------------------------------------------------------
# checkpoints

def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


_DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8")}


def save_checkpoint(
    state: ModelState, directory: str | Path, epoch: int | None = None, cfg_hash: str | None = None
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dtype_name = "float64" if state.dtype == torch.float64 else "float32"
    np_dtype = _DTYPES[dtype_name][1]
    state.encoder_params.detach().cpu().numpy().astype(np_dtype).tofile(directory / "encoder.bin")
    state.classifier_params.detach().cpu().numpy().astype(np_dtype).tofile(directory / "classifier.bin")
    manifest = {
        "arch": state.arch.to_dict(),
        "encoder_length": state.arch.encoder_size,
        "classifier_length": state.arch.classifier_size,
        "dtype": dtype_name,
        "epoch": epoch,
        "config_hash": cfg_hash,
    }
    (directory / "checkpoint.json").write_text(json.dumps(manifest, indent=1))
    return directory


def load_checkpoint(directory: str | Path) -> tuple[ModelState, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "checkpoint.json").read_text())
    arch = ArchConfig.from_dict(manifest["arch"])
    torch_dtype, np_dtype = _DTYPES[manifest.get("dtype", "float32")]
    enc = np.fromfile(directory / "encoder.bin", dtype=np_dtype)
    cls = np.fromfile(directory / "classifier.bin", dtype=np_dtype)
    if len(enc) != manifest["encoder_length"] or len(cls) != manifest["classifier_length"]:
        raise ConfigError(f"checkpoint vectors in {directory} do not match the manifest lengths")
    state = ModelState(torch.from_numpy(enc.astype(np_dtype)).to(torch_dtype),
                       torch.from_numpy(cls.astype(np_dtype)).to(torch_dtype), arch)
    return state, manifest
