"""Two-path adversarial steps and the stochastic subject-wise Reptile loop.

Every inner step is written as ``params + delta`` with the delta computed
first, so the meta-train endpoint is literally ``theta_o + g_1 + ... + g_m``
and can be rebuilt from the recorded deltas bit for bit.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from gazedebias import dataset as ds
from gazedebias.dataset import ConfigError, Dataset
from gazedebias.losses import LossWeights
from gazedebias.model import (
    ENCODER_PATH,
    IDENTITY_PATH,
    ArchConfig,
    ModelState,
    NumericalError,
    init_model,
    path_loss,
)

log = logging.getLogger(__name__)

ABLATIONS = {
    "full": (True, True),
    "no-adv": (True, False),
    "no-meta": (False, True),
    "plain": (False, False),
}


@dataclass(frozen=True)
class MetaConfig:
    k: int = 8
    p: int = 2
    T: int = 5
    m: int = 20
    j: int = 10
    epochs: int = 30
    epsilon0: float = 1.0
    epsilon_schedule: str = "multiplicative"
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if min(self.k, self.p, self.T, self.epochs, self.batch_size) < 1 or min(self.m, self.j) < 0:
            raise ConfigError("k, p, T, epochs, batch_size must be >= 1 and m, j >= 0")
        if not 0 < self.epsilon0 <= 1:
            raise ConfigError("epsilon0 must lie in (0, 1]")
        if self.epsilon_schedule not in ("multiplicative", "linear"):
            raise ConfigError(f"unknown epsilon schedule {self.epsilon_schedule!r}")

    def epsilon(self, epoch: int) -> float:
        """Step size for a zero-based epoch."""
        if self.epsilon_schedule == "multiplicative":
            return self.epsilon0 * (1.0 - 1.0 / self.epochs) ** epoch
        return self.epsilon0 * (1.0 - epoch / self.epochs)

    def check_subjects(self, n_subjects: int) -> None:
        if self.k + self.p > n_subjects:
            raise ConfigError(f"k + p = {self.k + self.p} exceeds the {n_subjects} training subjects")

    def iterations_per_epoch(self) -> int:
        return self.m + self.T * self.j

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetaConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown meta config fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class Moments:
    m: torch.Tensor
    v: torch.Tensor
    t: int = 0

    @classmethod
    def zeros_like(cls, vec: torch.Tensor) -> "Moments":
        return cls(torch.zeros_like(vec), torch.zeros_like(vec), 0)


@dataclass
class OptimizerState:
    """Adam moments per parameter block, decoupled weight decay."""

    encoder: Moments
    classifier: Moments
    lr: float = 1e-3
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def create(cls, state: ModelState, cfg: MetaConfig | None = None) -> "OptimizerState":
        cfg = cfg or MetaConfig()
        return cls(
            Moments.zeros_like(state.encoder_params),
            Moments.zeros_like(state.classifier_params),
            cfg.lr,
            cfg.weight_decay,
            cfg.betas,
            cfg.adam_eps,
        )

    def reset_encoder(self, like: torch.Tensor) -> None:
        self.encoder = Moments.zeros_like(like)


def adam_delta(params: torch.Tensor, grad: torch.Tensor, mom: Moments, opt: OptimizerState) -> torch.Tensor:
    """Advance ``mom`` in place and return the additive parameter update."""
    b1, b2 = opt.betas
    mom.t += 1
    mom.m = b1 * mom.m + (1 - b1) * grad
    mom.v = b2 * mom.v + (1 - b2) * grad * grad
    m_hat = mom.m / (1 - b1 ** mom.t)
    v_hat = mom.v / (1 - b2 ** mom.t)
    return -opt.lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * params)


# ---------------------------------------------------------------------------
# trace

TRACE_FIELDS = ["epoch", "phase", "branch", "step", "path", "L_idc", "L_adv", "L_g", "L_total"]


@dataclass
class TrainTrace:
    records: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    deltas: list[torch.Tensor] | None = None

    def add(self, epoch: int, phase: str, branch: int, step: int, path: str, values: dict) -> None:
        row = {"epoch": epoch, "phase": phase, "branch": branch, "step": step, "path": path}
        for key in ("L_idc", "L_adv", "L_g", "L_total"):
            row[key] = values.get(key, float("nan"))
        self.records.append(row)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
            writer.writeheader()
            for row in self.records:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return path


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, trace: TrainTrace):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# batches with classifier labels

class LabelMap:
    """Maps dataset subject ids onto contiguous classifier indices."""

    def __init__(self, subject_ids: Sequence[int], subject_count: int):
        self.subject_ids = list(subject_ids)
        self.lookup = np.full(max(subject_count, max(self.subject_ids) + 1), -1, dtype=np.int64)
        self.lookup[self.subject_ids] = np.arange(len(self.subject_ids))

    def __len__(self) -> int:
        return len(self.subject_ids)

    def __call__(self, subjects: np.ndarray) -> np.ndarray:
        labels = self.lookup[subjects]
        if np.any(labels < 0):
            raise ConfigError("batch contains subjects unknown to the classifier")
        return labels


def tensor_batch(batch: ds.Batch, labels: LabelMap, dtype: torch.dtype):
    return (
        torch.from_numpy(batch.images).to(dtype),
        torch.from_numpy(batch.gazes).to(dtype),
        torch.from_numpy(labels(batch.subjects)),
    )


# ---------------------------------------------------------------------------
# the two training paths

def classifier_step(state: ModelState, opt: OptimizerState, batch, w: LossWeights):
    """Update the identity classifier on lambda_idc * L_idc; the encoder is frozen."""
    cls = state.classifier_params.detach().clone().requires_grad_(True)
    loss, values = path_loss(state.encoder_params.detach(), cls, state.arch, batch, IDENTITY_PATH, w)
    if not torch.isfinite(loss):
        raise NumericalError("non-finite identity loss")
    (grad,) = torch.autograd.grad(loss, (cls,))
    delta = adam_delta(state.classifier_params, grad, opt.classifier, opt)
    new_state = ModelState(state.encoder_params, state.classifier_params + delta, state.arch)
    return new_state, opt, values["L_idc"]


def encoder_step(state: ModelState, opt: OptimizerState, batch, w: LossWeights, return_delta: bool = False):
    """Update the encoder on lambda_adv * L_adv + L_g through the frozen classifier."""
    enc = state.encoder_params.detach().clone().requires_grad_(True)
    loss, values = path_loss(enc, state.classifier_params.detach(), state.arch, batch, ENCODER_PATH, w)
    if not torch.isfinite(loss):
        raise NumericalError("non-finite encoder loss")
    (grad,) = torch.autograd.grad(loss, (enc,))
    delta = adam_delta(state.encoder_params, grad, opt.encoder, opt)
    new_state = ModelState(state.encoder_params + delta, state.classifier_params, state.arch)
    out = (new_state, opt, values["L_adv"], values["L_g"])
    if return_delta:
        return out + (delta, values)
    return out


def two_path_iterations(
    state: ModelState,
    opt: OptimizerState,
    batches: Iterator[ds.Batch],
    n_iter: int,
    labels: LabelMap,
    w: LossWeights,
    trace: TrainTrace,
    epoch: int,
    phase: str,
    branch: int,
    adversarial: bool = True,
    record_deltas: bool = False,
) -> ModelState:
    for step in range(n_iter):
        batch = tensor_batch(next(batches), labels, state.dtype)
        try:
            if adversarial:
                state, opt, l_idc = classifier_step(state, opt, batch, w)
                trace.add(epoch, phase, branch, step, "classifier", {"L_idc": l_idc})
            state, opt, _, _, delta, values = encoder_step(state, opt, batch, w, return_delta=True)
        except NumericalError as exc:
            raise TrainingAborted(f"{exc} at epoch {epoch}, {phase} branch {branch} step {step}", trace) from exc
        trace.add(epoch, phase, branch, step, "encoder", values)
        if record_deltas and trace.deltas is not None:
            trace.deltas.append(delta)
    return state


# ---------------------------------------------------------------------------
# Reptile phases

def reptile_interpolate(theta: torch.Tensor, phi: torch.Tensor, epsilon: float) -> torch.Tensor:
    if theta.shape != phi.shape:
        raise ValueError(f"length mismatch {tuple(theta.shape)} vs {tuple(phi.shape)}")
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon == 1:
        return phi.clone()
    if epsilon == 0:
        return theta.clone()
    return theta + epsilon * (phi - theta)


def reptile_average(theta: torch.Tensor, phis: Sequence[torch.Tensor], epsilon: float) -> torch.Tensor:
    """theta + epsilon * mean_i(phi_i - theta)."""
    if not phis:
        raise ValueError("need at least one adapted vector")
    if len(phis) == 1:
        return reptile_interpolate(theta, phis[0], epsilon)
    mean_delta = torch.stack([phi - theta for phi in phis]).mean(dim=0)
    return theta + epsilon * mean_delta


def meta_train_phase(
    state: ModelState,
    opt: OptimizerState,
    data: Dataset,
    subjects: Sequence[int],
    cfg: MetaConfig,
    w: LossWeights,
    rng: np.random.Generator,
    labels: LabelMap,
    trace: TrainTrace | None = None,
    epoch: int = 0,
    adversarial: bool = True,
    record_deltas: bool = False,
):
    """m two-path iterations on the meta-train subjects; returns (phi, state, opt, trace)."""
    if not subjects:
        raise ConfigError("meta-train subject set is empty")
    trace = trace if trace is not None else TrainTrace()
    if record_deltas and trace.deltas is None:
        trace.deltas = []
    batches = ds.make_batches(data, subjects, cfg.batch_size, rng)
    state = two_path_iterations(
        state, opt, batches, cfg.m, labels, w, trace, epoch, "meta_train", 0, adversarial, record_deltas
    )
    return state.encoder_params.clone(), state, opt, trace


def meta_adapt_phase(
    state: ModelState,
    opt: OptimizerState,
    data: Dataset,
    exclude: Sequence[int],
    cfg: MetaConfig,
    w: LossWeights,
    rng: np.random.Generator,
    labels: LabelMap,
    epsilon: float,
    trace: TrainTrace | None = None,
    epoch: int = 0,
    adversarial: bool = True,
):
    """T branches of j iterations from theta_n, then the averaged Reptile step.

    The classifier and its moments carry across branches; the encoder and its
    moments restart from theta_n in every branch.
    """
    trace = trace if trace is not None else TrainTrace()
    theta_n = state.encoder_params.clone()
    phis = []
    for i in range(cfg.T):
        adapt = ds.sample_meta_adapt_subjects(data, exclude, cfg.p, rng)
        state = ModelState(theta_n.clone(), state.classifier_params, state.arch)
        opt.reset_encoder(theta_n)
        batches = ds.make_batches(data, adapt, cfg.batch_size, rng)
        state = two_path_iterations(
            state, opt, batches, cfg.j, labels, w, trace, epoch, f"meta_adapt_{i}", i, adversarial
        )
        phis.append(state.encoder_params.clone())
    theta_next = reptile_average(theta_n, phis, epsilon)
    return theta_next, ModelState(theta_next, state.classifier_params, state.arch), trace


def run_training(
    data: Dataset,
    arch: ArchConfig,
    cfg: MetaConfig,
    w: LossWeights,
    seed: int,
    ablation: str = "full",
    dtype: torch.dtype = torch.float32,
    on_epoch_end: Callable[[int, ModelState], None] | None = None,
    state: ModelState | None = None,
) -> tuple[ModelState, TrainTrace]:
    """Train encoder and classifier on ``data`` (every subject in it is a training subject)."""
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}")
    use_meta, adversarial = ABLATIONS[ablation]
    subject_ids = data.subject_ids
    if arch.identity_count != len(subject_ids):
        raise ConfigError(
            f"arch.identity_count={arch.identity_count} but the training data has {len(subject_ids)} subjects"
        )
    if use_meta:
        cfg.check_subjects(len(subject_ids))
    if not adversarial:
        w = LossWeights(lambda_adv=0.0, lambda_idc=w.lambda_idc)

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    labels = LabelMap(subject_ids, data.subject_count)
    state = state if state is not None else init_model(arch, seed, dtype)
    opt = OptimizerState.create(state, cfg)
    trace = TrainTrace()
    plain_batches = None if use_meta else ds.make_batches(data, subject_ids, cfg.batch_size, rng)

    for epoch in range(cfg.epochs):
        eps = cfg.epsilon(epoch)
        if use_meta:
            subjects = ds.sample_meta_train_subjects(data, cfg.k, rng)
            theta_o = state.encoder_params.clone()
            opt.reset_encoder(theta_o)
            phi, state, opt, trace = meta_train_phase(
                state, opt, data, subjects, cfg, w, rng, labels, trace, epoch, adversarial
            )
            theta_n = reptile_interpolate(theta_o, phi, eps)
            state = ModelState(theta_n, state.classifier_params, state.arch)
            theta_next, state, trace = meta_adapt_phase(
                state, opt, data, subjects, cfg, w, rng, labels, eps, trace, epoch, adversarial
            )
            trace.epochs.append({
                "epoch": epoch,
                "epsilon": eps,
                "meta_train_subjects": subjects,
                "theta_o_norm": float(theta_o.norm()),
                "theta_n_norm": float(theta_n.norm()),
                "theta_next_norm": float(theta_next.norm()),
            })
        else:
            theta_o = state.encoder_params.clone()
            state = two_path_iterations(
                state, opt, plain_batches, cfg.iterations_per_epoch(), labels, w, trace, epoch, "plain", 0,
                adversarial,
            )
            trace.epochs.append({
                "epoch": epoch,
                "epsilon": None,
                "meta_train_subjects": subject_ids,
                "theta_o_norm": float(theta_o.norm()),
                "theta_n_norm": None,
                "theta_next_norm": float(state.encoder_params.norm()),
            })
        log.debug("epoch %d done, eps=%.4f", epoch, eps)
        if on_epoch_end is not None:
            on_epoch_end(epoch, state)
    return state, trace
