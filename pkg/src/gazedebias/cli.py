"""Command-line experiment runner: generate, train, loso, genvar, report.

Every command reads one JSON config, validates it completely before touching
the filesystem, and builds its output in a sibling temp directory that is
swapped into place only on success.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from gazedebias import dataset as ds
from gazedebias import evaluation as ev
from gazedebias.dataset import ConfigError, SynthConfig
from gazedebias.losses import LossWeights
from gazedebias.model import ArchConfig, config_hash, load_checkpoint, save_checkpoint
from gazedebias.trainer import ABLATIONS, TRACE_FIELDS, MetaConfig, TrainingAborted, run_training

log = logging.getLogger("gazedebias")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


@dataclass(frozen=True)
class EvalConfig:
    bins: tuple[int, int] = (5, 5)
    probe_seed: int = 0
    cluster_styles: int = 70
    cluster_gazes: tuple[tuple[float, float], ...] = ev.DEFAULT_CLUSTER_GAZES
    holdout: int | None = None  # subject left out by `train`; None trains on everyone

    def __post_init__(self) -> None:
        object.__setattr__(self, "bins", tuple(int(b) for b in self.bins))
        object.__setattr__(self, "cluster_gazes", tuple(tuple(float(v) for v in g) for g in self.cluster_gazes))
        if len(self.bins) != 2 or min(self.bins) < 1:
            raise ConfigError("eval.bins must be two integers >= 1")
        if self.cluster_styles < 2:
            raise ConfigError("eval.cluster_styles must be >= 2")
        if any(len(g) != 2 for g in self.cluster_gazes) or not self.cluster_gazes:
            raise ConfigError("eval.cluster_gazes must be a nonempty list of [yaw, pitch] pairs")


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def arch_for(self, n_subjects: int) -> ArchConfig:
        """Arch whose classifier covers exactly ``n_subjects`` training identities."""
        return ArchConfig.from_dict({**self.arch.to_dict(), "identity_count": n_subjects})


SECTIONS = ("synth", "arch", "meta", "weights", "eval", "seed")


def _section(raw: dict, name: str, cls):
    body = raw.get(name, {})
    if not isinstance(body, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(body) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown fields in {name!r}: {sorted(unknown)}")
    try:
        return cls(**body)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    synth = _section(raw, "synth", SynthConfig)
    synth.validate()
    arch = _section(raw, "arch", ArchConfig)
    meta = _section(raw, "meta", MetaConfig)
    weights = _section(raw, "weights", LossWeights)
    evalc = _section(raw, "eval", EvalConfig)
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    if tuple(arch.image_shape) != tuple(synth.image_shape):
        raise ConfigError(f"arch.image_shape {arch.image_shape} differs from synth.image_shape {synth.image_shape}")
    return ExperimentConfig(synth, arch, meta, weights, evalc, seed, raw)


def load_config(path: str | Path | None, seed: int | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if seed is not None:
        raw = {**raw, "seed": seed}
    return parse_config(raw)


# ---------------------------------------------------------------------------
# output helpers

@contextlib.contextmanager
def atomic_dir(out: str | Path) -> Iterator[Path]:
    """Yield a scratch directory that replaces ``out`` only if the block succeeds."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        old = out.with_name(f".{out.name}.old")
        shutil.rmtree(old, ignore_errors=True)
        out.rename(old)
        tmp.rename(out)
        shutil.rmtree(old, ignore_errors=True)
    else:
        tmp.rename(out)


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))
    return path


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _run_info(cfg: ExperimentConfig, command: str, **extra) -> dict:
    return {"command": command, "config": cfg.raw, "config_hash": cfg.hash, "seed": cfg.seed, **extra}


def _load_data(path: str | Path | None) -> ds.Dataset:
    if path is None:
        raise ConfigError("--data is required")
    if not (Path(path) / ds.MANIFEST).exists():
        raise ConfigError(f"no dataset manifest in {path}")
    return ds.load_dataset(path)


# ---------------------------------------------------------------------------
# commands

def cmd_generate(cfg: ExperimentConfig, out: Path, image_format: str = "float32") -> Path:
    data = ds.generate_synthetic_dataset(cfg.synth)
    data.provenance["config_hash"] = cfg.hash
    with atomic_dir(out) as tmp:
        ds.save_dataset(data, tmp, image_format=image_format)
    print(f"wrote {len(data)} samples from {data.subject_count} subjects to {out} (config {cfg.hash})")
    return out


def cmd_train(cfg: ExperimentConfig, data: ds.Dataset, out: Path, ablation: str) -> Path:
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}")
    holdout = cfg.eval.holdout
    train, test = (data, None) if holdout is None else ds.split_leave_one_subject_out(data, holdout)
    arch = cfg.arch_for(len(train.subject_ids))
    if ABLATIONS[ablation][0]:
        cfg.meta.check_subjects(len(train.subject_ids))
    with atomic_dir(out) as tmp:
        ckpt_dir = tmp / "checkpoints"

        def on_epoch_end(epoch: int, state) -> None:
            save_checkpoint(state, ckpt_dir / f"epoch_{epoch:03d}", epoch=epoch, cfg_hash=cfg.hash)

        try:
            state, trace = run_training(train, arch, cfg.meta, cfg.weights, cfg.seed, ablation=ablation,
                                        on_epoch_end=on_epoch_end)
        except TrainingAborted as exc:
            # keep what we have next to the intended output so the failure can be inspected
            partial = out.with_name(out.name + ".partial")
            shutil.rmtree(partial, ignore_errors=True)
            exc.trace.write_csv(tmp / "trace.csv")
            write_json(tmp / "run.json", _run_info(cfg, "train", ablation=ablation, aborted=str(exc)))
            shutil.copytree(tmp, partial)
            raise RuntimeError(f"{exc}; partial trace and checkpoints kept in {partial}") from exc
        save_checkpoint(state, tmp / "final", epoch=cfg.meta.epochs - 1, cfg_hash=cfg.hash)
        trace.write_csv(tmp / "trace.csv")
        info = _run_info(cfg, "train", ablation=ablation, holdout=holdout, trace_rows=len(trace.records),
                         epochs=trace.epochs)
        if test is not None:
            report = ev.evaluate(state, test)
            report.heatmap = ev.heatmap_from_errors(test.gazes, report.per_sample_errors, cfg.eval.bins).as_rows()
            report.probe_accuracy = ev.identity_probe(state, train, cfg.eval.probe_seed)
            report.meta = {"config_hash": cfg.hash, "ablation": ablation}
            report.write(tmp)
            info["holdout_mean_angle_error"] = report.overall_mean
            info["probe_accuracy"] = report.probe_accuracy
        write_json(tmp / "run.json", info)
    print(f"trained ({ablation}) for {cfg.meta.epochs} epochs; {len(trace.records)} trace rows -> {out}")
    return out


def cmd_loso(cfg: ExperimentConfig, data: ds.Dataset, out: Path, ablation: str) -> Path:
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}")
    arch = cfg.arch_for(len(data.subject_ids) - 1)
    with atomic_dir(out) as tmp:
        heat_g, heat_e = [], []

        def on_fold(held_out: int, state, fold) -> None:
            fold_dir = tmp / "folds" / f"subject_{held_out:03d}"
            save_checkpoint(state, fold_dir / "final", cfg_hash=cfg.hash)
            heat_g.append(data.gazes[data.subjects == held_out])
            heat_e.append(fold.per_sample_errors)

        def fold_trace(held_out: int, trace) -> None:
            trace.write_csv(tmp / "folds" / f"subject_{held_out:03d}" / "trace.csv")

        report = ev.run_loso(data, arch, cfg.meta, cfg.weights, cfg.seed, ablation=ablation,
                             fold_callback=on_fold, trace_callback=fold_trace)
        report.heatmap = ev.heatmap_from_errors(np.concatenate(heat_g), np.concatenate(heat_e),
                                                cfg.eval.bins).as_rows()
        report.meta.update({"config_hash": cfg.hash, "ablation": ablation, "seed": cfg.seed})
        report.write(tmp)
        write_json(tmp / "run.json", _run_info(cfg, "loso", ablation=ablation, overall_mean=report.overall_mean,
                                               subject_std=report.subject_std))
    print(f"LOSO ({ablation}) over {len(report.per_subject_errors)} subjects: "
          f"{report.overall_mean:.3f} deg (std {report.subject_std:.3f}) -> {out}")
    return out


GENVAR_FIELDS = ["cluster", "yaw", "pitch", "var_yaw", "var_pitch"]


def cmd_genvar(cfg: ExperimentConfig, checkpoint: Path, out: Path, baseline: Path | None = None) -> Path:
    state, _ = load_checkpoint(checkpoint)
    base_state = load_checkpoint(baseline)[0] if baseline is not None else None
    for s, name in ((state, checkpoint), (base_state, baseline)):
        if s is not None and tuple(s.arch.image_shape) != tuple(cfg.synth.image_shape):
            raise ConfigError(f"checkpoint {name} expects images {s.arch.image_shape}, "
                              f"config renders {cfg.synth.image_shape}")
    clusters = ev.build_style_clusters(cfg.synth, cfg.eval.cluster_styles, cfg.eval.cluster_gazes, cfg.seed)
    ours = ev.style_variance(state, clusters)
    theirs = ev.style_variance(base_state, clusters) if base_state is not None else None
    fields = GENVAR_FIELDS + (["baseline_var_yaw", "baseline_var_pitch", "ratio_yaw", "ratio_pitch"]
                              if theirs is not None else [])
    with atomic_dir(out) as tmp:
        with (tmp / "genvar.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields)
            for ci, gaze in enumerate(cfg.eval.cluster_gazes):
                row = [ci, gaze[0], gaze[1], *ours[ci]]
                if theirs is not None:
                    row += [*theirs[ci], _ratio(ours[ci][0], theirs[ci][0]), _ratio(ours[ci][1], theirs[ci][1])]
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        write_json(tmp / "run.json", _run_info(cfg, "genvar", checkpoint=str(checkpoint),
                                               baseline=None if baseline is None else str(baseline)))
    print(f"style variance over {len(clusters)} clusters -> {out / 'genvar.csv'}")
    return out


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return 1.0 if a == 0 else float("inf")
    return a / b


REPORT_REQUIRED = ("run.json", "per_subject.csv", "metrics.json")
BASELINE_ORDER = ("plain", "no-adv", "no-meta", "full")


def cmd_report(run_dir: Path, out: Path) -> Path:
    """Collect sibling run directories (each holding run.json) into CSV plot data."""
    runs = sorted(p for p in Path(run_dir).iterdir() if p.is_dir() and (p / "run.json").exists())
    if not runs:
        raise ConfigError(f"no runs with run.json under {run_dir}")
    missing = [f"{r.name}/{name}" for r in runs for name in REPORT_REQUIRED if not (r / name).exists()]
    if missing:
        raise ConfigError("missing artifacts: " + ", ".join(missing))
    infos = {r.name: json.loads((r / "run.json").read_text()) for r in runs}
    hashes = {name: info.get("config_hash") for name, info in infos.items()}
    if len(set(hashes.values())) > 1:
        raise ConfigError("config hash mismatch across runs: " + ", ".join(f"{k}={v}" for k, v in hashes.items()))
    per_subject = {r.name: _read_per_subject(r / "per_subject.csv") for r in runs}
    subjects = sorted({s for table in per_subject.values() for s in table})

    with atomic_dir(out) as tmp:
        with (tmp / "per_subject_errors.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject"] + [r.name for r in runs])
            for s in subjects:
                writer.writerow([s] + [repr(per_subject[r.name].get(s, float("nan"))) for r in runs])

        labels = {r.name: infos[r.name].get("ablation", r.name) for r in runs}
        baseline = next((name for want in BASELINE_ORDER for name, a in labels.items() if a == want), runs[0].name)
        with (tmp / "ablation_delta.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject", "baseline", "variant", "delta_deg"])
            for r in runs:
                if r.name == baseline:
                    continue
                for s in subjects:
                    delta = per_subject[baseline].get(s, float("nan")) - per_subject[r.name].get(s, float("nan"))
                    writer.writerow([s, baseline, r.name, repr(delta)])

        for r in runs:
            if (r / "heatmap.csv").exists():
                shutil.copyfile(r / "heatmap.csv", tmp / f"heatmap_{r.name}.csv")

        with (tmp / "loss_curves.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run", "fold", "epoch", "L_idc", "L_adv", "L_g", "L_total"])
            for r in runs:
                for trace_path in sorted(r.rglob("trace.csv")):
                    fold = trace_path.parent.name if trace_path.parent != r else ""
                    for epoch, means in _epoch_means(trace_path):
                        writer.writerow([r.name, fold, epoch] + [repr(means[k]) for k in TRACE_FIELDS[5:]])

        files = sorted(p for p in tmp.iterdir() if p.is_file())
        write_json(tmp / "manifest.json", {
            "config_hash": next(iter(hashes.values())),
            "runs": [r.name for r in runs],
            "baseline": baseline,
            "files": {p.name: sha256_file(p) for p in files},
        })
    print(f"report for {len(runs)} runs -> {out}")
    return out


def _read_per_subject(path: Path) -> dict[int, float]:
    with path.open() as fh:
        return {int(row["subject"]): float(row["mean_angle_error_deg"]) for row in csv.DictReader(fh)}


def _epoch_means(trace_path: Path) -> list[tuple[int, dict[str, float]]]:
    sums: dict[int, dict[str, list[float]]] = {}
    with trace_path.open() as fh:
        for row in csv.DictReader(fh):
            bucket = sums.setdefault(int(row["epoch"]), {k: [] for k in TRACE_FIELDS[5:]})
            for k in TRACE_FIELDS[5:]:
                v = float(row[k])
                if not np.isnan(v):
                    bucket[k].append(v)
    return [(e, {k: (float(np.mean(v)) if v else float("nan")) for k, v in b.items()}) for e, b in sorted(sums.items())]


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazedebias", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, data: bool = False) -> None:
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if data:
            p.add_argument("--data", type=Path, required=True, help="dataset directory from `generate`")
            p.add_argument("--ablation", default="full", choices=sorted(ABLATIONS))

    p = sub.add_parser("generate", help="render the synthetic dataset")
    common(p)
    p.add_argument("--image-format", default="float32", choices=["float32", "png8"])
    common(sub.add_parser("train", help="train one model and write checkpoints + trace"), data=True)
    common(sub.add_parser("loso", help="leave-one-subject-out evaluation"), data=True)
    p = sub.add_parser("genvar", help="predicted-gaze variance on style clusters")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--baseline", type=Path, help="second checkpoint for ratio columns")
    p = sub.add_parser("report", help="bundle CSV plot data from finished runs")
    p.add_argument("--runs", type=Path, required=True, help="directory whose subdirectories are runs")
    p.add_argument("--out", type=Path, required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.runs, args.out)
            return EXIT_OK
        cfg = load_config(args.config, args.seed)
        if args.command == "generate":
            cmd_generate(cfg, args.out, args.image_format)
        elif args.command == "train":
            cmd_train(cfg, _load_data(args.data), args.out, args.ablation)
        elif args.command == "loso":
            cmd_loso(cfg, _load_data(args.data), args.out, args.ablation)
        elif args.command == "genvar":
            cmd_genvar(cfg, args.checkpoint, args.out, args.baseline)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error for the caller
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
