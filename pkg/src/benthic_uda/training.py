"""Adversarial SymmNet training, evaluation and the scaling/bilinear/SymmNet ablation grid."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .bilinear_pooling import TKPFConfig
from .data import (
    BASE_CROP,
    compute_scaled_crop_size,
    DatasetManifest,
    augment,
    check_same_classes,
    crop_sizes_for_pair,
    load_patches,
    pair_has_equal_resolution,
)
from .errors import ConfigError, NonFiniteError
from .losses import combine_objectives, lambda_schedule
from .model import (
    IMAGE_MEAN,
    IMAGE_STD,
    BackboneSpec,
    SymmNet,
    load_checkpoint,
    predict_from_output,
    save_checkpoint,
)

log = logging.getLogger(__name__)

LR_GROUPS = ("heads", "backbone", "tkpf")


@dataclass
class TrainConfig:
    use_scaling: bool = True
    use_bilinear: bool = False
    use_symmnet: bool = True
    epochs: int = 50
    batch_size: int = 32
    momentum: float = 0.9
    lr0: float = 0.02
    backbone_lr_factor: float = 0.1
    alpha: float = 10.0
    beta: float = 1.5
    bilinear_warmup_epochs: int = 3
    bilinear_warmup_lr: float = 0.1
    replicates: int = 3
    seed: int = 0
    tkpf: TKPFConfig = field(default_factory=TKPFConfig)
    backbone: BackboneSpec = field(
        default_factory=lambda: BackboneSpec("resnet50_compatible", 2048, pretrained=True))
    input_size: int = BASE_CROP
    lambda_per_iteration: bool = False
    prediction_rule: str = "combined"

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 1 or self.replicates < 1:
            raise ConfigError("epochs must be >= 0, batch_size and replicates >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.prediction_rule not in ("combined", "target_head"):
            raise ConfigError(f"unknown prediction_rule {self.prediction_rule!r}")
        self.backbone.validate()
        if self.use_bilinear:
            dataclasses.replace(self.tkpf, d=self.backbone.output_channels).validate()
        return self

    @property
    def cell_name(self) -> str:
        return (f"scaling{int(self.use_scaling)}-bilinear{int(self.use_bilinear)}"
                f"-symmnet{int(self.use_symmnet)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        """Build from a nested mapping; unknown keys are rejected, omitted keys keep defaults."""
        data = dict(data)
        nested = {"tkpf": TKPFConfig, "backbone": BackboneSpec}
        kwargs = {}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        for key, value in data.items():
            if key in nested:
                sub = nested[key]
                sub_known = {f.name for f in dataclasses.fields(sub)}
                if not isinstance(value, dict) or set(value) - sub_known:
                    raise ConfigError(f"unknown keys in {key}: {sorted(set(value) - sub_known)}")
                value = sub(**value)
            kwargs[key] = value
        return cls(**kwargs).validate()


@dataclass
class DomainData:
    """Resized uint8 patches ``(n, S, S, 3)`` with labels, in manifest order."""

    images: np.ndarray
    labels: np.ndarray
    sample_ids: list[str]

    def __len__(self):
        return len(self.labels)


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: list
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": self.confusion.tolist(),
        }


@dataclass
class RunResult:
    config_snapshot: TrainConfig
    replicate_accuracies: list[float]
    final_target_accuracy: float
    per_class_accuracy: list
    per_epoch_losses: list[list[dict]]
    replicate_metrics: list[dict] = field(default_factory=list)
    models: list = field(default_factory=list, repr=False, compare=False)

    @property
    def std(self) -> float:
        return float(np.std(self.replicate_accuracies)) if self.replicate_accuracies else float("nan")

    def to_dict(self) -> dict:
        return {
            "cell": self.config_snapshot.cell_name,
            "final_target_accuracy": self.final_target_accuracy,
            "replicate_accuracies": self.replicate_accuracies,
            "std": self.std,
            "per_class_accuracy": self.per_class_accuracy,
            "per_epoch_losses": self.per_epoch_losses,
            "config": self.config_snapshot.to_dict(),
        }


# ---------------------------------------------------------------------------
# schedules


def lr_annealing(progress: float, lr0: float = 0.02, alpha: float = 10.0, beta: float = 1.5) -> float:
    return lr0 / (1.0 + alpha * progress) ** beta


def effective_lr(epoch: int, group: str, cfg: TrainConfig) -> float:
    """Learning rate of one parameter group at ``epoch``.

    Heads and TKPF factors follow the annealed schedule, the backbone a
    fixed fraction of it. With bilinear pooling on, the TKPF factors first
    use a constant warmup rate.
    """
    if group not in LR_GROUPS:
        raise ValueError(f"unknown parameter group {group!r}")
    base = lr_annealing(epoch / cfg.epochs if cfg.epochs else 0.0, cfg.lr0, cfg.alpha, cfg.beta)
    if group == "backbone":
        return base * cfg.backbone_lr_factor
    if group == "tkpf" and cfg.use_bilinear and epoch < cfg.bilinear_warmup_epochs:
        return cfg.bilinear_warmup_lr
    return base


# ---------------------------------------------------------------------------
# data plumbing


def prepare_domain_data(manifest: DatasetManifest, crop_sizes: dict[str, int], input_size: int) -> DomainData:
    images, labels, kept = load_patches(manifest, crop_sizes, input_size)
    ids = []
    for i in kept:
        a = manifest.annotations[i]
        ids.append(f"{a.survey_id}:{a.image_path}:{a.x}:{a.y}")
    return DomainData(images, labels, ids)


def to_tensor(batch: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(batch)).permute(0, 3, 1, 2).float().div_(255.0)
    mean = torch.tensor(IMAGE_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGE_STD).view(1, 3, 1, 1)
    return (x - mean) / std


class _IndexStream:
    """Endless reshuffled index stream; the shorter domain cycles."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.buffer = np.empty(0, dtype=np.int64)

    def take(self, k: int) -> np.ndarray:
        while len(self.buffer) < k:
            self.buffer = np.concatenate([self.buffer, self.rng.permutation(self.n)])
        out, self.buffer = self.buffer[:k], self.buffer[k:]
        return out


def _train_batch(data: DomainData, idx: np.ndarray, rng: np.random.Generator):
    patches = np.stack([augment(data.images[i], rng) for i in idx])
    return to_tensor(patches), torch.from_numpy(data.labels[idx])


# ---------------------------------------------------------------------------
# training


def build_model(cfg: TrainConfig, num_classes: int) -> SymmNet:
    tkpf = None
    if cfg.use_bilinear:
        tkpf = dataclasses.replace(cfg.tkpf, d=cfg.backbone.output_channels)
    return SymmNet(num_classes, cfg.backbone, tkpf=tkpf, input_size=cfg.input_size)


@dataclass
class OptimizerState:
    classifier: torch.optim.SGD
    extractor: torch.optim.SGD

    def set_lrs(self, lrs: dict[str, float]) -> None:
        for opt in (self.classifier, self.extractor):
            for g in opt.param_groups:
                g["lr"] = lrs[g["name"]]


def make_optimizers(model: SymmNet, cfg: TrainConfig) -> OptimizerState:
    groups = model.parameter_groups()
    classifier = torch.optim.SGD([{"params": groups["heads"], "name": "heads"}],
                                 lr=cfg.lr0, momentum=cfg.momentum)
    ext_groups = [{"params": groups["backbone"], "name": "backbone"}]
    if groups["tkpf"]:
        ext_groups.append({"params": groups["tkpf"], "name": "tkpf"})
    extractor = torch.optim.SGD(ext_groups, lr=cfg.lr0, momentum=cfg.momentum)
    return OptimizerState(classifier, extractor)


def _check_finite(terms: dict, stage: str) -> None:
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NonFiniteError(f"non-finite loss term {name!r} ({value.detach().item()}) during {stage}")


def _split(out, n):
    return type(out)(*(t[:n] for t in out)), type(out)(*(t[n:] for t in out))


def train_one_iteration(model: SymmNet, src_x, src_y, tgt_x, opt: OptimizerState, lam: float,
                        use_symmnet: bool = True) -> dict[str, float]:
    """One adversarial update; returns the loss terms of the classifier step.

    With SymmNet the heads are updated on the classifier objective first,
    then a fresh forward pass updates the extractor on the confusion
    objective. Without SymmNet one step on the source-only objective updates
    every parameter and ``tgt_x`` is unused.
    """
    model.train()
    if not use_symmnet:
        opt.classifier.zero_grad(set_to_none=True)
        opt.extractor.zero_grad(set_to_none=True)
        out = model(src_x)
        obj = combine_objectives(out, src_y, None, lam, use_symmnet=False)
        _check_finite(obj.terms, "source-only step")
        obj.classifier.backward()
        opt.classifier.step()
        opt.extractor.step()
        record = {k: v.item() for k, v in obj.terms.items()}
        record["src_correct"] = float((out.p_s.argmax(1) == src_y).sum())
        return record

    n = src_x.shape[0]
    images = torch.cat([src_x, tgt_x])

    # classifier step: heads only, so the extractor runs without a graph
    opt.classifier.zero_grad(set_to_none=True)
    with torch.no_grad():
        feats = model.features(images)
    src_out, tgt_out = _split(model.classify(feats), n)
    obj = combine_objectives(src_out, src_y, tgt_out, lam)
    _check_finite(obj.terms, "classifier step")
    obj.classifier.backward()
    opt.classifier.step()
    record = {k: v.item() for k, v in obj.terms.items()}
    record["src_correct"] = float((src_out.p_s.argmax(1) == src_y).sum())

    # extractor step against the updated heads
    opt.classifier.zero_grad(set_to_none=True)
    opt.extractor.zero_grad(set_to_none=True)
    src_out, tgt_out = _split(model(images), n)
    obj = combine_objectives(src_out, src_y, tgt_out, lam)
    _check_finite(obj.terms, "extractor step")
    obj.extractor.backward()
    opt.extractor.step()
    opt.classifier.zero_grad(set_to_none=True)
    return record


def train_model(cfg: TrainConfig, source: DomainData, target: DomainData, seed: int,
                num_classes: int, log_fn: Optional[Callable[[str], None]] = None):
    """Train one replicate; returns ``(model, per-epoch loss records)``."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = build_model(cfg, num_classes)
    opt = make_optimizers(model, cfg)
    src_stream = _IndexStream(len(source), rng)
    tgt_stream = _IndexStream(len(target), rng)
    iters = math.ceil(max(len(source), len(target)) / cfg.batch_size)
    history = []
    for epoch in range(cfg.epochs):
        lrs = {g: effective_lr(epoch, g, cfg) for g in LR_GROUPS}
        opt.set_lrs(lrs)
        sums: dict[str, float] = {}
        seen = 0
        lam = lambda_schedule(epoch / cfg.epochs)
        for it in range(iters):
            if cfg.lambda_per_iteration:
                lam = lambda_schedule((epoch + it / iters) / cfg.epochs)
            src_x, src_y = _train_batch(source, src_stream.take(cfg.batch_size), rng)
            tgt_x, _ = _train_batch(target, tgt_stream.take(cfg.batch_size), rng)
            rec = train_one_iteration(model, src_x, src_y, tgt_x, opt, lam, cfg.use_symmnet)
            for k, v in rec.items():
                sums[k] = sums.get(k, 0.0) + (v if k == "src_correct" else v * len(src_y))
            seen += len(src_y)
        entry = {"epoch": epoch, "lambda": lam, "lr": lrs}
        entry.update({k: v / seen for k, v in sums.items() if k != "src_correct"})
        entry["src_acc"] = sums.get("src_correct", 0.0) / seen
        history.append(entry)
        if log_fn is not None:
            log_fn(format_epoch_line(entry))
    return model, history


def format_epoch_line(entry: dict) -> str:
    parts = [f"epoch={entry['epoch']}", f"lambda={entry['lambda']:.6f}"]
    parts += [f"lr_{g}={lr:.6g}" for g, lr in entry["lr"].items()]
    parts += [f"{k}={v:.6f}" for k, v in entry.items() if k not in ("epoch", "lambda", "lr")]
    return " ".join(parts)


@dataclass
class TrainedModel:
    model: SymmNet
    config: TrainConfig
    classes: list[str]
    crop_sizes: dict[str, int]
    survey_resolutions: dict[str, float]

    def crop_sizes_for(self, manifest: DatasetManifest) -> dict[str, int]:
        """Crop sizes for ``manifest``'s surveys, reusing the training run's scaling.

        Surveys unseen during training are scaled against the finest
        resolution the run saw when scaling was on.
        """
        sizes = {}
        fine = min(self.survey_resolutions.values(), default=None)
        for s in manifest.surveys:
            if s.survey_id in self.crop_sizes:
                sizes[s.survey_id] = self.crop_sizes[s.survey_id]
            elif self.config.use_scaling and fine is not None and s.resolution_mm_per_pixel > fine:
                sizes[s.survey_id] = compute_scaled_crop_size(s.resolution_mm_per_pixel, fine,
                                                              self.config.input_size)
            else:
                sizes[s.survey_id] = self.config.input_size
        return sizes


def load_trained_model(path) -> TrainedModel:
    ckpt = load_checkpoint(path)
    raw = dict(ckpt["config"])
    # weights come from the checkpoint, never re-download
    raw["backbone"] = {**raw["backbone"], "pretrained": False}
    cfg = TrainConfig.from_dict(raw)
    model = build_model(cfg, len(ckpt["classes"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return TrainedModel(model, cfg, list(ckpt["classes"]), dict(ckpt.get("crop_sizes", {})),
                        dict(ckpt.get("survey_resolutions", {})))


# ---------------------------------------------------------------------------
# evaluation and export


@torch.no_grad()
def evaluate(model: SymmNet, data: DomainData, num_classes: int, batch_size: int = 128,
             rule: str = "combined") -> EvalResult:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    model.eval()
    preds = []
    for start in range(0, len(data), batch_size):
        x = to_tensor(data.images[start:start + batch_size])
        preds.append(predict_from_output(model(x), rule))
    pred = torch.cat(preds).numpy()
    return metrics_from_predictions(data.labels, pred, num_classes)


def metrics_from_predictions(labels: np.ndarray, pred: np.ndarray, num_classes: int) -> EvalResult:
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    totals = confusion.sum(axis=1)
    per_class = [float(confusion[k, k] / totals[k]) if totals[k] else None for k in range(num_classes)]
    accuracy = float(np.trace(confusion) / confusion.sum())
    return EvalResult(accuracy, per_class, confusion)


@torch.no_grad()
def extract_features(model: SymmNet, data: DomainData, batch_size: int = 128) -> np.ndarray:
    model.eval()
    feats = [model.features(to_tensor(data.images[s:s + batch_size])).numpy()
             for s in range(0, len(data), batch_size)]
    return np.concatenate(feats)


def export_features(model: SymmNet, data: DomainData, classes: list[str], out_path) -> np.ndarray:
    """Write ``sample_id,class_label,f0..f{m-1}`` rows of pooled features; returns the matrix."""
    feats = extract_features(model, data)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "class_label"] + [f"f{i}" for i in range(feats.shape[1])])
        for sid, label, row in zip(data.sample_ids, data.labels, feats):
            writer.writerow([sid, classes[label]] + [repr(float(v)) for v in row])
    return feats


def read_feature_file(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = [r[0] for r in rows]
    labels = [r[1] for r in rows]
    return ids, labels, np.array([[float(v) for v in r[2:]] for r in rows])


def class_compactness(features: np.ndarray, labels) -> tuple[float, float]:
    """Mean pairwise Euclidean distance within classes and across classes."""
    labels = np.asarray(labels)
    diff = features[:, None, :] - features[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    return float(dist[same & off_diag].mean()), float(dist[~same].mean())


# ---------------------------------------------------------------------------
# experiments


def _json_dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_experiment(cfg: TrainConfig, source: DatasetManifest, target: DatasetManifest,
                   out_dir=None, keep_models: bool = False) -> RunResult:
    """Train ``cfg.replicates`` models with seeds ``seed, seed+1, ...`` and evaluate on all target data."""
    cfg.validate()
    check_same_classes(source, target)
    K = source.num_classes
    crops = crop_sizes_for_pair(source, target, cfg.use_scaling, cfg.input_size)
    src_data = prepare_domain_data(source, crops, cfg.input_size)
    tgt_data = prepare_domain_data(target, crops, cfg.input_size)
    resolutions = {s.survey_id: s.resolution_mm_per_pixel for s in list(source.surveys) + list(target.surveys)}

    accuracies, histories, metrics, models = [], [], [], []
    per_class_runs = []
    for rep in range(cfg.replicates):
        seed = cfg.seed + rep
        lines: list[str] = []
        model, history = train_model(cfg, src_data, tgt_data, seed, K, log_fn=lines.append)
        result = evaluate(model, tgt_data, K, rule=cfg.prediction_rule)
        log.info("%s replicate %d: target accuracy %.4f", cfg.cell_name, rep, result.accuracy)
        accuracies.append(result.accuracy)
        histories.append(history)
        per_class_runs.append(result.per_class_accuracy)
        rep_metrics = {"replicate": rep, "seed": seed, "crop_sizes": crops, **result.to_dict()}
        metrics.append(rep_metrics)
        if keep_models:
            models.append(model)
        if out_dir is not None:
            rep_dir = Path(out_dir) / f"replicate-{rep}"
            rep_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(rep_dir / "checkpoint.pt", model, cfg.to_dict(), source.classes,
                            crops, resolutions)
            (rep_dir / "log.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
            _json_dump({**rep_metrics, "per_epoch_losses": history}, rep_dir / "metrics.json")

    per_class_mean = []
    for k in range(K):
        vals = [run[k] for run in per_class_runs if run[k] is not None]
        per_class_mean.append(float(np.mean(vals)) if vals else None)
    result = RunResult(
        config_snapshot=cfg,
        replicate_accuracies=accuracies,
        final_target_accuracy=float(np.mean(accuracies)),
        per_class_accuracy=per_class_mean,
        per_epoch_losses=histories,
        replicate_metrics=metrics,
        models=models,
    )
    if out_dir is not None:
        _json_dump(result.to_dict(), Path(out_dir) / "result.json")
    return result


ABLATION_CELLS = [
    # (scaling, bilinear, symmnet) in the row order of the results table
    (s, b, m) for s, (b, m) in itertools.product((False, True), ((False, False), (True, False),
                                                                  (False, True), (True, True)))
]


@dataclass
class GridCell:
    use_scaling: bool
    use_bilinear: bool
    use_symmnet: bool
    result: Optional[RunResult] = None
    note: str = ""


def _run_cell(args):
    cfg, source, target, out_dir, keep_models = args
    return run_experiment(cfg, source, target, out_dir, keep_models)


def run_ablation_grid(base_cfg: TrainConfig, source: DatasetManifest, target: DatasetManifest,
                      out_dir=None, jobs: int = 1, keep_models: bool = False,
                      cells=ABLATION_CELLS) -> tuple[list[GridCell], str]:
    """Run every (scaling, bilinear, symmnet) cell; scaling cells are skipped for equal resolutions.

    Returns the cells and the markdown report; the report is also written to
    ``<out_dir>/report.md`` when ``out_dir`` is given.
    """
    check_same_classes(source, target)
    equal_res = pair_has_equal_resolution(source, target)
    grid, todo = [], []
    for s, b, m in cells:
        cell = GridCell(s, b, m)
        grid.append(cell)
        if s and equal_res:
            cell.note = "n/a: equal resolution"
            log.info("skipping %s: source and target share one resolution", cell)
            continue
        cfg = dataclasses.replace(base_cfg, use_scaling=s, use_bilinear=b, use_symmnet=m)
        cell_dir = None if out_dir is None else Path(out_dir) / cfg.cell_name
        todo.append((cell, (cfg, source, target, cell_dir, keep_models)))

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, [args for _, args in todo]))
    else:
        results = [_run_cell(args) for _, args in todo]
    for (cell, _), res in zip(todo, results):
        cell.result = res

    report = format_report(grid)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "report.md").write_text(report, encoding="utf-8")
    return grid, report


def format_report(grid: list[GridCell]) -> str:
    def mark(flag):
        return "x" if flag else " "

    lines = [
        "| Scaling | Bilinear | SymmNet | Mean accuracy (%) | Std (%) | Replicates (%) |",
        "|:-:|:-:|:-:|--:|--:|:--|",
    ]
    for c in grid:
        flags = f"| {mark(c.use_scaling)} | {mark(c.use_bilinear)} | {mark(c.use_symmnet)} "
        if c.result is None:
            lines.append(flags + f"| {c.note or 'n/a'} | | |")
            continue
        r = c.result
        reps = ", ".join(f"{100 * a:.2f}" for a in r.replicate_accuracies)
        lines.append(flags + f"| {100 * r.final_target_accuracy:.2f} | {100 * r.std:.2f} | {reps} |")
    return "\n".join(lines) + "\n"
