"""Metrics, the experiment runner, and report rendering.

An experiment trains each requested variant over a list of seeds, evaluates
mean-parameter RMSE and mean predicted STD on the held-out split, and
aggregates per-variant metrics as the arithmetic mean over seeds (documented
in the JSON report metadata). Pushing experiments additionally report the
RMSE in millimeters via the fixed 21.92 mm conversion.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from multiprocessing import get_context

import numpy as np

from .data import (
    GP_PARAM_RANGE,
    Dataset,
    load_push_dataset,
    scale_contexts,
    simulate_gp_dataset,
    split_setup,
)
from .errors import ConfigError
from .model import (
    VARIANTS,
    GaussianPrediction,
    ModelSpec,
    default_distance,
    is_regularized,
    predict_batch,
)
from .numeric import RngState
from .training import TrainConfig, train

MM_PER_UNIT = 21.92
EXPERIMENTS = (
    "gp-regression",
    "push-different-objects",
    "push-different-surfaces",
    "push-different-weights",
)

_DATA_TRAIN_STREAM = 101
_DATA_TEST_STREAM = 102
_SPLIT_STREAM = 103


def rmse(preds: list[np.ndarray], targets: list[np.ndarray]) -> float:
    """Root of the mean squared error over all samples and dimensions."""
    if not preds or len(preds) != len(targets):
        raise ConfigError(
            f"need matching non-empty lists, got {len(preds)} and {len(targets)}"
        )
    p = np.stack([np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in preds])
    t = np.stack([np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in targets])
    if p.shape != t.shape:
        raise ConfigError(f"prediction shape {p.shape} != target shape {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mean_predicted_std(preds: list[GaussianPrediction]) -> float:
    """Mean of all predicted standard-deviation entries."""
    if not preds:
        raise ConfigError("need at least one prediction")
    return float(np.mean(np.concatenate([np.atleast_1d(p.std) for p in preds])))


def rmse_to_mm(value: float) -> float:
    """Convert a pushing RMSE to millimeters (x 21.92)."""
    if value < 0:
        raise ValueError(f"rmse cannot be negative, got {value}")
    return value * MM_PER_UNIT


def evaluate_model(spec: ModelSpec, store, test_data: Dataset,
                   chunk: int = 512) -> tuple[float, float]:
    """(rmse, mean std) of a trained model on a dataset."""
    x, y, _ = test_data.arrays()
    contexts = [s.context for s in test_data] if spec.needs_context else None
    means, stds = [], []
    for start in range(0, len(test_data), chunk):
        ctx_chunk = contexts[start : start + chunk] if contexts is not None else None
        m, s = predict_batch(x[start : start + chunk], ctx_chunk, spec, store)
        means.append(m)
        stds.append(s)
    mean_arr = np.concatenate(means)
    std_arr = np.concatenate(stds)
    err = float(np.sqrt(np.mean((mean_arr - y) ** 2)))
    return err, float(std_arr.mean())


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything needed to rerun one experiment deterministically."""

    experiment: str
    variants: list[str]
    seeds: list[int]
    train: TrainConfig
    context_kind: str
    data_path: str | None = None
    weight_k: int | None = None
    n_tasks: int = 200
    samples_per_task: int = 20
    test_tasks: int = 20
    hidden: tuple[int, int, int, int] = (100, 100, 100, 100)
    mask_hidden: int = 64
    out_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if not self.variants:
            raise ConfigError("need at least one variant")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.experiment == "gp-regression":
            if self.context_kind != "continuous":
                raise ConfigError("gp-regression uses continuous contexts")
            if self.n_tasks < 1 or self.samples_per_task < 1 or self.test_tasks < 1:
                raise ConfigError("gp-regression needs positive simulator parameters")
        else:
            if self.data_path is None:
                raise ConfigError(f"{self.experiment} requires a data path")
            if self.context_kind not in ("indicator", "visual"):
                raise ConfigError("pushing experiments use indicator or visual contexts")
        if self.experiment == "push-different-weights" and self.weight_k not in (0, 1, 2):
            raise ConfigError("push-different-weights needs weight_k in (0, 1, 2)")
        self.hidden = tuple(self.hidden)

    @property
    def is_push(self) -> bool:
        return self.experiment != "gp-regression"

    def to_json(self) -> dict:
        t = self.train
        return {
            "experiment": self.experiment,
            "variants": list(self.variants),
            "seeds": list(self.seeds),
            "context": self.context_kind,
            "data": (
                {"path": self.data_path}
                if self.is_push
                else {
                    "n_tasks": self.n_tasks,
                    "samples_per_task": self.samples_per_task,
                    "test_tasks": self.test_tasks,
                }
            ),
            "weight_k": self.weight_k,
            "train": {
                "epochs": t.epochs,
                "learning_rate": t.learning_rate,
                "batch_size": t.batch_size,
                "lambda1": t.lambda1,
                "lambda2": t.lambda2,
            },
            "model": {"hidden": list(self.hidden), "mask_hidden": self.mask_hidden},
            "out_dir": self.out_dir,
            "workers": self.workers,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        try:
            data = obj.get("data", {})
            t = obj.get("train", {})
            m = obj.get("model", {})
            seeds = obj.get("seeds")
            if seeds is None:
                base = int(obj.get("seed", 0))
                seeds = [base + i for i in range(int(obj.get("n_seeds", 1)))]
            train_cfg = TrainConfig(
                epochs=int(t["epochs"]),
                learning_rate=float(t.get("learning_rate", 0.002)),
                batch_size=int(t.get("batch_size", 32)),
                seed=int(seeds[0]),
                lambda1=float(t.get("lambda1", 0.0)),
                lambda2=float(t.get("lambda2", 10.0)),
            )
            return cls(
                experiment=obj["experiment"],
                variants=list(obj.get("variants", list(VARIANTS))),
                seeds=[int(s) for s in seeds],
                train=train_cfg,
                context_kind=obj.get(
                    "context",
                    "continuous" if obj["experiment"] == "gp-regression" else "indicator",
                ),
                data_path=data.get("path"),
                weight_k=obj.get("weight_k"),
                n_tasks=int(data.get("n_tasks", 200)),
                samples_per_task=int(data.get("samples_per_task", 20)),
                test_tasks=int(data.get("test_tasks", 20)),
                hidden=tuple(m.get("hidden", (100, 100, 100, 100))),
                mask_hidden=int(m.get("mask_hidden", 64)),
                out_dir=obj.get("out_dir"),
                workers=int(obj.get("workers", 1)),
            )
        except KeyError as exc:
            raise ConfigError(f"config missing required field {exc}") from exc


@dataclass
class MetricReport:
    """Aggregated metrics for one variant."""

    variant: str
    rmse: float
    std: float
    dist_mm: float | None = None
    per_seed: list[dict] = field(default_factory=list)


def variant_spec(cfg: ExperimentConfig, variant: str, input_dim: int,
                 output_dim: int, context_dim: int | None) -> ModelSpec:
    """ModelSpec for one experiment cell, applying the variant's lambdas."""
    if is_regularized(variant):
        lambda1 = cfg.train.lambda1
        lambda2 = 1.0 if variant == "FCN+CM+NeuralReg" else cfg.train.lambda2
    else:
        lambda1, lambda2 = 0.0, cfg.train.lambda2
    return ModelSpec(
        variant=variant,
        input_dim=input_dim,
        output_dim=output_dim,
        context_kind=cfg.context_kind,
        context_dim=context_dim,
        hidden=cfg.hidden,
        mask_hidden=cfg.mask_hidden,
        lambda1=lambda1,
        lambda2=lambda2,
        distance=default_distance(variant, cfg.context_kind),
    )


def build_cell_data(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Train/test datasets for one (variant x seed) cell.

    GP data is re-simulated per seed (each repetition draws new parameter
    sets); pushing data comes from the file with a split that is fixed by the
    experiment's base seed so every cell sees the same partition.
    """
    if cfg.experiment == "gp-regression":
        train_data = simulate_gp_dataset(
            RngState(seed).split(_DATA_TRAIN_STREAM),
            cfg.n_tasks, cfg.samples_per_task, role="train",
        )
        test_data = simulate_gp_dataset(
            RngState(seed).split(_DATA_TEST_STREAM),
            cfg.test_tasks, cfg.samples_per_task, role="test",
        )
        # kernel parameters span (0.1, 10); feed them to the model on a unit
        # scale so pairwise context distances stay commensurate with
        # representable mask differences
        factor = 1.0 / GP_PARAM_RANGE[1]
        return scale_contexts(train_data, factor), scale_contexts(test_data, factor)
    full = load_push_dataset(cfg.data_path, context_kind=cfg.context_kind)
    setup = cfg.experiment.removeprefix("push-")
    split_rng = RngState(cfg.train.seed).split(_SPLIT_STREAM)
    return split_setup(full, setup, split_rng, weight_k=cfg.weight_k)


def run_cell(cfg: ExperimentConfig, variant: str, seed: int) -> dict:
    """Train and evaluate one (variant, seed) cell."""
    train_data, test_data = build_cell_data(cfg, seed)
    context_dim = (
        train_data.samples[0].context.payload.shape[0]
        if cfg.context_kind == "continuous"
        else None
    )
    spec = variant_spec(
        cfg, variant, train_data.input_dim, train_data.output_dim, context_dim
    )
    run_cfg = TrainConfig(
        epochs=cfg.train.epochs,
        learning_rate=cfg.train.learning_rate,
        batch_size=cfg.train.batch_size,
        seed=seed,
        lambda1=spec.lambda1,
        lambda2=spec.lambda2,
        tag=f"{variant}-s{seed}",
    )
    store, trace = train(spec, train_data, run_cfg)
    err, std = evaluate_model(spec, store, test_data)
    cell = {"variant": variant, "seed": seed, "rmse": err, "std": std,
            "final_loss": trace[-1].mean_loss}
    if cfg.is_push:
        cell["dist_mm"] = rmse_to_mm(err)
    return cell


def _run_cell_entry(args) -> dict:
    cfg_json, variant, seed = args
    return run_cell(ExperimentConfig.from_json(cfg_json), variant, seed)


def run_experiment(cfg: ExperimentConfig) -> tuple[list[MetricReport], str]:
    """All (variant x seed) cells, aggregated reports, and the rendered table."""
    cells = [(variant, seed) for variant in cfg.variants for seed in cfg.seeds]
    if cfg.workers > 1 and len(cells) > 1:
        cfg_json = cfg.to_json()
        with get_context("fork").Pool(cfg.workers) as pool:
            results = pool.map(
                _run_cell_entry, [(cfg_json, v, s) for v, s in cells]
            )
    else:
        results = [run_cell(cfg, v, s) for v, s in cells]
    by_variant: dict[str, list[dict]] = {v: [] for v in cfg.variants}
    for cell in results:
        by_variant[cell["variant"]].append(cell)
    reports = []
    for variant in cfg.variants:
        rows = sorted(by_variant[variant], key=lambda c: c["seed"])
        mean_rmse = float(np.mean([c["rmse"] for c in rows]))
        mean_std = float(np.mean([c["std"] for c in rows]))
        reports.append(
            MetricReport(
                variant=variant,
                rmse=mean_rmse,
                std=mean_std,
                dist_mm=rmse_to_mm(mean_rmse) if cfg.is_push else None,
                per_seed=rows,
            )
        )
    table = render_table(cfg, reports)
    if cfg.out_dir is not None:
        write_reports(cfg, reports, table)
    return reports, table


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _experiment_title(cfg: ExperimentConfig) -> str:
    names = {
        "gp-regression": "Simulated regression",
        "push-different-objects": "Different objects",
        "push-different-surfaces": "Different surfaces",
        "push-different-weights": "Different weights",
    }
    title = names[cfg.experiment]
    if cfg.experiment == "push-different-weights":
        title += f" ({cfg.weight_k} weight{'s' if cfg.weight_k != 1 else ''})"
    if cfg.is_push:
        title += f": {cfg.context_kind} context"
    return title


def render_table(cfg: ExperimentConfig, reports: list[MetricReport]) -> str:
    """Plain-text comparison table; best RMSE is wrapped in ** markers."""
    best = min(r.rmse for r in reports)
    headers = ["", "RMSE", "STD"] + (["Dist. (mm)"] if cfg.is_push else [])
    rows = []
    for r in reports:
        rmse_txt = f"{r.rmse:.3f}"
        if r.rmse == best:
            rmse_txt = f"**{rmse_txt}**"
        row = [r.variant, rmse_txt, f"{r.std:.3f}"]
        if cfg.is_push:
            row.append(f"{r.dist_mm:.2f}")
        rows.append(row)
    widths = [
        max(len(headers[c]), *(len(row[c]) for row in rows))
        for c in range(len(headers))
    ]
    lines = [_experiment_title(cfg)]
    lines.append("  ".join(h.ljust(widths[c]) for c, h in enumerate(headers)).rstrip())
    lines.append("  ".join("-" * widths[c] for c in range(len(headers))))
    for row in rows:
        lines.append("  ".join(v.ljust(widths[c]) for c, v in enumerate(row)).rstrip())
    return "\n".join(lines) + "\n"


def reports_csv(cfg: ExperimentConfig, reports: list[MetricReport]) -> str:
    """Per-seed CSV: experiment,variant,seed,rmse,std,dist_mm."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["experiment", "variant", "seed", "rmse", "std", "dist_mm"])
    for report in reports:
        for cell in report.per_seed:
            writer.writerow(
                [
                    cfg.experiment,
                    report.variant,
                    cell["seed"],
                    f"{cell['rmse']:.12g}",
                    f"{cell['std']:.12g}",
                    f"{cell['dist_mm']:.12g}" if "dist_mm" in cell else "",
                ]
            )
    return buf.getvalue()


def reports_json(cfg: ExperimentConfig, reports: list[MetricReport]) -> dict:
    return {
        "config": cfg.to_json(),
        "aggregation": "arithmetic mean of per-seed metrics",
        "reports": [
            {
                "variant": r.variant,
                "rmse": r.rmse,
                "std": r.std,
                "dist_mm": r.dist_mm,
                "per_seed": r.per_seed,
            }
            for r in reports
        ],
    }


def write_reports(cfg: ExperimentConfig, reports: list[MetricReport], table: str) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "report.csv"), "w", newline="") as fh:
        fh.write(reports_csv(cfg, reports))
    with open(os.path.join(cfg.out_dir, "report.json"), "w") as fh:
        json.dump(reports_json(cfg, reports), fh, indent=2)
    with open(os.path.join(cfg.out_dir, "table.txt"), "w") as fh:
        fh.write(table)
