"""Datasets: a Gaussian-process regression simulator, pushing-record
ingestion in a canonical JSON-lines format, generalization splits, and the
pair stream consumed by Siamese training.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .model import ContextVector
from .numeric import (
    RngState,
    cholesky,
    sample_standard_normal,
    sample_uniform,
    shuffled_indices,
)

log = logging.getLogger(__name__)

SURFACES = ("abs", "plywood")
SETUPS = ("different-objects", "different-surfaces", "different-weights")
GP_PARAM_RANGE = (0.1, 10.0)
WINDOW = 3  # history length per sample

PUSH_INPUT_DIM = 3   # pusher x, y, angle relative to the object
PUSH_OUTPUT_DIM = 3  # object dx, dy, dangle


@dataclass(frozen=True, eq=False)
class Sample:
    """One (input, target, context) record."""

    x: np.ndarray
    y: np.ndarray
    context: ContextVector
    object_id: str = ""
    surface: str | None = None
    weight_count: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))
        if self.surface is not None and self.surface not in SURFACES:
            raise DataError(f"unknown surface {self.surface!r}")
        if self.weight_count is not None and self.weight_count not in (0, 1, 2):
            raise DataError(f"weight_count must be 0, 1 or 2, got {self.weight_count}")


class Dataset:
    """Ordered, immutable collection of homogeneous samples."""

    def __init__(self, samples: list[Sample], role: str = "train", provenance: str = ""):
        if not samples:
            raise DataError("dataset cannot be empty")
        if role not in ("train", "test"):
            raise DataError(f"role must be train or test, got {role!r}")
        kind = samples[0].context.kind
        x_dim, y_dim = samples[0].x.shape, samples[0].y.shape
        ctx_shape = samples[0].context.payload.shape
        for i, s in enumerate(samples):
            if s.context.kind != kind or s.context.payload.shape != ctx_shape:
                raise DataError(f"sample {i}: heterogeneous context")
            if s.x.shape != x_dim or s.y.shape != y_dim:
                raise DataError(f"sample {i}: heterogeneous dimensions")
        self.samples = list(samples)
        self.role = role
        self.provenance = provenance
        self._arrays: tuple | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def context_kind(self) -> str:
        return self.samples[0].context.kind

    @property
    def input_dim(self) -> int:
        return int(self.samples[0].x.shape[0])

    @property
    def output_dim(self) -> int:
        return int(self.samples[0].y.shape[0])

    def object_ids(self) -> list[str]:
        return sorted({s.object_id for s in self.samples})

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked (x, y, context) arrays, cached; contexts stacked per kind."""
        if self._arrays is None:
            x = np.stack([s.x for s in self.samples])
            y = np.stack([s.y for s in self.samples])
            if self.context_kind == "visual":
                ctx = np.stack([s.context.payload for s in self.samples])[:, None]
            else:
                ctx = np.stack([s.context.payload for s in self.samples])
            self._arrays = (x, y, ctx)
        return self._arrays


# ---------------------------------------------------------------------------
# Gaussian-process simulator
# ---------------------------------------------------------------------------


def rbf_kernel_matrix(points: np.ndarray, xi: float, ell: float) -> np.ndarray:
    """K[i, j] = xi^2 * exp(-(p_i - p_j)^2 / (2 * ell)).

    The bandwidth enters as 2*ell (not 2*ell^2); kept exactly that way.
    """
    if xi <= 0.0 or ell <= 0.0:
        raise ValueError(f"kernel parameters must be positive, got xi={xi}, ell={ell}")
    p = np.asarray(points, dtype=np.float64).ravel()
    diff = p[:, None] - p[None, :]
    return xi * xi * np.exp(-(diff * diff) / (2.0 * ell))


def sample_gp_trajectory(rng: RngState, length: int, xi: float, ell: float) -> np.ndarray:
    """One draw from GP(0, K) on the unit-spaced grid 0..length-1."""
    grid = np.arange(length, dtype=np.float64)
    chol = cholesky(rbf_kernel_matrix(grid, xi, ell))
    return chol @ sample_standard_normal(rng, length)


def simulate_gp_dataset(
    rng: RngState,
    n_tasks: int,
    samples_per_task: int,
    role: str = "train",
) -> Dataset:
    """Windowed samples from ``n_tasks`` random-parameter GP trajectories.

    Each task draws (xi, ell) ~ Unif(0.1, 10)^2, samples one trajectory of
    length ``samples_per_task + 3``, and slides a width-4 window: inputs are
    3 consecutive observations, the target is the next one, and the task's
    kernel parameters are the context.
    """
    if n_tasks < 1 or samples_per_task < 1:
        raise ConfigError("n_tasks and samples_per_task must be positive")
    lo, hi = GP_PARAM_RANGE
    length = samples_per_task + WINDOW
    samples: list[Sample] = []
    for task in range(n_tasks):
        while True:
            xi = sample_uniform(rng, lo, hi)
            ell = sample_uniform(rng, lo, hi)
            try:
                traj = sample_gp_trajectory(rng, length, xi, ell)
                break
            except NumericError:
                log.warning(
                    "task %d: decomposition failed for xi=%.4f ell=%.4f; resampling",
                    task, xi, ell,
                )
        context = ContextVector("continuous", np.array([xi, ell]))
        for t in range(samples_per_task):
            samples.append(
                Sample(
                    x=traj[t : t + WINDOW].copy(),
                    y=traj[t + WINDOW : t + WINDOW + 1].copy(),
                    context=context,
                    object_id=f"gp-{task}",
                )
            )
    return Dataset(samples, role=role, provenance=f"gp-simulator(n_tasks={n_tasks})")


# ---------------------------------------------------------------------------
# Pushing records (canonical JSON-lines format)
# ---------------------------------------------------------------------------


def _sample_to_record(s: Sample) -> dict:
    rec: dict = {
        "object_id": s.object_id,
        "x": s.x.tolist(),
        "y": s.y.tolist(),
    }
    if s.surface is not None:
        rec["surface"] = s.surface
    if s.weight_count is not None:
        rec["weight_count"] = s.weight_count
    kind = s.context.kind
    if kind == "indicator":
        rec["indicator"] = [int(v) for v in s.context.payload]
    elif kind == "visual":
        rec["visual"] = s.context.payload.tolist()
    else:
        rec["context"] = s.context.payload.tolist()
    return rec


def save_dataset(dataset: Dataset, path) -> None:
    """Write one JSON record per line."""
    with open(path, "w") as fh:
        for s in dataset:
            fh.write(json.dumps(_sample_to_record(s)) + "\n")


def _record_to_sample(rec: dict, context_kind: str, lineno: int) -> Sample:
    def fail(msg: str):
        raise DataError(f"line {lineno}: {msg}")

    for key in ("x", "y"):
        if key not in rec:
            fail(f"missing field {key!r}")
    if context_kind == "indicator":
        if "indicator" not in rec:
            fail("missing field 'indicator'")
        vec = rec["indicator"]
        if len(vec) != 36 or any(v not in (0, 1) for v in vec):
            fail("field 'indicator' must be a 36-entry binary vector")
        context = ContextVector("indicator", np.asarray(vec, dtype=np.float64))
    elif context_kind == "visual":
        if "visual" not in rec:
            fail("missing field 'visual' (record has no image)")
        grid = np.asarray(rec["visual"], dtype=np.float64)
        if grid.shape != (32, 32):
            fail(f"field 'visual' must be 32x32, got {grid.shape}")
        if grid.min() < 0.0 or grid.max() > 1.0:
            fail("field 'visual' entries must lie in [0, 1]")
        context = ContextVector("visual", grid)
    elif context_kind == "continuous":
        if "context" not in rec:
            fail("missing field 'context'")
        context = ContextVector(
            "continuous", np.asarray(rec["context"], dtype=np.float64)
        )
    else:
        raise ConfigError(f"unknown context kind {context_kind!r}")
    try:
        return Sample(
            x=np.asarray(rec["x"], dtype=np.float64),
            y=np.asarray(rec["y"], dtype=np.float64),
            context=context,
            object_id=str(rec.get("object_id", "")),
            surface=rec.get("surface"),
            weight_count=rec.get("weight_count"),
        )
    except DataError as exc:
        fail(str(exc))


def load_push_dataset(path, context_kind: str = "indicator", role: str = "train") -> Dataset:
    """Parse a canonical JSON-lines pushing file.

    ``context_kind`` selects which context field becomes the sample context;
    records lacking the requested field are an error.
    """
    samples: list[Sample] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            samples.append(_record_to_sample(rec, context_kind, lineno))
    if not samples:
        raise DataError(f"{path}: no records")
    return Dataset(samples, role=role, provenance=str(path))


def scale_contexts(data: Dataset, factor: float) -> Dataset:
    """Copy of the dataset with every context payload multiplied by factor.

    Feature scaling for continuous contexts whose raw ranges would dwarf the
    representable mask differences in the pairwise regularizer.
    """
    samples = [
        Sample(
            x=s.x, y=s.y,
            context=ContextVector(s.context.kind, s.context.payload * factor),
            object_id=s.object_id, surface=s.surface, weight_count=s.weight_count,
        )
        for s in data
    ]
    return Dataset(samples, role=data.role, provenance=f"{data.provenance}|scaled")


# ---------------------------------------------------------------------------
# Generalization splits
# ---------------------------------------------------------------------------


def split_setup(
    data: Dataset,
    setup: str,
    rng: RngState,
    weight_k: int | None = None,
    train_ids: list[str] | None = None,
    test_ids: list[str] | None = None,
) -> tuple[Dataset, Dataset]:
    """Partition along the axis the setup declares.

    different-objects: disjoint object-id sets (90/10 by seed unless explicit
    id lists are given); different-surfaces: train on abs, test on plywood;
    different-weights: test objects have exactly ``weight_k`` weights.
    """
    if setup == "different-objects":
        if train_ids is not None or test_ids is not None:
            if not train_ids or not test_ids:
                raise ConfigError("explicit split needs both train_ids and test_ids")
            tr, te = set(train_ids), set(test_ids)
            if tr & te:
                raise ConfigError(f"train/test ids overlap: {sorted(tr & te)}")
        else:
            ids = data.object_ids()
            if len(ids) < 2:
                raise ConfigError("different-objects needs at least 2 object ids")
            perm = shuffled_indices(rng, len(ids))
            n_test = max(1, round(0.1 * len(ids)))
            te = {ids[i] for i in perm[:n_test]}
            tr = {ids[i] for i in perm[n_test:]}
        train = [s for s in data if s.object_id in tr]
        test = [s for s in data if s.object_id in te]
    elif setup == "different-surfaces":
        if any(s.surface is None for s in data):
            raise ConfigError("different-surfaces needs a surface on every sample")
        train = [s for s in data if s.surface == "abs"]
        test = [s for s in data if s.surface == "plywood"]
    elif setup == "different-weights":
        if weight_k not in (0, 1, 2):
            raise ConfigError(f"different-weights needs weight_k in (0, 1, 2), got {weight_k}")
        if any(s.weight_count is None for s in data):
            raise ConfigError("different-weights needs a weight_count on every sample")
        train = [s for s in data if s.weight_count != weight_k]
        test = [s for s in data if s.weight_count == weight_k]
    else:
        raise ConfigError(f"unknown setup {setup!r}")
    if not train or not test:
        raise ConfigError(f"setup {setup}: one side of the split is empty")
    return (
        Dataset(train, role="train", provenance=f"{data.provenance}|{setup}"),
        Dataset(test, role="test", provenance=f"{data.provenance}|{setup}"),
    )


# ---------------------------------------------------------------------------
# Pair stream
# ---------------------------------------------------------------------------


def make_pairs(
    data: Dataset, batch_size: int, rng: RngState
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of pair batches as (left indices, right indices).

    Shuffles, pairs consecutive elements, and groups pairs into batches of
    ``batch_size`` samples; the trailing batch may be smaller. With an odd
    sample count the one unpairable leftover is dropped for that epoch.
    """
    if batch_size < 2 or batch_size % 2 != 0:
        raise ConfigError(f"batch size must be even and >= 2, got {batch_size}")
    perm = shuffled_indices(rng, len(data))
    usable = len(perm) - (len(perm) % 2)
    perm = perm[:usable]
    for start in range(0, usable, batch_size):
        chunk = perm[start : start + batch_size]
        yield chunk[0::2], chunk[1::2]


# ---------------------------------------------------------------------------
# Synthetic pushing fixture (CI substitute for the external dataset)
# ---------------------------------------------------------------------------


def write_synthetic_push_file(
    path,
    rng: RngState,
    n_objects: int = 20,
    pushes_per_object: int = 25,
    plywood_objects: int = 4,
) -> None:
    """Write a deterministic stand-in file in the canonical record format.

    Records carry both indicator and visual context fields, so the file can
    be loaded with either context kind. Dynamics are context-dependent
    (rotation and gain derived from the indicator bits) so conditioning on
    context is actually informative. The last ``plywood_objects`` object ids
    get a second set of pushes on plywood so the surface split has both sides.
    """
    gen = rng._gen
    yy, xx = np.mgrid[0:32, 0:32]
    with open(path, "w") as fh:
        for obj in range(n_objects):
            indicator = np.zeros(36)
            for side in range(4):
                indicator[side * 9 + gen.integers(0, 4)] = 1.0  # shape slot
            weight_count = int(gen.integers(0, 3))
            weighted_sides = gen.choice(4, size=weight_count, replace=False)
            for side in weighted_sides:
                indicator[side * 9 + 4 + gen.integers(0, 5)] = 1.0  # weight slot
            visual = np.zeros((32, 32))
            for _ in range(3):
                cx, cy = gen.uniform(8, 24, size=2)
                s = gen.uniform(3, 6)
                visual += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
            visual /= visual.max()
            # context-dependent planar dynamics: rotation + gain set by the bits
            angle = 0.5 * (indicator[:18].sum() - indicator[18:].sum()) / 4.0
            gain = 0.15 + 0.05 * weight_count
            rot = np.array(
                [[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]]
            )
            surfaces = ["abs"] * pushes_per_object
            if obj >= n_objects - plywood_objects:
                surfaces += ["plywood"] * pushes_per_object
            for surface in surfaces:
                drag = 1.0 if surface == "abs" else 0.7
                x = gen.uniform(-1.0, 1.0, size=3)
                y = np.empty(3)
                y[:2] = drag * gain * (rot @ x[:2])
                y[2] = drag * gain * x[2] * (1.0 + 0.5 * indicator[4:9].sum())
                y += 0.01 * gen.standard_normal(3)
                rec = {
                    "object_id": f"obj-{obj:03d}",
                    "surface": surface,
                    "weight_count": weight_count,
                    "x": x.tolist(),
                    "y": y.tolist(),
                    "indicator": [int(v) for v in indicator],
                    "visual": visual.tolist(),
                }
                fh.write(json.dumps(rec) + "\n")
