"""Context-conditioned regression models with Siamese pairwise training loss.

Five variants share one fully-connected trunk:

* ``FCN``              plain trunk, context ignored
* ``FCN+CC``           context (embedded if visual) concatenated to the input
* ``FCN+CM``           learned context mask multiplied into layer-1 activations
* ``FCN+CM+L2Reg``     mask plus regularization against Euclidean context distance
* ``FCN+CM+NeuralReg`` mask plus regularization against a learned kernel distance

Every variant predicts a per-dimension Gaussian (mean and standard deviation)
and trains on the negative log likelihood. Regularized variants add
``lambda1 * (||m(c) - m(c')||_F - lambda2 * d(c, c'))**2`` per pair, tying
mask differences to context differences.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .numeric import RngState

VARIANTS = ("FCN", "FCN+CC", "FCN+CM", "FCN+CM+L2Reg", "FCN+CM+NeuralReg")
CONTEXT_KINDS = ("indicator", "visual", "continuous")
DISTANCE_KINDS = ("euclidean", "neural-fc", "neural-conv")

INDICATOR_DIM = 36
VISUAL_SHAPE = (32, 32)
VISUAL_EMBED_DIM = 32
NEURAL_PHI_HIDDEN = 64
NEURAL_PHI_DIM = 16
CONV_KERNEL = 5
CONV_STRIDE = 2
STD_FLOOR = 1e-4
LOG_2PI = float(np.log(2.0 * np.pi))


def uses_mask(variant: str) -> bool:
    return variant in ("FCN+CM", "FCN+CM+L2Reg", "FCN+CM+NeuralReg")


def uses_context_input(variant: str) -> bool:
    return variant == "FCN+CC"


def is_regularized(variant: str) -> bool:
    return variant in ("FCN+CM+L2Reg", "FCN+CM+NeuralReg")


def default_distance(variant: str, context_kind: str) -> str:
    if variant == "FCN+CM+NeuralReg":
        return "neural-conv" if context_kind == "visual" else "neural-fc"
    return "euclidean"


@dataclass(frozen=True)
class ContextVector:
    """Auxiliary attributes of the interacting object.

    indicator: 36-entry binary vector; visual: 32x32 grid in [0, 1];
    continuous: free-length vector (e.g. simulator kernel parameters).
    """

    kind: str
    payload: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "payload", np.asarray(self.payload, dtype=np.float64)
        )
        p = self.payload
        if self.kind == "indicator":
            if p.shape != (INDICATOR_DIM,):
                raise ConfigError(
                    f"indicator context must have shape ({INDICATOR_DIM},), got {p.shape}"
                )
            if not np.isin(p, (0.0, 1.0)).all():
                raise ConfigError("indicator context entries must be 0 or 1")
        elif self.kind == "visual":
            if p.shape != VISUAL_SHAPE:
                raise ConfigError(
                    f"visual context must have shape {VISUAL_SHAPE}, got {p.shape}"
                )
            if p.min() < 0.0 or p.max() > 1.0:
                raise ConfigError("visual context entries must lie in [0, 1]")
        elif self.kind == "continuous":
            if p.ndim != 1 or p.size == 0:
                raise ConfigError(
                    f"continuous context must be a non-empty vector, got shape {p.shape}"
                )
        else:
            raise ConfigError(f"unknown context kind {self.kind!r}")

    def vectorized(self) -> np.ndarray:
        """Flat view used by the Euclidean context distance."""
        return self.payload.ravel()


@dataclass
class ModelSpec:
    """Architecture and variant selection for one model instance."""

    variant: str
    input_dim: int
    output_dim: int
    context_kind: str
    context_dim: int | None = None  # length of continuous contexts
    hidden: tuple[int, int, int, int] = (100, 100, 100, 100)
    mask_hidden: int = 64
    lambda1: float = 0.0
    lambda2: float = 10.0
    distance: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.context_kind not in CONTEXT_KINDS:
            raise ConfigError(f"unknown context kind {self.context_kind!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError("input_dim and output_dim must be positive")
        if len(self.hidden) != 4 or any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden must be 4 positive widths, got {self.hidden}")
        if self.context_kind == "continuous":
            if self.context_dim is None or self.context_dim < 1:
                raise ConfigError("continuous contexts need a positive context_dim")
        elif self.context_kind == "indicator":
            self.context_dim = INDICATOR_DIM
        if self.distance is None:
            self.distance = default_distance(self.variant, self.context_kind)
        if self.distance not in DISTANCE_KINDS:
            raise ConfigError(f"unknown distance kind {self.distance!r}")
        if self.lambda1 < 0.0:
            raise ConfigError("lambda1 must be non-negative")
        if self.lambda2 <= 0.0:
            raise ConfigError("lambda2 must be positive")
        if not is_regularized(self.variant) and self.lambda1 != 0.0:
            raise ConfigError(f"variant {self.variant} does not take lambda1 > 0")
        if self.variant == "FCN+CM+L2Reg" and self.distance != "euclidean":
            raise ConfigError("FCN+CM+L2Reg uses the euclidean distance")
        if self.variant == "FCN+CM+NeuralReg":
            if self.distance == "euclidean":
                raise ConfigError("FCN+CM+NeuralReg needs a neural distance")
            if self.lambda2 != 1.0:
                raise ConfigError(
                    "neural regularization absorbs the distance scale; lambda2 must be 1"
                )
        if self.distance == "neural-conv" and self.context_kind != "visual":
            raise ConfigError("neural-conv distance requires visual contexts")

    @property
    def context_feature_dim(self) -> int:
        """Width of the context vector as fed to the mask / concat paths."""
        if self.context_kind == "visual":
            return VISUAL_EMBED_DIM
        return int(self.context_dim)

    @property
    def needs_context(self) -> bool:
        return uses_mask(self.variant) or uses_context_input(self.variant)


@dataclass(frozen=True)
class GaussianPrediction:
    """Per-dimension Gaussian over the next state."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape:
            raise ShapeError(
                f"mean shape {self.mean.shape} != std shape {self.std.shape}"
            )
        if not (self.std > 0.0).all():
            raise ValueError("predicted std must be strictly positive")


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # Keyed per name so adding parameters to one variant never shifts the
    # draws of another; required for the cross-variant equivalence checks.
    return RngState(seed).split(zlib.crc32(name.encode()))._gen


def _glorot(seed: int, name: str, shape: tuple[int, ...], fan_in: int, fan_out: int):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return _param_rng(seed, name).uniform(-limit, limit, size=shape)


def _param_shapes(spec: ModelSpec) -> dict[str, tuple]:
    """Name -> (shape, fan_in, fan_out); fan pair None means zero init."""
    in_eff = spec.input_dim
    if uses_context_input(spec.variant):
        in_eff += spec.context_feature_dim
    widths = [in_eff, *spec.hidden]
    shapes: dict[str, tuple] = {}
    for i in range(4):
        shapes[f"layer{i + 1}.w"] = ((widths[i], widths[i + 1]), widths[i], widths[i + 1])
        shapes[f"layer{i + 1}.b"] = ((widths[i + 1],), None, None)
    last = spec.hidden[-1]
    for head in ("head_mean", "head_std"):
        shapes[f"{head}.w"] = ((last, spec.output_dim), last, spec.output_dim)
        shapes[f"{head}.b"] = ((spec.output_dim,), None, None)
    if spec.needs_context and spec.context_kind == "visual":
        k = CONV_KERNEL
        shapes["ctx_embed.conv1.k"] = ((8, 1, k, k), 1 * k * k, 8 * k * k)
        shapes["ctx_embed.conv2.k"] = ((16, 8, k, k), 8 * k * k, 16 * k * k)
        flat = 16 * 5 * 5  # two stride-2 valid convs: 32 -> 14 -> 5
        shapes["ctx_embed.fc.w"] = ((flat, VISUAL_EMBED_DIM), flat, VISUAL_EMBED_DIM)
        shapes["ctx_embed.fc.b"] = ((VISUAL_EMBED_DIM,), None, None)
    if uses_mask(spec.variant):
        cf = spec.context_feature_dim
        shapes["mask.fc1.w"] = ((cf, spec.mask_hidden), cf, spec.mask_hidden)
        shapes["mask.fc1.b"] = ((spec.mask_hidden,), None, None)
        # zero init so the mask starts as the exact identity (2*sigmoid(0) = 1)
        shapes["mask.fc2.w"] = ((spec.mask_hidden, spec.hidden[0]), None, None)
        shapes["mask.fc2.b"] = ((spec.hidden[0],), None, None)
    if spec.variant == "FCN+CM+NeuralReg":
        if spec.distance == "neural-fc":
            raw = int(spec.context_dim)
            shapes["dist.fc1.w"] = ((raw, NEURAL_PHI_HIDDEN), raw, NEURAL_PHI_HIDDEN)
            shapes["dist.fc2.w"] = (
                (NEURAL_PHI_HIDDEN, NEURAL_PHI_DIM),
                NEURAL_PHI_HIDDEN,
                NEURAL_PHI_DIM,
            )
        else:
            k = CONV_KERNEL
            shapes["dist.conv.k"] = ((8, 1, k, k), 1 * k * k, 8 * k * k)
            shapes["dist.fc.w"] = ((8, NEURAL_PHI_DIM), 8, NEURAL_PHI_DIM)
    return shapes


def init_params(spec: ModelSpec, seed: int) -> ad.ParameterStore:
    """Fresh weights for a variant; deterministic per (seed, parameter name)."""
    params: dict[str, np.ndarray] = {}
    for name, (shape, fan_in, fan_out) in _param_shapes(spec).items():
        if fan_in is None:
            params[name] = np.zeros(shape)
        else:
            params[name] = _glorot(seed, name, shape, fan_in, fan_out)
    return ad.ParameterStore(params)


# ---------------------------------------------------------------------------
# Forward passes (batched; single-sample surfaces wrap batch size 1)
# ---------------------------------------------------------------------------


def stack_contexts(contexts: list[ContextVector], kind: str) -> np.ndarray:
    """Stack homogeneous contexts: vectors -> [n, d]; visual -> [n, 1, 32, 32]."""
    for c in contexts:
        if c.kind != kind:
            raise ConfigError(f"expected {kind} context, got {c.kind}")
    if kind == "visual":
        return np.stack([c.payload for c in contexts])[:, None, :, :]
    return np.stack([c.payload for c in contexts])


def _embed_visual(x4d: ad.Node, store: ad.ParameterStore) -> ad.Node:
    h = ad.relu(ad.conv2d(x4d, store.node("ctx_embed.conv1.k"), CONV_STRIDE))
    h = ad.relu(ad.conv2d(h, store.node("ctx_embed.conv2.k"), CONV_STRIDE))
    flat = ad.reshape(h, (h.value.shape[0], -1))
    return ad.linear(flat, store.node("ctx_embed.fc.w"), store.node("ctx_embed.fc.b"))


def _context_features(
    ctx: np.ndarray, spec: ModelSpec, store: ad.ParameterStore
) -> ad.Node:
    if spec.context_kind == "visual":
        return _embed_visual(ad.constant(ctx), store)
    return ad.constant(ctx)


def context_mask_batch(
    ctx: np.ndarray, spec: ModelSpec, store: ad.ParameterStore
) -> ad.Node:
    """Per-row positive mask in (0, 2), length hidden[0]."""
    z = _context_features(ctx, spec, store)
    h = ad.relu(ad.linear(z, store.node("mask.fc1.w"), store.node("mask.fc1.b")))
    pre = ad.linear(h, store.node("mask.fc2.w"), store.node("mask.fc2.b"))
    return ad.scale(ad.sigmoid(pre), 2.0)


def context_mask(
    c: ContextVector, spec: ModelSpec, store: ad.ParameterStore
) -> ad.Node:
    """Mask vector for a single context."""
    if c.kind != spec.context_kind:
        raise ConfigError(f"model expects {spec.context_kind} context, got {c.kind}")
    batched = context_mask_batch(stack_contexts([c], c.kind), spec, store)
    return ad.reshape(batched, (spec.hidden[0],))


def forward_batch(
    x: np.ndarray,
    ctx: np.ndarray | None,
    spec: ModelSpec,
    store: ad.ParameterStore,
) -> tuple[ad.Node, ad.Node, ad.Node | None]:
    """Differentiable forward over a batch: (mean, std, mask-or-None)."""
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ConfigError(
            f"input batch must be [n, {spec.input_dim}], got {x.shape}"
        )
    h: ad.Node = ad.constant(x)
    if uses_context_input(spec.variant):
        h = ad.concat_cols(h, _context_features(ctx, spec, store))
    a = ad.relu(ad.linear(h, store.node("layer1.w"), store.node("layer1.b")))
    mask = None
    if uses_mask(spec.variant):
        mask = context_mask_batch(ctx, spec, store)
        a = ad.elementwise_mul(a, mask)
    for i in (2, 3, 4):
        a = ad.relu(ad.linear(a, store.node(f"layer{i}.w"), store.node(f"layer{i}.b")))
    mean = ad.linear(a, store.node("head_mean.w"), store.node("head_mean.b"))
    raw = ad.linear(a, store.node("head_std.w"), store.node("head_std.b"))
    std = ad.add_scalar(ad.softplus(raw), STD_FLOOR)
    return mean, std, mask


def forward(
    x: np.ndarray,
    c: ContextVector | None,
    spec: ModelSpec,
    store: ad.ParameterStore,
) -> GaussianPrediction:
    """Single-sample prediction, detached from the graph."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("input must be finite")
    if spec.needs_context:
        if c is None:
            raise ConfigError(f"variant {spec.variant} requires a context")
        if c.kind != spec.context_kind:
            raise ConfigError(
                f"model expects {spec.context_kind} context, got {c.kind}"
            )
        ctx = stack_contexts([c], c.kind)
    else:
        ctx = None
    mean, std, _ = forward_batch(x.reshape(1, -1), ctx, spec, store)
    return GaussianPrediction(mean.value[0], std.value[0])


def predict_batch(
    x: np.ndarray,
    contexts: list[ContextVector] | None,
    spec: ModelSpec,
    store: ad.ParameterStore,
) -> tuple[np.ndarray, np.ndarray]:
    """Detached batched predictions: (means [n, out], stds [n, out])."""
    ctx = None
    if spec.needs_context:
        ctx = stack_contexts(contexts, spec.context_kind)
    mean, std, _ = forward_batch(x, ctx, spec, store)
    return mean.value, std.value


# ---------------------------------------------------------------------------
# Losses and distances
# ---------------------------------------------------------------------------


def rowwise_gaussian_nll(mean: ad.Node, std: ad.Node, y: np.ndarray) -> ad.Node:
    """Per-row negative log likelihood, summed over output dimensions."""
    mu, sigma = mean.value, std.value
    if mu.shape != y.shape or sigma.shape != y.shape:
        raise ShapeError(
            f"nll shape mismatch: mean {mu.shape}, std {sigma.shape}, y {y.shape}"
        )
    if (sigma <= 0.0).any():
        raise ValueError("std must be strictly positive")
    resid = y - mu
    var = sigma * sigma
    rows = (np.log(sigma) + 0.5 * LOG_2PI + resid * resid / (2.0 * var)).sum(axis=1)
    out = ad.Node(rows, (mean, std))

    def _bk(g):
        gcol = g[:, None]
        ad.accumulate(mean, gcol * (-resid / var))
        ad.accumulate(std, gcol * (1.0 / sigma - resid * resid / (var * sigma)))

    out._backward = _bk
    return out


def gaussian_nll(pred: GaussianPrediction, y: np.ndarray) -> ad.Node:
    """NLL of one prediction: sum_d [log s_d + log(2 pi)/2 + (y-m)_d^2/(2 s_d^2)]."""
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    mean = ad.constant(pred.mean.reshape(1, -1))
    std = ad.constant(pred.std.reshape(1, -1))
    return ad.reshape(rowwise_gaussian_nll(mean, std, y), ())


def context_distance_batch(
    ctx_i: np.ndarray,
    ctx_j: np.ndarray,
    spec: ModelSpec,
    store: ad.ParameterStore,
) -> ad.Node:
    """Per-pair context distance [p]; constant for euclidean, learned otherwise."""
    n = ctx_i.shape[0]
    if spec.distance == "euclidean":
        diff = (ctx_i - ctx_j).reshape(n, -1)
        return ad.constant(np.sqrt((diff * diff).sum(axis=1)))
    stacked = np.concatenate([ctx_i, ctx_j], axis=0)
    if spec.distance == "neural-fc":
        h = ad.relu(ad.matmul(ad.constant(stacked), store.node("dist.fc1.w")))
        phi = ad.matmul(h, store.node("dist.fc2.w"))
    else:
        h = ad.relu(ad.conv2d(ad.constant(stacked), store.node("dist.conv.k"), CONV_STRIDE))
        phi = ad.matmul(ad.avg_pool(h), store.node("dist.fc.w"))
    return ad.rowwise_dot(ad.slice_rows(phi, 0, n), ad.slice_rows(phi, n, 2 * n))


def context_distance(
    c_i: ContextVector,
    c_j: ContextVector,
    spec: ModelSpec,
    store: ad.ParameterStore,
) -> ad.Node:
    """Distance between two contexts as a scalar node."""
    if c_i.kind != c_j.kind:
        raise ConfigError(f"context kinds differ: {c_i.kind} vs {c_j.kind}")
    if c_i.kind != spec.context_kind:
        raise ConfigError(f"model expects {spec.context_kind} context, got {c_i.kind}")
    ci = stack_contexts([c_i], c_i.kind)
    cj = stack_contexts([c_j], c_j.kind)
    return ad.reshape(context_distance_batch(ci, cj, spec, store), ())


def pair_loss_batch(
    x_i: np.ndarray,
    y_i: np.ndarray,
    x_j: np.ndarray,
    y_j: np.ndarray,
    ctx_i: np.ndarray | None,
    ctx_j: np.ndarray | None,
    spec: ModelSpec,
    store: ad.ParameterStore,
) -> tuple[ad.Node, float, float]:
    """Mean pairwise loss over a batch of pairs.

    Both branch members go through one stacked forward pass, which is what
    makes weight sharing exact. Returns (loss node, mean nll, mean reg term).
    """
    n = x_i.shape[0]
    x = np.concatenate([x_i, x_j], axis=0)
    y = np.concatenate([y_i, y_j], axis=0)
    ctx = None
    if spec.needs_context:
        ctx = np.concatenate([ctx_i, ctx_j], axis=0)
    mean, std, mask = forward_batch(x, ctx, spec, store)
    nll = ad.mean_all(rowwise_gaussian_nll(mean, std, y))
    if spec.lambda1 == 0.0:
        # regularizer contributes exactly 0; keep the graph identical to the
        # unregularized variant so trajectories match bitwise
        return nll, float(nll.value), 0.0
    m_i = ad.slice_rows(mask, 0, n)
    m_j = ad.slice_rows(mask, n, 2 * n)
    fdist = ad.rowwise_frobenius(m_i, m_j)
    d = context_distance_batch(ctx_i, ctx_j, spec, store)
    reg = ad.mean_all(ad.square(ad.sub(fdist, ad.scale(d, spec.lambda2))))
    loss = ad.add(nll, ad.scale(reg, spec.lambda1))
    return loss, float(nll.value), float(reg.value)


def pair_loss(
    sample_i,
    sample_j,
    spec: ModelSpec,
    store: ad.ParameterStore,
) -> ad.Node:
    """Siamese loss for one pair of samples.

    ``sample_i`` / ``sample_j`` carry .x, .y and .context attributes.
    """
    ci, cj = sample_i.context, sample_j.context
    if ci is not None and cj is not None and ci.kind != cj.kind:
        raise ConfigError(f"pair mixes context kinds: {ci.kind} vs {cj.kind}")
    ctx_i = ctx_j = None
    if spec.needs_context:
        ctx_i = stack_contexts([ci], spec.context_kind)
        ctx_j = stack_contexts([cj], spec.context_kind)
    loss, _, _ = pair_loss_batch(
        sample_i.x.reshape(1, -1),
        sample_i.y.reshape(1, -1),
        sample_j.x.reshape(1, -1),
        sample_j.y.reshape(1, -1),
        ctx_i,
        ctx_j,
        spec,
        store,
    )
    return loss
