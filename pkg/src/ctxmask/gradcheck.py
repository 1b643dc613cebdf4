"""Central finite-difference verification of every analytic gradient.

Each check builds a scalar loss from parameters held in a store, runs
``backward``, then perturbs parameter elements by +/- eps and compares the
numeric slope against the analytic gradient. Large parameter blocks (the
visual convolution stack) are checked on a sampled subset of elements;
everything else is checked exhaustively.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .model import (
    ContextVector,
    ModelSpec,
    pair_loss,
    rowwise_gaussian_nll,
)
from .model import init_params
from .numeric import RngState

EPS = 1e-5
OP_TOL = 1e-4
COMPOSED_TOL = 1e-3
_REL_FLOOR_OP = 1e-6
_REL_FLOOR_COMPOSED = 1e-5


def fd_gradcheck(
    build_loss: Callable[[ad.ParameterStore], ad.Node],
    store: ad.ParameterStore,
    eps: float = EPS,
    rel_floor: float = _REL_FLOOR_OP,
    sample_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    loss = build_loss(store)
    ad.backward(loss, store)
    analytic = {name: store.grad(name).copy() for name in store.names()}
    worst = 0.0
    for name in store.names():
        w = store[name]
        n = w.size
        if sample_per_param is not None and n > sample_per_param:
            idxs = rng.choice(n, size=sample_per_param, replace=False)
        else:
            idxs = range(n)
        flat = w.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(build_loss(store).value)
            flat[i] = orig - eps
            f_minus = float(build_loss(store).value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
            worst = max(worst, rel)
    return worst


def _weighted_sum(out: ad.Node, weights: np.ndarray) -> ad.Node:
    """Scalarize with fixed random weights so transposition bugs surface."""
    return ad.sum_all(ad.elementwise_mul(out, ad.constant(weights)))


def op_checks(seed: int) -> dict[str, float]:
    """Finite-difference error for each primitive operation."""
    gen = RngState(seed)._gen
    results: dict[str, float] = {}

    def check(name, params, build, floor=_REL_FLOOR_OP):
        store = ad.ParameterStore(params)
        results[name] = fd_gradcheck(build, store, rel_floor=floor)

    x = gen.standard_normal((4, 3))
    w = gen.standard_normal((3, 2))
    b = gen.standard_normal(2)
    wt = gen.standard_normal((4, 2))
    check("linear", {"x": x, "w": w, "b": b},
          lambda s: _weighted_sum(ad.linear(s.node("x"), s.node("w"), s.node("b")), wt))

    # keep relu inputs away from the kink
    xr = gen.standard_normal((3, 4))
    xr = np.where(np.abs(xr) < 0.1, xr + 0.2, xr)
    wr = gen.standard_normal((3, 4))
    check("relu", {"x": xr}, lambda s: _weighted_sum(ad.relu(s.node("x")), wr))

    a34 = gen.standard_normal((3, 4))
    b34 = gen.standard_normal((3, 4))
    w34 = gen.standard_normal((3, 4))
    check("elementwise_mul", {"a": a34, "b": b34},
          lambda s: _weighted_sum(ad.elementwise_mul(s.node("a"), s.node("b")), w34))
    bvec = gen.standard_normal(4)
    check("elementwise_mul_broadcast", {"a": a34, "b": bvec},
          lambda s: _weighted_sum(ad.elementwise_mul(s.node("a"), s.node("b")), w34))

    am = gen.standard_normal((3, 5))
    bm = gen.standard_normal((5, 2))
    wm = gen.standard_normal((3, 2))
    check("matmul", {"a": am, "b": bm},
          lambda s: _weighted_sum(ad.matmul(s.node("a"), s.node("b")), wm))

    xs = gen.standard_normal((2, 3))
    ws = gen.standard_normal((2, 3))
    check("sigmoid", {"x": xs}, lambda s: _weighted_sum(ad.sigmoid(s.node("x")), ws))
    check("softplus", {"x": xs}, lambda s: _weighted_sum(ad.softplus(s.node("x")), ws))
    check("square", {"x": xs}, lambda s: _weighted_sum(ad.square(s.node("x")), ws))

    xc = gen.standard_normal((1, 1, 6, 6))
    kc = gen.standard_normal((2, 1, 3, 3))
    wc = gen.standard_normal((1, 2, 2, 2))
    check("conv2d", {"x": xc, "k": kc},
          lambda s: _weighted_sum(ad.conv2d(s.node("x"), s.node("k"), stride=2), wc))

    xp = gen.standard_normal((2, 3, 4, 4))
    wp = gen.standard_normal((2, 3))
    check("avg_pool", {"x": xp}, lambda s: _weighted_sum(ad.avg_pool(s.node("x")), wp))

    fa = gen.standard_normal((2, 3))
    fb = fa + gen.standard_normal((2, 3)) + 0.5  # keep the distance off zero
    check("frobenius_distance", {"a": fa, "b": fb},
          lambda s: ad.frobenius_distance(s.node("a"), s.node("b")))
    wv = gen.standard_normal(4)
    ra = gen.standard_normal((4, 3))
    rb = ra + gen.standard_normal((4, 3)) + 0.5
    check("rowwise_frobenius", {"a": ra, "b": rb},
          lambda s: ad.sum_all(ad.elementwise_mul(
              ad.rowwise_frobenius(s.node("a"), s.node("b")), ad.constant(wv))))
    check("rowwise_dot", {"a": ra, "b": rb},
          lambda s: ad.sum_all(ad.elementwise_mul(
              ad.rowwise_dot(s.node("a"), s.node("b")), ad.constant(wv))))

    mu = gen.standard_normal((3, 2))
    raw = gen.standard_normal((3, 2)) * 0.3 + 1.0
    y = gen.standard_normal((3, 2))
    wn = gen.standard_normal(3)
    check("gaussian_nll", {"mean": mu, "std_raw": raw},
          lambda s: ad.sum_all(ad.elementwise_mul(
              rowwise_gaussian_nll(
                  s.node("mean"), ad.softplus(s.node("std_raw")), y),
              ad.constant(wn))))

    ca = gen.standard_normal((3, 2))
    cb = gen.standard_normal((3, 4))
    wcc = gen.standard_normal((3, 6))
    check("concat_cols", {"a": ca, "b": cb},
          lambda s: _weighted_sum(ad.concat_cols(s.node("a"), s.node("b")), wcc))
    wsl = gen.standard_normal((2, 3))
    check("slice_rows", {"a": ra},
          lambda s: _weighted_sum(ad.slice_rows(s.node("a"), 1, 3), wsl))
    check("mean_all", {"x": xs}, lambda s: ad.mean_all(s.node("x")))
    return results


class _PairSample:
    def __init__(self, x, y, context):
        self.x = x
        self.y = y
        self.context = context


def _tiny_spec(variant: str, context_kind: str, distance: str | None = None) -> ModelSpec:
    return ModelSpec(
        variant=variant,
        input_dim=3,
        output_dim=2,
        context_kind=context_kind,
        context_dim=2 if context_kind == "continuous" else None,
        hidden=(6, 6, 6, 6),
        mask_hidden=5,
        lambda1=0.05 if variant in ("FCN+CM+L2Reg", "FCN+CM+NeuralReg") else 0.0,
        lambda2=1.0 if variant == "FCN+CM+NeuralReg" else 2.0,
        distance=distance,
    )


def _random_context(gen, kind: str) -> ContextVector:
    if kind == "continuous":
        return ContextVector("continuous", gen.uniform(0.5, 3.0, size=2))
    if kind == "indicator":
        return ContextVector("indicator", gen.integers(0, 2, size=36).astype(float))
    return ContextVector("visual", gen.uniform(0.0, 1.0, size=(32, 32)))


# an eps parameter step moves any pre-activation by at most a few eps here,
# so 10x eps cannot be crossed by the difference window
_KINK_MARGIN = 10 * EPS


def _is_smooth_point(loss: ad.Node, margin: float = _KINK_MARGIN) -> bool:
    """True when no relu pre-activation or norm argument sits near a kink.

    A parameter perturbation of +/- eps can move pre-activations by a few
    multiples of eps, flipping relu gates inside the difference window; the
    gradient contract only holds at points that stay smooth throughout it.
    """
    for node in ad.topo_order(loss):
        if node.op == "relu":
            if np.min(np.abs(node.parents[0].value)) < margin:
                return False
        elif node.op == "frobenius":
            if np.min(node.value) < margin:
                return False
    return True


def composed_checks(seed: int) -> dict[str, float]:
    """Finite-difference error of the full pairwise loss per variant family.

    Checkpoints are random smooth points: parameters are nudged off their
    (partly zero) init and sample pairs are redrawn until every relu input
    clears the kink margin.
    """
    gen = RngState(seed)._gen
    cases = [
        ("pair_loss/continuous+l2reg", _tiny_spec("FCN+CM+L2Reg", "continuous"), None),
        ("pair_loss/indicator+neural", _tiny_spec("FCN+CM+NeuralReg", "indicator"), None),
        ("pair_loss/cc", _tiny_spec("FCN+CC", "continuous"), None),
        ("pair_loss/visual+neural", _tiny_spec("FCN+CM+NeuralReg", "visual"), 24),
    ]
    results: dict[str, float] = {}
    for name, spec, sample_per_param in cases:
        store = init_params(spec, seed)
        store.flat_values += 0.05 * gen.standard_normal(store.flat_values.size)
        for _ in range(100):
            qi = _PairSample(
                gen.standard_normal(3), gen.standard_normal(2),
                _random_context(gen, spec.context_kind),
            )
            qj = _PairSample(
                gen.standard_normal(3), gen.standard_normal(2),
                _random_context(gen, spec.context_kind),
            )
            if _is_smooth_point(pair_loss(qi, qj, spec, store)):
                break
        else:
            raise RuntimeError(f"{name}: no smooth checkpoint found for seed {seed}")
        results[name] = fd_gradcheck(
            lambda s: pair_loss(qi, qj, spec, s),
            store,
            rel_floor=_REL_FLOOR_COMPOSED,
            sample_per_param=sample_per_param,
            rng=gen,
        )
    return results


def run_suite(n_seeds: int = 20, base_seed: int = 0, verbose: bool = False):
    """(per-check worst error, overall pass flag) across seeds."""
    worst: dict[str, float] = {}
    for seed in range(base_seed, base_seed + n_seeds):
        for name, err in {**op_checks(seed), **composed_checks(seed)}.items():
            worst[name] = max(worst.get(name, 0.0), err)
    ok = True
    for name, err in sorted(worst.items()):
        tol = COMPOSED_TOL if name.startswith("pair_loss") else OP_TOL
        passed = err < tol
        ok = ok and passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name:<34} "
                  f"max rel err {err:.3e} (tol {tol:.0e})")
    return worst, ok
