"""Finite-difference battery over every differentiable op and the joint model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import core
from .architecture import build_model, classify, decode, encode
from .config import ArchConfig
from .core import Tensor, grad_check, kink_distance, precision

OP_TOL = 1e-4
MODEL_TOL = 1e-3
EPS = 1e-6

# builder(rng) -> (loss closure, parameter list)
Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    weights = rng.normal(size=out.shape)
    return lambda t: core.inner(t, weights)


def _case(op: Callable[..., Tensor], shapes, **kwargs) -> Builder:
    def build(rng):
        leaves = [_leaf(rng, *s) for s in shapes]
        proj = _project(op(*leaves, **kwargs), rng)
        return (lambda: proj(op(*leaves, **kwargs))), leaves
    return build


def _bn_case(shape, mode) -> Builder:
    def build(rng):
        x = _leaf(rng, *shape, scale=2.0)
        state = core.BatchNormState.create(shape[1])
        state.gamma.data[...] = rng.uniform(0.5, 1.5, shape[1])
        state.beta.data[...] = rng.normal(size=shape[1])
        if mode == "eval":
            state.running_mean[...] = rng.normal(size=shape[1])
            state.running_var[...] = rng.uniform(0.5, 2.0, shape[1])
        snapshot = (state.running_mean.copy(), state.running_var.copy())

        def f():
            # running stats must not drift between finite-difference evaluations
            state.running_mean[...], state.running_var[...] = snapshot
            return core.inner(core.batch_norm(x, state, mode), weights)

        weights = rng.normal(size=shape)
        return f, [x, state.gamma, state.beta]
    return build


def _ce_case(shape, reduction) -> Builder:
    def build(rng):
        logits = _leaf(rng, *shape, scale=2.0)
        n, k, h, w = shape
        labels = rng.integers(0, k, size=(n,) if reduction == "per_sample_mean" else (n, h, w))
        return (lambda: core.softmax_cross_entropy(logits, labels, reduction)), [logits]
    return build


def _fc_case(n, c, k) -> Builder:
    def build(rng):
        x, w, b = _leaf(rng, n, c, 1, 1), _leaf(rng, c, k), _leaf(rng, k)
        weights = rng.normal(size=(n, k, 1, 1))
        return (lambda: core.inner(core.fully_connected(x, w, b), weights)), [x, w, b]
    return build


def _two_input(op, shapes_pairs) -> list[Builder]:
    return [_case(op, pair) for pair in shapes_pairs]


def _concat_case(channels) -> Builder:
    def build(rng):
        leaves = [_leaf(rng, 2, c, 4, 3) for c in channels]
        weights = rng.normal(size=(2, sum(channels), 4, 3))
        return (lambda: core.inner(core.concat_channels(leaves), weights)), leaves
    return build


def _sum_case(shape) -> Builder:
    def build(rng):
        x = _leaf(rng, *shape)
        return (lambda: core.sum_all(core.relu(x))), [x]
    return build


def _scale_case(shape, factor) -> Builder:
    def build(rng):
        x = _leaf(rng, *shape)
        weights = rng.normal(size=shape)
        return (lambda: core.inner(core.scale(x, factor), weights)), [x]
    return build


def _inner_case(shape) -> Builder:
    def build(rng):
        x = _leaf(rng, *shape)
        weights = rng.normal(size=shape)
        return (lambda: core.inner(x, weights)), [x]
    return build


def op_cases() -> dict[str, list[Builder]]:
    """Three or more random shapes for every differentiable op."""
    return {
        "conv2d": [
            _case(core.conv2d, [(2, 3, 8, 8), (4, 3, 3, 3)], stride=1, padding="same"),
            _case(core.conv2d, [(1, 2, 7, 6), (3, 2, 3, 3)], stride=2, padding="same"),
            _case(core.conv2d, [(2, 3, 9, 9), (2, 3, 5, 5)], stride=2, padding="valid"),
            _case(core.conv2d, [(2, 4, 5, 5), (3, 4, 1, 1)], stride=1, padding="same"),
            _case(core.conv2d, [(1, 2, 6, 6), (2, 2, 1, 5)], stride=1, padding="same"),
        ],
        "conv2d_transpose": [
            _case(core.conv2d_transpose, [(2, 4, 3, 3), (4, 2, 2, 2)], stride=2),
            _case(core.conv2d_transpose, [(1, 3, 4, 5), (3, 5, 2, 2)], stride=2),
            _case(core.conv2d_transpose, [(2, 2, 3, 3), (2, 3, 3, 3)], stride=2),
        ],
        "maxpool2d": [
            _case(core.maxpool2d, [(1, 2, 6, 6)], k=2, stride=2, padding="valid"),
            _case(core.maxpool2d, [(2, 3, 7, 7)], k=3, stride=1, padding="same"),
            _case(core.maxpool2d, [(1, 4, 9, 9)], k=3, stride=3, padding="valid"),
        ],
        "global_avg_pool": [_case(core.global_avg_pool, [s]) for s in [(2, 3, 4, 4), (1, 5, 3, 7), (3, 2, 1, 1)]],
        "batch_norm[train]": [_bn_case(s, "train") for s in [(4, 3, 4, 4), (2, 5, 3, 3), (8, 2, 2, 2)]],
        "batch_norm[eval]": [_bn_case(s, "eval") for s in [(4, 3, 4, 4), (2, 5, 3, 3), (1, 2, 2, 2)]],
        "relu": [_case(core.relu, [s]) for s in [(2, 3, 4, 4), (1, 1, 5, 5), (3, 2, 2, 3)]],
        "add": _two_input(core.add, [[(2, 3, 4, 4)] * 2, [(1, 1, 5, 5)] * 2, [(3, 2, 2, 3)] * 2]),
        "add_bias": _two_input(core.add_bias, [[(2, 3, 4, 4), (3,)], [(1, 5, 2, 2), (5,)], [(3, 1, 3, 2), (1,)]]),
        "concat_channels": [_concat_case(c) for c in [(1, 2), (3, 1, 2), (2, 2, 2, 1)]],
        "fully_connected": [_fc_case(*a) for a in [(2, 3, 4), (1, 5, 2), (4, 2, 3)]],
        "softmax_cross_entropy": [
            _ce_case((4, 5, 1, 1), "per_sample_mean"),
            _ce_case((2, 6, 3, 3), "per_pixel_mean"),
            _ce_case((3, 2, 4, 2), "per_pixel_mean"),
        ],
        "sum": [_sum_case(s) for s in [(2, 3, 4, 4), (1, 1, 5, 5), (3, 2, 2, 3)]],
        "scale": [_scale_case(s, f) for s, f in [((2, 3, 4, 4), 0.5), ((1, 1, 5, 5), -3.0), ((3, 2, 2, 3), 2.0)]],
        "inner": [_inner_case(s) for s in [(2, 3, 4, 4), (1, 1, 5, 5), (3, 2, 2, 3)]],
    }


def build_clear_of_kinks(builder: Builder, seed: int, eps: float = EPS, attempts: int = 50):
    """Draw inputs until no relu/maxpool evaluation sits within 10 * eps of a tie."""
    for attempt in range(attempts):
        f, params = builder(np.random.default_rng([seed, attempt]))
        if kink_distance(f) >= 10 * eps:
            return f, params
    raise RuntimeError(f"could not draw kink-free inputs in {attempts} attempts")


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tolerance)


def check_ops(seed: int = 0, eps: float = EPS, n_coords: int = 50) -> list[CheckResult]:
    """Max relative finite-difference error per op, each op listed once."""
    results = []
    with precision("float64"):
        for name, builders in op_cases().items():
            start = time.perf_counter()
            worst = 0.0
            for i, builder in enumerate(builders):
                f, params = build_clear_of_kinks(builder, seed + i, eps)
                worst = max(worst, grad_check(f, params, eps, n_coords, seed))
            results.append(CheckResult(name, worst, OP_TOL, time.perf_counter() - start))
    return results


def tiny_arch() -> ArchConfig:
    return ArchConfig(input_hw=8, stem_channels=4, levels=[(4, 1), (8, 1)], bottleneck_channels=8,
                      num_seg_classes=6, num_grades=5, clf_head_blocks=1)


def joint_loss_builder(arch: ArchConfig | None = None, batch: int = 2) -> Builder:
    """Sum of classifier and segmentation cross-entropy through the whole model."""
    arch = arch or tiny_arch()

    def build(rng):
        model = build_model(arch, rng)
        x = Tensor(rng.normal(size=(batch, 3, arch.input_hw, arch.input_hw)))
        grades = rng.integers(0, arch.num_grades, size=batch)
        masks = rng.integers(0, arch.num_seg_classes, size=(batch, arch.input_hw, arch.input_hw))
        snapshot = {k: (s.running_mean.copy(), s.running_var.copy()) for k, s in model.bn_states().items()}

        def f():
            for k, s in model.bn_states().items():
                s.running_mean[...], s.running_var[...] = snapshot[k]
            enc = encode(model, x, "train")
            clf = core.softmax_cross_entropy(classify(model, enc, "train"), grades, "per_sample_mean")
            seg = core.softmax_cross_entropy(decode(model, enc, "train"), masks, "per_pixel_mean")
            return core.add(clf, seg)

        return f, model.tensors()
    return build


def check_model(seed: int = 0, eps: float = EPS, n_coords: int = 50) -> CheckResult:
    start = time.perf_counter()
    with precision("float64"):
        f, params = build_clear_of_kinks(joint_loss_builder(), seed, eps)
        err = grad_check(f, params, eps, n_coords, seed)
    return CheckResult("joint_model", err, MODEL_TOL, time.perf_counter() - start)


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'op':<24} {'max rel err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<24} {r.error:>12.3e} {r.tolerance:>8.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
