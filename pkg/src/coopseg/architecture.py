"""Residual inception blocks, partial attention gating, and the joint model.

The model splits into three parameter partitions: ``theta1`` (shared encoder),
``theta2`` (classifier head) and ``theta3`` (segmentation decoder).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ArchConfig, ConfigError
from .core import (
    BatchNormState,
    DimensionError,
    Tensor,
    add,
    add_bias,
    batch_norm,
    concat_channels,
    conv2d,
    conv2d_transpose,
    fully_connected,
    get_default_dtype,
    global_avg_pool,
    maxpool2d,
    relu,
)

PARTITIONS = ("theta1", "theta2", "theta3")


class ParamRegistry:
    """Flat name -> tensor table plus the batch-norm states living in it."""

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_bn(self, name: str, channels: int) -> BatchNormState:
        state = BatchNormState.create(channels, name=name)
        for t in (state.gamma, state.beta):
            if t.name in self.params:
                raise KeyError(f"duplicate parameter {t.name!r}")
            self.params[t.name] = t
        self.bn[name] = state
        return state

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))


@dataclass
class ModelParams:
    cfg: ArchConfig
    theta1: ParamRegistry = field(default_factory=lambda: ParamRegistry("theta1"))
    theta2: ParamRegistry = field(default_factory=lambda: ParamRegistry("theta2"))
    theta3: ParamRegistry = field(default_factory=lambda: ParamRegistry("theta3"))

    def partitions(self) -> dict[str, ParamRegistry]:
        return {"theta1": self.theta1, "theta2": self.theta2, "theta3": self.theta3}

    def tensors(self, *names: str) -> list[Tensor]:
        names = names or PARTITIONS
        return [t for n in names for t in self.partitions()[n].tensors()]

    def count(self, *names: str) -> int:
        return int(sum(t.data.size for t in self.tensors(*names)))

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def bn_states(self) -> dict[str, BatchNormState]:
        out = {}
        for reg in self.partitions().values():
            out.update(reg.bn)
        return out


@dataclass
class EncoderTaps:
    """Last feature map of each encoder level plus the shared bottleneck."""

    taps: list[tuple[int, Tensor]]
    bottleneck: Tensor


# ---------------------------------------------------------------- conv units


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(get_default_dtype())


def init_conv_bn(reg: ParamRegistry, name: str, cin: int, cout: int, kh: int, kw: int, rng) -> None:
    reg.add(f"{name}.w", _he_normal(rng, (cout, cin, kh, kw), cin * kh * kw))
    reg.add_bn(f"{name}.bn", cout)


def conv_bn(x: Tensor, reg: ParamRegistry, name: str, mode: str, stride: int = 1, act: bool = True) -> Tensor:
    y = conv2d(x, reg[f"{name}.w"], stride, "same")
    y = batch_norm(y, reg.bn[f"{name}.bn"], mode)
    return relu(y) if act else y


# ---------------------------------------------------------------- inception

BRANCHES = ("b1", "b2", "b3", "b4")


def _spatial(name, cin, cout, k, factorized, act=True):
    """Conv units for one k x k convolution, split into 1xk then kx1 when factorized."""
    if k == 1 or not factorized:
        return [(name, cin, cout, k, k, act)]
    return [(f"{name}_1x{k}", cin, cout, 1, k, True), (f"{name}_{k}x1", cout, cout, k, 1, act)]


def inception_layout(channels: int, factorized: bool = False) -> dict[str, list[tuple]]:
    """Conv units (name, cin, cout, kh, kw, relu) for every path of the block."""
    if channels % 4:
        raise ConfigError(f"inception width {channels} is not divisible by 4")
    c, b = channels, channels // 4
    return {
        "b1": _spatial("b1", c, b, 1, factorized),
        "b2": _spatial("b2_reduce", c, b, 1, factorized) + _spatial("b2", b, b, 3, factorized),
        "b3": _spatial("b3_reduce", c, b, 1, factorized) + _spatial("b3", b, b, 5, factorized),
        "b4": _spatial("b4", c, b, 1, factorized),
        "merge": _spatial("merge", c, c, 3, factorized, act=False),
        "shortcut": _spatial("shortcut", c, c, 1, factorized, act=False),
    }


def init_residual_inception(reg: ParamRegistry, prefix: str, channels: int, rng, factorized: bool = False) -> None:
    for units in inception_layout(channels, factorized).values():
        for name, cin, cout, kh, kw, _ in units:
            init_conv_bn(reg, f"{prefix}.{name}", cin, cout, kh, kw, rng)


def _run_units(x, units, reg, prefix, mode):
    for name, _, _, _, _, act in units:
        x = conv_bn(x, reg, f"{prefix}.{name}", mode, act=act)
    return x


def inception_branch(x: Tensor, reg: ParamRegistry, prefix: str, branch: str, mode: str = "train",
                     factorized: bool = False) -> Tensor:
    """One of the four parallel paths (b1..b4), each producing C/4 channels."""
    units = inception_layout(x.shape[1], factorized)[branch]
    y = _run_units(x, units, reg, prefix, mode)
    if branch == "b4":
        y = maxpool2d(y, 3, 1, "same")
    return y


def residual_inception(x: Tensor, reg: ParamRegistry, prefix: str, mode: str = "train",
                       factorized: bool = False) -> Tensor:
    """Four-branch block, 3x3 smoothing conv, 1x1 projected shortcut, ReLU after the add."""
    layout = inception_layout(x.shape[1], factorized)
    cat = concat_channels([inception_branch(x, reg, prefix, b, mode, factorized) for b in BRANCHES])
    merged = _run_units(cat, layout["merge"], reg, prefix, mode)
    shortcut = _run_units(x, layout["shortcut"], reg, prefix, mode)
    return relu(add(merged, shortcut))


def factorized_residual_inception(x: Tensor, reg: ParamRegistry, prefix: str, mode: str = "train") -> Tensor:
    return residual_inception(x, reg, prefix, mode, factorized=True)


def inception_param_count(channels: int, factorized: bool = False) -> int:
    total = 0
    for units in inception_layout(channels, factorized).values():
        for _, cin, cout, kh, kw, _ in units:
            total += cin * cout * kh * kw + 2 * cout
    return total


# ---------------------------------------------------------------- partial attention


def attention_ratio(tap_hw: tuple[int, int], up_hw: tuple[int, int]) -> float:
    """a_i = min(h_E, w_E) / min(h_U, w_U)."""
    return min(tap_hw) / min(up_hw)


def pag_plan(tap_hws: list[tuple[int, int]], up_hw: tuple[int, int]) -> list[tuple[float, bool, int]]:
    """(a_i, included, pool stride) per tap; stride 1 means identity."""
    plan = []
    for hw in tap_hws:
        a = attention_ratio(hw, up_hw)
        if a < 1:
            plan.append((a, False, 0))
            continue
        if a != int(a):
            raise ConfigError(f"tap {hw} vs upsample {up_hw} gives non-integer ratio {a}")
        plan.append((a, True, int(a)))
    return plan


def pag_select(taps: EncoderTaps | list[tuple[int, Tensor]], u: Tensor) -> list[tuple[int, Tensor]]:
    """Encoder taps at least as large as ``u``, max-pooled down to its size."""
    tap_list = taps.taps if isinstance(taps, EncoderTaps) else taps
    up_hw = u.shape[2:]
    plan = pag_plan([t.shape[2:] for _, t in tap_list], up_hw)
    selected = []
    for (level, tap), (_, included, stride) in zip(tap_list, plan):
        if not included:
            continue
        pooled = tap if stride == 1 else maxpool2d(tap, stride, stride, "valid")
        if pooled.shape[2:] != up_hw:
            raise DimensionError(f"pooled tap {pooled.shape[2:]} does not match upsample {up_hw}")
        selected.append((level, pooled))
    return selected


def init_pag_merge(reg: ParamRegistry, prefix: str, channels: int, tap_channels: list[int], rng,
                   fusion: str = "concat") -> None:
    if fusion == "concat":
        init_conv_bn(reg, f"{prefix}.merge", channels + sum(tap_channels), channels, 1, 1, rng)
    elif fusion == "add":
        for i, c in enumerate(tap_channels):
            reg.add(f"{prefix}.proj{i}.w", _he_normal(rng, (channels, c, 1, 1), c))
        reg.add_bn(f"{prefix}.merge.bn", channels)
    elif fusion == "none":
        init_conv_bn(reg, f"{prefix}.merge", channels, channels, 1, 1, rng)
    else:
        raise ConfigError(f"unknown fusion {fusion!r}")


def pag_merge(u: Tensor, selected: list[tuple[int, Tensor]], reg: ParamRegistry, prefix: str,
              mode: str = "train", fusion: str = "concat") -> Tensor:
    """Fuse pooled encoder maps into the upsampled tensor, keeping u's channel count."""
    for _, t in selected:
        if t.shape[0] != u.shape[0] or t.shape[2:] != u.shape[2:]:
            raise DimensionError(f"tap {t.shape} does not align with {u.shape}")
    if fusion == "concat":
        cat = concat_channels([u] + [t for _, t in selected])
        return conv_bn(cat, reg, f"{prefix}.merge", mode)
    if fusion == "add":
        y = u
        for i, (_, t) in enumerate(selected):
            y = add(y, conv2d(t, reg[f"{prefix}.proj{i}.w"], 1, "same"))
        return relu(batch_norm(y, reg.bn[f"{prefix}.merge.bn"], mode))
    return conv_bn(u, reg, f"{prefix}.merge", mode)


# ---------------------------------------------------------------- joint model


def _level_hw(cfg: ArchConfig, level: int) -> int:
    return cfg.input_hw // 2 ** level


def build_model(cfg: ArchConfig, rng: np.random.Generator | int = 0) -> ModelParams:
    """Allocate He-initialized parameters for encoder, classifier head and decoder."""
    cfg.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    m = ModelParams(cfg)
    widths = [c for c, _ in cfg.levels]

    init_conv_bn(m.theta1, "stem", 3, cfg.stem_channels, 3, 3, rng)
    for i, (c, blocks) in enumerate(cfg.levels):
        for j in range(blocks):
            init_residual_inception(m.theta1, f"enc{i}.block{j}", c, rng)
        nxt = widths[i + 1] if i + 1 < len(widths) else cfg.bottleneck_channels
        init_conv_bn(m.theta1, f"enc{i}.down", c, nxt, 3, 3, rng)

    for j in range(cfg.clf_head_blocks):
        init_residual_inception(m.theta2, f"clf.block{j}", cfg.bottleneck_channels, rng, factorized=True)
    m.theta2.add("clf.fc.w", _he_normal(rng, (cfg.bottleneck_channels, cfg.num_grades), cfg.bottleneck_channels))
    m.theta2.add("clf.fc.b", np.zeros(cfg.num_grades, get_default_dtype()))

    prev = cfg.bottleneck_channels
    for i in reversed(range(len(cfg.levels))):
        c = widths[i]
        m.theta3.add(f"dec{i}.up.w", _he_normal(rng, (prev, c, 2, 2), prev))
        m.theta3.add_bn(f"dec{i}.up.bn", c)
        # stage i upsamples to tap i's resolution, so taps 0..i have a_i >= 1
        init_pag_merge(m.theta3, f"dec{i}.pag", c, widths[: i + 1], rng, cfg.pag_fusion)
        prev = c
    m.theta3.add("seg.out.w", _he_normal(rng, (cfg.num_seg_classes, widths[0], 1, 1), widths[0]))
    m.theta3.add("seg.out.b", np.zeros(cfg.num_seg_classes, get_default_dtype()))
    return m


def encode(m: ModelParams, x: Tensor, mode: str = "train") -> EncoderTaps:
    """Shared trunk: stem, inception blocks per level, strided-conv downsampling."""
    cfg = m.cfg
    if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.input_hw, cfg.input_hw):
        raise DimensionError(f"expected (N, 3, {cfg.input_hw}, {cfg.input_hw}) input, got {x.shape}")
    h = conv_bn(x, m.theta1, "stem", mode)
    taps = []
    for i, (_, blocks) in enumerate(cfg.levels):
        for j in range(blocks):
            h = residual_inception(h, m.theta1, f"enc{i}.block{j}", mode)
        taps.append((i, h))
        h = conv_bn(h, m.theta1, f"enc{i}.down", mode, stride=2)
    return EncoderTaps(taps, h)


def classify(m: ModelParams, enc: EncoderTaps, mode: str = "train") -> Tensor:
    """Grade logits (N, num_grades, 1, 1) from the bottleneck."""
    h = enc.bottleneck
    for j in range(m.cfg.clf_head_blocks):
        h = factorized_residual_inception(h, m.theta2, f"clf.block{j}", mode)
    return fully_connected(global_avg_pool(h), m.theta2["clf.fc.w"], m.theta2["clf.fc.b"])


def decode(m: ModelParams, enc: EncoderTaps, mode: str = "train") -> Tensor:
    """Segmentation logits (N, num_seg_classes, H, W) at input resolution."""
    h = enc.bottleneck
    for i in reversed(range(len(m.cfg.levels))):
        u = conv2d_transpose(h, m.theta3[f"dec{i}.up.w"], 2)
        u = relu(batch_norm(u, m.theta3.bn[f"dec{i}.up.bn"], mode))
        selected = [] if m.cfg.pag_fusion == "none" else pag_select(enc, u)
        h = pag_merge(u, selected, m.theta3, f"dec{i}.pag", mode, m.cfg.pag_fusion)
    return add_bias(conv2d(h, m.theta3["seg.out.w"], 1, "same"), m.theta3["seg.out.b"])


def forward_joint(m: ModelParams, x: Tensor, mode: str = "train") -> tuple[Tensor, Tensor, EncoderTaps]:
    """Evaluate the trunk once and both heads from the same bottleneck."""
    enc = encode(m, x, mode)
    return classify(m, enc, mode), decode(m, enc, mode), enc
