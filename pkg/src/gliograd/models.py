"""Segmentation and grading networks built from pre-activation residual blocks.

Both networks use valid 3x3x3 convolutions, so every block shrinks its input;
skip paths are centre-cropped before summation.  Each builder also has a
purely symbolic shape propagation (:meth:`ModelGraph.layer_shapes`) that is
independent of the numeric forward pass and is used to validate configs.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor

GRADE_NAMES = ("LGG", "HGG")


class ShapeError(ValueError):
    """A configuration collapses a feature map below one voxel."""


@dataclass(frozen=True)
class SegNetConfig:
    patch: int = 64
    widths: tuple[int, ...] = (16, 32, 64)
    levels: int = 3
    in_channels: int = 4
    n_classes: int = 2
    spatial_dropout: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != self.levels:
            raise ValueError(f"widths {self.widths} must have one entry per level ({self.levels})")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")


@dataclass(frozen=True)
class GradeNetConfig:
    input_extent: int = 96
    in_channels: int = 4
    stem_width: int = 16
    widths: tuple[int, ...] = (16, 32, 64, 128)
    # max-pool applied right before residual block i (index 0: after the stem)
    pool_before: tuple[bool, ...] = (True, True, False, True)
    fc_widths: tuple[int, ...] = (64,)
    dropout: float = 0.4
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "pool_before", tuple(bool(b) for b in self.pool_before))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        if len(self.pool_before) != len(self.widths):
            raise ValueError("pool_before needs one flag per residual block")
        if not self.widths:
            raise ValueError("at least one residual block is required")


@dataclass
class ForwardResult:
    logits: Tensor
    taps: dict[str, Tensor] = field(default_factory=dict)


@dataclass
class _Ctx:
    train: bool
    rng: np.random.Generator | None
    update_stats: bool
    dropout: float | None
    trace: dict | None


def _even_extent(shape) -> tuple[int, ...]:
    return tuple(s - (s % 2) for s in shape[-3:])


class ModelGraph:
    """Parameters, batch-norm buffers and a forward pass with named taps."""

    kind = "base"

    def __init__(self, config, seed: int = 0):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng
        self.layer_shapes()  # validates the geometry eagerly

    # -- construction helpers -------------------------------------------
    def _conv(self, name: str, cin: int, cout: int, k: int) -> None:
        fan_in = cin * k**3
        self.params[f"{name}.w"] = (self._rng.standard_normal((cout, cin, k, k, k))
                                    * np.sqrt(2.0 / fan_in)).astype(np.float32)
        self.params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)

    def _bn(self, name: str, c: int) -> None:
        self.params[f"{name}.gamma"] = np.ones(c, dtype=np.float32)
        self.params[f"{name}.beta"] = np.zeros(c, dtype=np.float32)
        self.buffers[f"{name}.mean"] = np.zeros(c, dtype=np.float32)
        self.buffers[f"{name}.var"] = np.ones(c, dtype=np.float32)

    def _resblock(self, prefix: str, cin: int, cout: int, units: int = 2) -> None:
        c = cin
        for u in range(units):
            self._bn(f"{prefix}.unit{u}.bn", c)
            self._conv(f"{prefix}.unit{u}.conv", c, cout, 3)
            c = cout
        if cin != cout:
            self._conv(f"{prefix}.proj", cin, cout, 1)

    def _build(self) -> None:
        raise NotImplementedError

    # -- forward helpers --------------------------------------------------
    def _apply_bn(self, x: Tensor, p, name: str, ctx: _Ctx) -> Tensor:
        out, mean, var = ops.batchnorm(x, p[f"{name}.gamma"], p[f"{name}.beta"],
                                       self.buffers[f"{name}.mean"], self.buffers[f"{name}.var"],
                                       train=ctx.train)
        if ctx.train and ctx.update_stats:
            dt = self.buffers[f"{name}.mean"].dtype
            self.buffers[f"{name}.mean"] = mean.astype(dt)
            self.buffers[f"{name}.var"] = var.astype(dt)
        return out

    def _apply_conv(self, x: Tensor, p, name: str) -> Tensor:
        return ops.conv3d_valid(x, p[f"{name}.w"], p[f"{name}.b"])

    def _apply_resblock(self, x: Tensor, p, prefix: str, units: int, ctx: _Ctx,
                        spatial_p: float = 0.0) -> Tensor:
        h = x
        for u in range(units):
            if u > 0 and spatial_p > 0:
                h = ops.spatial_dropout(h, spatial_p, ctx.rng, ctx.train)
            h = ops.relu(self._apply_bn(h, p, f"{prefix}.unit{u}.bn", ctx))
            h = self._apply_conv(h, p, f"{prefix}.unit{u}.conv")
        skip = ops.center_crop_to(x, h.shape)
        if f"{prefix}.proj.w" in p:
            skip = self._apply_conv(skip, p, f"{prefix}.proj")
        return ops.add(h, skip)

    @staticmethod
    def _pool(h: Tensor) -> Tensor:
        return ops.maxpool3d(ops.center_crop_to(h, _even_extent(h.shape)))

    def _note(self, ctx: _Ctx, name: str, t: Tensor, flat: bool = False) -> None:
        if ctx.trace is not None:
            ctx.trace[name] = tuple(t.shape[1:2] if flat else t.shape[1:])  # drop the batch axis

    # -- public API ---------------------------------------------------------
    def param_tensors(self, requires_grad: bool = True, frozen=()) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad and k not in frozen, name=k)
                for k, v in self.params.items()}

    def forward(self, x, *, train: bool = False, rng: np.random.Generator | None = None,
                params: dict[str, Tensor] | None = None, update_stats: bool = True,
                dropout: float | None = None, trace: dict | None = None) -> ForwardResult:
        """Run the network on (C,D,H,W) or (N,C,D,H,W) input.

        Logits always come back batched.  In train mode batch-norm uses batch
        statistics and (unless ``update_stats`` is False) updates the running
        buffers; dropout needs ``rng``.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x))
        if x.ndim == 4:
            x = ops.reshape(x, (1,) + x.shape)
        if x.ndim != 5:
            raise ValueError(f"expected (C,D,H,W) or (N,C,D,H,W) input, got {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        if train and rng is None:
            rng = np.random.default_rng(0)
        if params is None:
            params = self.param_tensors(requires_grad=False)
        ctx = _Ctx(train, rng, update_stats, dropout, trace)
        return self._forward(x, params, ctx)

    def _forward(self, x: Tensor, p, ctx: _Ctx) -> ForwardResult:
        raise NotImplementedError

    def layer_shapes(self, extent: int | None = None) -> list[tuple[str, tuple[int, ...]]]:
        raise NotImplementedError

    @property
    def tap_names(self) -> tuple[str, ...]:
        raise NotImplementedError

    def output_extent(self, extent: int | None = None) -> int:
        return self.layer_shapes(extent)[-1][1][-1]

    def astype(self, dtype) -> ModelGraph:
        other = copy.deepcopy(self)
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        other.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return other

    def copy(self) -> ModelGraph:
        return copy.deepcopy(self)

    def config_dict(self) -> dict:
        return asdict(self.config)

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _check_extent(name: str, extent: int) -> int:
    if extent < 1:
        raise ShapeError(f"layer {name}: spatial extent drops to {extent} (< 1 voxel)")
    return extent


class SegNet(ModelGraph):
    """U-Net-style whole-tumour segmenter (encoder/decoder with summed skips)."""

    kind = "seg"

    def _build(self) -> None:
        cfg: SegNetConfig = self.config
        w = cfg.widths
        self._conv("stem", cfg.in_channels, w[0], 1)
        for i in range(cfg.levels):
            self._resblock(f"enc{i}", w[max(i - 1, 0)], w[i], units=2)
        for i in reversed(range(cfg.levels - 1)):
            self._conv(f"dec{i}.reduce", w[i + 1], w[i], 1)
            self._resblock(f"dec{i}.fuse", w[i], w[i], units=1)
        self._bn("head.bn", w[0])
        self._conv("head.conv", w[0], cfg.n_classes, 1)

    @property
    def tap_names(self) -> tuple[str, ...]:
        lv = self.config.levels
        return tuple(f"enc{i}" for i in range(lv)) + tuple(f"dec{i}" for i in reversed(range(lv - 1)))

    def layer_shapes(self, extent: int | None = None):
        cfg: SegNetConfig = self.config
        e = cfg.patch if extent is None else extent
        w = cfg.widths
        out = [("stem", (w[0], e, e, e))]
        skips = []
        for i in range(cfg.levels):
            if i > 0:
                e = _check_extent(f"pool{i}", (e - e % 2) // 2)
            e = _check_extent(f"enc{i}", e - 4)
            out.append((f"enc{i}", (w[i], e, e, e)))
            skips.append(e)
        for i in reversed(range(cfg.levels - 1)):
            e = 2 * e
            if e > skips[i]:
                raise ShapeError(f"layer dec{i}: upsampled extent {e} exceeds skip extent {skips[i]}")
            e = _check_extent(f"dec{i}", e - 2)
            out.append((f"dec{i}", (w[i], e, e, e)))
        out.append(("logits", (cfg.n_classes, e, e, e)))
        return out

    def _forward(self, x: Tensor, p, ctx: _Ctx) -> ForwardResult:
        cfg: SegNetConfig = self.config
        sd = cfg.spatial_dropout if ctx.dropout is None else ctx.dropout
        taps = {}
        h = self._apply_conv(x, p, "stem")
        self._note(ctx, "stem", h)
        skips = []
        for i in range(cfg.levels):
            if i > 0:
                h = self._pool(h)
            h = self._apply_resblock(h, p, f"enc{i}", 2, ctx, sd)
            taps[f"enc{i}"] = h
            self._note(ctx, f"enc{i}", h)
            skips.append(h)
        for i in reversed(range(cfg.levels - 1)):
            h = ops.upsample3d(self._apply_conv(h, p, f"dec{i}.reduce"))
            h = ops.add(h, ops.center_crop_to(skips[i], h.shape))
            h = self._apply_resblock(h, p, f"dec{i}.fuse", 1, ctx)
            taps[f"dec{i}"] = h
            self._note(ctx, f"dec{i}", h)
        h = ops.relu(self._apply_bn(h, p, "head.bn", ctx))
        logits = self._apply_conv(h, p, "head.conv")
        self._note(ctx, "logits", logits)
        return ForwardResult(logits, taps)

    @property
    def shrinkage(self) -> int:
        """Total loss of extent between patch and prediction (even)."""
        return self.config.patch - self.output_extent()


class GradeNet(ModelGraph):
    """Residual CNN -> global average pooling -> 1x1x1 cascade -> 2 logits."""

    kind = "grade"

    def _build(self) -> None:
        cfg: GradeNetConfig = self.config
        self._conv("stem", cfg.in_channels, cfg.stem_width, 3)
        c = cfg.stem_width
        for i, w in enumerate(cfg.widths):
            self._resblock(f"res{i + 1}", c, w, units=2)
            c = w
        self._bn("final.bn", c)
        for j, w in enumerate(cfg.fc_widths):
            self._conv(f"fc{j + 1}", c, w, 1)
            c = w
        self._conv("out", c, cfg.n_classes, 1)

    @property
    def tap_names(self) -> tuple[str, ...]:
        return tuple(f"res{i + 1}" for i in range(len(self.config.widths)))

    def layer_shapes(self, extent: int | None = None):
        cfg: GradeNetConfig = self.config
        e = cfg.input_extent if extent is None else extent
        e = _check_extent("stem", e - 2)
        out = [("stem", (cfg.stem_width, e, e, e))]
        for i, w in enumerate(cfg.widths):
            if cfg.pool_before[i]:
                e = _check_extent(f"pool{i + 1}", (e - e % 2) // 2)
            e = _check_extent(f"res{i + 1}", e - 4)
            out.append((f"res{i + 1}", (w, e, e, e)))
        c = cfg.widths[-1]
        out.append(("gap", (c,)))
        for j, w in enumerate(cfg.fc_widths):
            out.append((f"fc{j + 1}", (w,)))
        out.append(("logits", (cfg.n_classes,)))
        return out

    def output_extent(self, extent: int | None = None) -> int:
        return 1

    def _forward(self, x: Tensor, p, ctx: _Ctx) -> ForwardResult:
        cfg: GradeNetConfig = self.config
        pdrop = cfg.dropout if ctx.dropout is None else ctx.dropout
        taps = {}
        h = self._apply_conv(x, p, "stem")
        self._note(ctx, "stem", h)
        for i in range(len(cfg.widths)):
            if cfg.pool_before[i]:
                h = self._pool(h)
            h = self._apply_resblock(h, p, f"res{i + 1}", 2, ctx)
            taps[f"res{i + 1}"] = h
            self._note(ctx, f"res{i + 1}", h)
        h = ops.relu(self._apply_bn(h, p, "final.bn", ctx))
        g = ops.global_avg_pool(h)
        self._note(ctx, "gap", g)
        n, c = g.shape
        g = ops.reshape(g, (n, c, 1, 1, 1))
        for j in range(len(cfg.fc_widths)):
            g = ops.dropout(g, pdrop, ctx.rng, ctx.train)
            g = ops.relu(self._apply_conv(g, p, f"fc{j + 1}"))
            self._note(ctx, f"fc{j + 1}", g, flat=True)
        g = ops.dropout(g, pdrop, ctx.rng, ctx.train)
        logits = self._apply_conv(g, p, "out")
        logits = ops.reshape(logits, (n, cfg.n_classes))
        self._note(ctx, "logits", logits)
        return ForwardResult(logits, taps)


def build_seg_net(config: SegNetConfig | None = None, seed: int = 0) -> SegNet:
    return SegNet(config or SegNetConfig(), seed=seed)


def build_grade_net(config: GradeNetConfig | None = None, seed: int = 0) -> GradeNet:
    return GradeNet(config or GradeNetConfig(), seed=seed)


def config_from_dict(kind: str, d: dict):
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    if kind == "seg":
        return SegNetConfig(**d)
    if kind == "grade":
        return GradeNetConfig(**d)
    raise ValueError(f"unknown model kind {kind!r}")


def build_model(kind: str, config, seed: int = 0) -> ModelGraph:
    return {"seg": SegNet, "grade": GradeNet}[kind](config, seed=seed)
