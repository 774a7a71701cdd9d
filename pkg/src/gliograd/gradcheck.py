"""Central finite-difference checks of tape gradients (64-bit)."""

from __future__ import annotations

from collections.abc import Callable, Collection, Mapping
from dataclasses import dataclass

import numpy as np

from .ops import kink_recorder
from .tensor import Tape, Tensor, backward, no_tape

LossFn = Callable[[Mapping[str, Tensor]], Tensor]


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter_index: int
    worst_parameter: str
    step_size: float
    checked: int
    skipped_kinks: int

    def passed(self, tol: float) -> bool:
        return self.max_relative_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps vanishing gradients
    from turning round-off into huge ratios."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(loss_fn: LossFn, params: Mapping[str, np.ndarray], step: float = 1e-4,
               frozen: Collection[str] = (), floor: float = 1e-7,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               ) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn`` with central differences.

    ``loss_fn`` receives a name -> Tensor mapping and must return a scalar
    Tensor.  Every entry of every non-frozen parameter is probed (or a
    random subset of ``max_entries`` per parameter).  Probes whose +/- step
    flips a ReLU gate or a pooling argmax are skipped and counted.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tensors = {k: Tensor(v, requires_grad=k not in frozen, name=k) for k, v in arrays.items()}
    with Tape() as tape, kink_recorder() as base_kinks:
        loss = loss_fn(tensors)
    if loss.data.size != 1:
        raise ValueError("loss_fn must return a scalar tensor")
    grads = backward(loss, tape)
    base_sig = base_kinks.signature

    def evaluate(name: str, arr: np.ndarray) -> tuple[float, list[bytes]]:
        feed = {k: Tensor(arrays[k] if k != name else arr, name=k) for k in arrays}
        with no_tape(), kink_recorder() as rec:
            value = float(loss_fn(feed).data)
        return value, rec.signature

    worst = (0.0, -1, "")
    checked = skipped = 0
    flat_offset = 0
    for name, arr in arrays.items():
        size = arr.size
        if name in frozen:
            flat_offset += size
            continue
        g = grads.get(tensors[name])
        analytic = np.zeros(size) if g is None else np.asarray(g, dtype=np.float64).reshape(-1)
        idx = np.arange(size)
        if max_entries is not None and size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(size, max_entries, replace=False))
        for j in idx:
            probe = arr.copy().reshape(-1)
            probe[j] = arr.reshape(-1)[j] + step
            fp, sp = evaluate(name, probe.reshape(arr.shape))
            probe[j] = arr.reshape(-1)[j] - step
            fm, sm = evaluate(name, probe.reshape(arr.shape))
            if sp != base_sig or sm != base_sig:
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * step)
            err = relative_error(analytic[j], numeric, floor)
            checked += 1
            if err > worst[0] or worst[1] < 0:
                worst = (err, flat_offset + int(j), name)
        flat_offset += size
    return GradCheckReport(float(worst[0]), worst[1], worst[2], step, checked, skipped)


# ------------------------------------------------------------------ suites

def primitive_suite(seed: int = 0) -> dict[str, GradCheckReport]:
    """One finite-difference check per primitive on small random inputs."""
    from . import ops

    rng = np.random.default_rng(seed)
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    w_out = r(2, 3, 4, 4, 4)

    def dot(t: Tensor, w: np.ndarray) -> Tensor:
        return ops.tsum(ops.mul(t, Tensor(w)))

    cases: dict[str, tuple[LossFn, dict[str, np.ndarray]]] = {
        "conv3d_valid": (lambda p: dot(ops.conv3d_valid(p["x"], p["w"], p["b"]), w_out),
                         {"x": r(2, 2, 6, 6, 6), "w": r(3, 2, 3, 3, 3), "b": r(3)}),
        "conv3d_1x1x1": (lambda p: dot(ops.conv3d_valid(p["x"], p["w"], p["b"]), r_1),
                         {"x": r(2, 3, 3, 3), "w": r(2, 2, 1, 1, 1), "b": r(2)}),
        "maxpool3d": (lambda p: dot(ops.maxpool3d(p["x"]), r_pool), {"x": r(2, 4, 4, 6)}),
        "upsample3d": (lambda p: dot(ops.upsample3d(p["x"]), r_up), {"x": r(2, 2, 3, 2)}),
        "center_crop_to": (lambda p: dot(ops.center_crop_to(p["x"], (3, 2, 4)), r_crop), {"x": r(2, 6, 5, 7)}),
        "batchnorm_train": (lambda p: dot(ops.batchnorm(p["x"], p["g"], p["b"], np.zeros(3), np.ones(3),
                                                        train=True)[0], r_bn),
                            {"x": r(2, 3, 3, 3, 3), "g": r(3), "b": r(3)}),
        "batchnorm_eval": (lambda p: dot(ops.batchnorm(p["x"], p["g"], p["b"], r_mean, r_var,
                                                       train=False)[0], r_bn),
                           {"x": r(2, 3, 3, 3, 3), "g": r(3), "b": r(3)}),
        "relu": (lambda p: dot(ops.relu(p["x"]), r_relu), {"x": r(3, 4, 5)}),
        "add": (lambda p: dot(ops.add(p["a"], p["b"]), r_relu), {"a": r(3, 4, 5), "b": r(3, 4, 5)}),
        "mul": (lambda p: dot(ops.mul(p["a"], p["b"]), r_relu), {"a": r(3, 4, 5), "b": r(3, 4, 5)}),
        "reshape": (lambda p: dot(ops.reshape(p["x"], (4, 15)), r_rs), {"x": r(3, 4, 5)}),
        "global_avg_pool": (lambda p: dot(ops.global_avg_pool(p["x"]), r_gap), {"x": r(2, 3, 2, 3, 2)}),
        "softmax_crossentropy": (lambda p: ops.softmax_crossentropy(p["x"], np.array([0, 1, 1]))[1],
                                 {"x": r(3, 2)}),
        "softmax_crossentropy_dense": (lambda p: ops.softmax_crossentropy(p["x"], t_dense)[1],
                                       {"x": r(1, 2, 2, 3, 2)}),
        "dropout": (lambda p: dot(ops.dropout(p["x"], 0.4, np.random.default_rng(3)), r_relu),
                    {"x": r(3, 4, 5)}),
        "spatial_dropout": (lambda p: dot(ops.spatial_dropout(p["x"], 0.3, np.random.default_rng(4)), r_bn),
                            {"x": r(2, 3, 3, 3, 3)}),
    }
    r_1, r_pool, r_up = r(2, 3, 3, 3), r(2, 2, 2, 3), r(2, 4, 6, 4)
    r_crop, r_bn, r_relu = r(2, 3, 2, 4), r(2, 3, 3, 3, 3), r(3, 4, 5)
    r_mean, r_var, r_rs, r_gap = r(3), rng.uniform(0.5, 2.0, 3), r(4, 15), r(2, 3)
    t_dense = rng.integers(0, 2, size=(1, 2, 3, 2))
    return {name: grad_check(fn, params, step=1e-5) for name, (fn, params) in cases.items()}


def network_suite(seed: int = 0, max_entries: int = 12) -> dict[str, GradCheckReport]:
    """Full-graph checks of reduced grading / segmentation nets at 16^3."""
    from . import ops
    from .models import GradeNetConfig, SegNetConfig, build_grade_net, build_seg_net

    rng = np.random.default_rng(seed)
    grade = build_grade_net(GradeNetConfig(input_extent=16, stem_width=4, widths=(4, 8),
                                           pool_before=(False, True), fc_widths=(6,), dropout=0.0), seed=seed)
    seg = build_seg_net(SegNetConfig(patch=16, widths=(4, 8), levels=2, spatial_dropout=0.0), seed=seed)
    out = {}
    for name, model in (("grade_net_16", grade), ("seg_net_16", seg)):
        model = model.astype(np.float64)
        # non-trivial batch-norm affine parameters
        for k in model.params:
            if k.endswith(".gamma"):
                model.params[k] = rng.uniform(0.5, 1.5, model.params[k].shape)
            elif k.endswith(".beta"):
                model.params[k] = rng.normal(0.0, 0.1, model.params[k].shape)
        x = rng.normal(size=(2, 4, 16, 16, 16))
        if model.kind == "grade":
            target = np.array([0, 1])
        else:
            target = rng.integers(0, 2, size=(2,) + (model.output_extent(),) * 3)

        def loss_fn(p, model=model, x=x, target=target):
            res = model.forward(p["input"], train=True, params=p, update_stats=False, dropout=0.0)
            return ops.softmax_crossentropy(res.logits, target)[1]

        params = {**model.params, "input": x}
        # the floor absorbs ~1e-9 round-off on entries whose true gradient is 0
        # (conv biases feeding straight into train-mode batch-norm)
        out[name] = grad_check(loss_fn, params, step=1e-5, floor=1e-5, max_entries=max_entries,
                               rng=np.random.default_rng(seed))
    return out
