"""Hand-built models used as oracles by the interpretability tests."""

import numpy as np

from gliograd import ops
from gliograd.models import ForwardResult
from gliograd.tensor import Tensor


class PositiveNet:
    """conv -> relu -> conv -> relu -> GAP -> linear with strictly positive weights.

    With positive input no ReLU gate can fire and every backward signal is
    positive, so guided and vanilla gradients must coincide.
    """

    tap_names = ("act2",)

    def __init__(self, seed=0, cin=4):
        rng = np.random.default_rng(seed)
        self.w1 = rng.uniform(0.05, 0.5, size=(3, cin, 3, 3, 3))
        self.b1 = rng.uniform(0.01, 0.1, size=3)
        self.w2 = rng.uniform(0.05, 0.5, size=(2, 3, 3, 3, 3))
        self.b2 = rng.uniform(0.01, 0.1, size=2)
        self.head = rng.uniform(0.1, 1.0, size=(2, 2, 1, 1, 1))

    def forward(self, x, train=False, **_):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim == 4:
            x = ops.reshape(x, (1,) + x.shape)
        h = ops.relu(ops.conv3d_valid(x, Tensor(self.w1), Tensor(self.b1)))
        h = ops.relu(ops.conv3d_valid(h, Tensor(self.w2), Tensor(self.b2)))
        g = ops.global_avg_pool(h)
        n, c = g.shape
        logits = ops.reshape(ops.conv3d_valid(ops.reshape(g, (n, c, 1, 1, 1)), Tensor(self.head)), (n, 2))
        return ForwardResult(logits, {"act2": h})


class TwoHeadNet:
    """Two feature maps A, B at the tap; class 0 reads only A, class 1 only B.

    A = relu(x[0]), B = relu(x[1]); y0 = wa * mean(A), y1 = wb * mean(B).
    """

    tap_names = ("maps",)

    def __init__(self, wa=2.0, wb=-3.0):
        self.head = np.zeros((2, 2, 1, 1, 1))
        self.head[0, 0] = wa
        self.head[1, 1] = wb

    def forward(self, x, train=False, **_):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim == 4:
            x = ops.reshape(x, (1,) + x.shape)
        sel = np.zeros((2, x.shape[1], 1, 1, 1))
        sel[0, 0] = sel[1, 1] = 1.0
        maps = ops.relu(ops.conv3d_valid(x, Tensor(sel)))
        g = ops.global_avg_pool(maps)
        logits = ops.reshape(ops.conv3d_valid(ops.reshape(g, (1, 2, 1, 1, 1)), Tensor(self.head)), (1, 2))
        return ForwardResult(logits, {"maps": maps})


class LinearNet:
    """No ReLU anywhere: guided backpropagation must refuse it."""

    tap_names = ()

    def forward(self, x, train=False, **_):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        g = ops.global_avg_pool(x)
        return ForwardResult(ops.reshape(ops.mul(g, g), (1, g.shape[0])), {})
