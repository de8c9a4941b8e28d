"""Reverse-mode differentiation over recorded tensor graphs.

Provides the backward traversal, a central-difference gradient oracle,
SGD with classic momentum, and the step learning-rate policy. A small
registry of named gradient-check cases backs the grad-check CLI command
and the operator-coverage tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, no_grad

__all__ = [
    "backward", "gradient_map", "finite_diff_check", "FDReport",
    "OptimState", "sgd_momentum_step", "step_lr", "gradcheck_cases",
]


def _reachable(loss: Tensor) -> List[Tensor]:
    seen = set()
    order: List[Tensor] = []
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        stack.extend(node._parents)
    order.sort(key=lambda t: t._seq)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable leaf's .grad.

    Nodes are visited in exact reverse recording order, which is a valid
    reverse-topological order since inputs always precede outputs.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise RuntimeError("double backward is unsupported; rebuild the graph")
    nodes = _reachable(loss)
    cot: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = cot.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in cot:
                cot[key] = cot[key] + pg
            else:
                cot[key] = pg
    loss._backward_done = True


def gradient_map(loss: Tensor, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    """Run backward and collect per-parameter gradients.

    Parameters the loss never touched get explicit zero gradients.
    """
    backward(loss)
    grads = {}
    for name, p in params.items():
        grads[name] = np.zeros_like(p.data) if p.grad is None else p.grad
    return grads


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class FDReport:
    """Outcome of a central-difference check against analytic gradients."""

    max_rel_error: float
    checked: int
    skipped: List[Tuple[int, int]] = field(default_factory=list)
    nonfinite: List[Tuple[int, int]] = field(default_factory=list)
    worst: Optional[Tuple[int, int]] = None

    @property
    def ok(self) -> bool:
        return not self.nonfinite and np.isfinite(self.max_rel_error)


def finite_diff_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                      epsilon: float = 1e-5,
                      skip: Optional[Sequence[Optional[np.ndarray]]] = None) -> FDReport:
    """Compare analytic gradients of scalar f(*inputs) with central differences.

    Per coordinate the relative error is |a - n| / max(1e-8, |a| + |n|).
    skip[i], when given, is a boolean mask of coordinates to leave out
    (e.g. sample points adjacent to interpolation kinks); skipped
    coordinates are listed in the report.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*tensors)
    backward(out)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad
                for a, t in zip(arrays, tensors)]

    def eval_at(pieces: List[np.ndarray]) -> float:
        with no_grad():
            return f(*[Tensor(p) for p in pieces]).item()

    report = FDReport(max_rel_error=0.0, checked=0)
    for i, base in enumerate(arrays):
        mask = None if skip is None else skip[i]
        flat_a = analytic[i].ravel()
        for j in range(base.size):
            if mask is not None and mask.ravel()[j]:
                report.skipped.append((i, j))
                continue
            xp = base.copy()
            xp.flat[j] += epsilon
            xm = base.copy()
            xm.flat[j] -= epsilon
            fp = eval_at(arrays[:i] + [xp] + arrays[i + 1:])
            fm = eval_at(arrays[:i] + [xm] + arrays[i + 1:])
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.nonfinite.append((i, j))
                continue
            num = (fp - fm) / (2.0 * epsilon)
            a = float(flat_a[j])
            rel = abs(a - num) / max(1e-8, abs(a) + abs(num))
            report.checked += 1
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = (i, j)
    return report


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class OptimState:
    """Per-parameter velocity buffers for SGD with classic momentum."""

    velocity: Dict[str, np.ndarray]
    momentum: float = 0.9
    base_lr: float = 0.001
    epoch: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], momentum: float = 0.9,
                   base_lr: float = 0.001) -> "OptimState":
        vel = {name: np.zeros_like(p.data) for name, p in params.items()}
        return cls(velocity=vel, momentum=momentum, base_lr=base_lr)


def sgd_momentum_step(params: Mapping[str, Tensor],
                      grads: Mapping[str, np.ndarray],
                      state: OptimState, lr: float) -> None:
    """v <- mu*v + g; w <- w - lr*v, in place."""
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        v = state.velocity[name]
        v *= state.momentum
        v += g
        if lr != 0.0:
            p.data -= lr * v


def step_lr(epoch: int, base_lr: float) -> float:
    """Learning rate dropped by one order of magnitude every 100 epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base_lr * 10.0 ** (-(epoch // 100))


# ---------------------------------------------------------------------------
# gradient-check case registry


def gradcheck_cases(seed: int = 0) -> Dict[str, Callable[[], FDReport]]:
    """Named finite-difference checks covering every differentiable operator.

    Each entry runs one small randomized instance (extents <= 5) and
    returns its FDReport. Used by tests and the grad-check CLI command.
    """
    from . import gum
    from . import tensor as T

    rng = np.random.default_rng(seed)

    def r(*shape):
        return rng.uniform(-1.0, 1.0, size=shape)

    def square_sum(t):
        return T.tsum(T.mul(t, t))

    def weighted_sum(t, weights: np.ndarray):
        # fixed random weights keep gradients O(1); a plain sum or sum of
        # squares is nearly invariant for normalized outputs
        return T.tsum(T.mul(t, T.Tensor(weights)))

    def conv_case(stride, dilation, padding, with_bias):
        x = r(2, 3, 5, 5)
        w = r(4, 3, 3, 3) * 0.5
        b = r(4) if with_bias else None

        def f(xt, wt, *rest):
            params = T.ConvParams(kernel=wt, bias=rest[0] if rest else None,
                                  stride=stride, dilation=dilation, padding=padding)
            return T.tsum(T.conv2d(xt, params))

        inputs = [x, w] + ([b] if with_bias else [])
        return lambda: finite_diff_check(f, inputs)

    def norm_case(frozen):
        x = r(2, 3, 4, 4)
        gamma = r(3) + 1.5
        beta = r(3)
        stats = (r(3) * 0.1, np.abs(r(3)) + 0.5) if frozen else None
        weights = rng.uniform(0.5, 1.5, size=x.shape)

        def f(xt, gt, bt):
            return weighted_sum(T.scale_shift_norm(xt, gt, bt, stats=stats), weights)

        return lambda: finite_diff_check(f, [x, gamma, beta])

    def relu_case():
        x = r(2, 3, 4, 4)
        x = np.where(np.abs(x) < 0.05, 0.2, x)  # keep activations off the kink

        def f(xt):
            return square_sum(T.relu(xt))

        return lambda: finite_diff_check(f, [x])

    def merge_case(mode):
        a, b = r(2, 3, 3, 3), r(2, 3, 3, 3)

        def f(at, bt):
            return square_sum(T.merge(at, bt, mode))

        return lambda: finite_diff_check(f, [a, b])

    def ce_case():
        logits = r(2, 4, 3, 3) * 2.0
        targets = rng.integers(0, 4, size=(2, 3, 3))
        targets[0, 0, 0] = 255

        def f(lt):
            return T.softmax_cross_entropy(lt, targets)

        return lambda: finite_diff_check(f, [logits])

    def mul_case():
        a, b = r(3, 4), r(3, 4)

        def f(at, bt):
            return T.tsum(T.mul(at, bt))

        return lambda: finite_diff_check(f, [a, b])

    def upsample_case(mode):
        x = r(1, 2, 3, 3)

        def f(xt):
            return square_sum(gum.upsample(xt, 2, mode=mode))

        return lambda: finite_diff_check(f, [x])

    def guided_case():
        u = r(1, 2, 4, 4)
        grid = gum.make_regular_grid(4, 4, 8, 8)
        offsets = rng.uniform(-1.2, 1.2, size=(1, 2, 8, 8))
        skip_off = gum.kink_mask(grid, offsets)
        weights = rng.uniform(0.5, 1.5, size=(1, 2, 8, 8))

        def f(ut, ot):
            return weighted_sum(gum.guided_sample(ut, grid, ot, mode="bilinear"),
                                weights)

        return lambda: finite_diff_check(f, [u, offsets], skip=[None, skip_off])

    return {
        "conv2d": conv_case(1, 1, 1, True),
        "conv2d-stride2": conv_case(2, 1, 1, True),
        "conv2d-dilation2": conv_case(1, 2, 2, False),
        "scale-shift-norm-batch": norm_case(False),
        "scale-shift-norm-frozen": norm_case(True),
        "relu": relu_case(),
        "merge-sum": merge_case("sum"),
        "merge-concat": merge_case("concat"),
        "softmax-cross-entropy": ce_case(),
        "mul": mul_case(),
        "upsample-bilinear": upsample_case("bilinear"),
        "guided-bilinear": guided_case(),
    }
