"""Dense tensors with tape-style reverse-mode differentiation.

Every differentiable primitive the coarse and fine heat-map models need lives
here: 2-D convolution (cross-correlation, no kernel flip), max pooling,
nearest upsampling, ReLU, elementwise helpers and the heat-map MSE loss.

A :class:`Tensor` is also the graph node: it records the op that produced it,
references to its inputs, auxiliary data cached by the forward pass (pooling
argmax indices, dropout masks, crop windows) and, for leaves, a gradient
accumulator.  Calling :func:`backward` on a scalar root walks the recorded
graph once in reverse topological order and consumes it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A dense array plus the graph bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "aux", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.aux: dict = {}
        self._backward_fn: BackwardFn | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: BackwardFn, aux: dict | None = None) -> Tensor:
    """Wrap a forward result as a graph node.

    ``backward_fn`` maps the output gradient to one gradient per parent (or
    ``None`` for parents that do not need one).
    """
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.parents = tuple(parents)
    out.aux = aux or {}
    out.requires_grad = any(p.requires_grad for p in parents)
    out._backward_fn = backward_fn if out.requires_grad else None
    out._consumed = False
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every trainable leaf.

    The root must be scalar.  A graph can be differentiated once; build a
    fresh graph (and zero the leaf gradients if needed) for the next step.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise RuntimeError("graph already differentiated; rebuild it before calling backward again")
    root._consumed = True
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient reached a leaf")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise RuntimeError(f"{node.op}: gradient shape {pg.shape} does not match input {p.shape}")
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
        # free cached forward state; the graph is single-use
        node._backward_fn = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x`` [B,Cin,H,W] with ``kernel`` [Cout,Cin,kh,kw]."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ValueError(f"conv2d: input has {C} channels but kernel expects {Ck}")
    if bias.shape != (O,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {O} output channels")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    w = kernel.data
    out = np.zeros((B, O, Ho, Wo), dtype=np.result_type(x.data, w))
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + hs : stride, j : j + ws : stride]
            out += np.einsum("bchw,oc->bohw", xs, w[:, :, i, j], optimize=True)
    out += bias.data[None, :, None, None]

    def backward_fn(g):
        gx = gw = None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        if kernel.requires_grad:
            gw = np.empty_like(w)
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, i : i + hs : stride, j : j + ws : stride]
                    gw[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += np.einsum(
                        "bohw,oc->bchw", g, w[:, :, i, j], optimize=True
                    )
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        return gx, gw, gb

    return record(out, "conv2d", (x, kernel, bias), backward_fn, {"stride": stride, "pad": pad})


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; ties go to the first row-major index."""
    B, C, H, W = x.shape
    if k < 1 or H % k or W % k:
        raise ValueError(f"maxpool2d: extents {H}x{W} not divisible by {k}")
    if k == 1:
        return record(x.data.copy(), "maxpool2d", (x,), lambda g: (g,), {"k": 1})
    Hk, Wk = H // k, W // k
    win = x.data.reshape(B, C, Hk, k, Wk, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Hk, Wk, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gw = np.zeros((B, C, Hk, Wk, k * k), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(B, C, Hk, Wk, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return record(out, "maxpool2d", (x,), backward_fn, {"k": k, "argmax": idx})


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward_fn(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return record(out, "upsample_nearest", (x,), backward_fn, {"factor": factor})


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return record(a.data + b.data, "add", (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, "scale", (a,), lambda g: (g * c,))


def multiply_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant (broadcastable) array; no gradient to the mask."""
    out = a.data * mask
    return record(out, "mask", (a,), lambda g: (np.broadcast_to(g * mask, a.shape).copy(),), {"mask": mask})


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    sizes = [t.shape[1] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return record(np.concatenate([t.data for t in xs], axis=1), "concat", tuple(xs), backward_fn)


def tensor_sum(x: Tensor) -> Tensor:
    return record(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.full_like(x.data, g),))


def joint_heads(x: Tensor, weight: Tensor, bias: Tensor, n_joints: int) -> Tensor:
    """Per-joint 1x1 convolution with unshared weights.

    ``x`` holds the trunk output of every (item, joint) instance stacked as
    [B*N, F, H, W]; joint ``j`` is mapped by its own ``weight[j]`` and
    ``bias[j]`` to one output map.  Result is [B, N, H, W].
    """
    BN, F, H, W = x.shape
    if BN % n_joints:
        raise ValueError(f"joint_heads: {BN} instances not a multiple of {n_joints} joints")
    if weight.shape != (n_joints, F) or bias.shape != (n_joints,):
        raise ValueError(f"joint_heads: weight {weight.shape}/bias {bias.shape} do not match {n_joints} joints x {F} features")
    B = BN // n_joints
    xr = x.data.reshape(B, n_joints, F, H, W)
    out = np.einsum("bnfhw,nf->bnhw", xr, weight.data, optimize=True) + bias.data[None, :, None, None]

    def backward_fn(g):
        gx = np.einsum("bnhw,nf->bnfhw", g, weight.data, optimize=True).reshape(BN, F, H, W)
        gw = np.einsum("bnhw,bnfhw->nf", g, xr, optimize=True)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record(out, "joint_heads", (x, weight, bias), backward_fn)


def mse_heatmap_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """(1/N) sum_j sum_xy (pred - target)^2, averaged over the batch.

    ``pred`` and ``target`` are [B, N, H, W] with N the joint count.
    """
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"heat-map loss: prediction {pred.shape} vs target {target.shape}")
    if pred.data.ndim != 4:
        raise ValueError(f"heat-map loss expects [B, N, H, W], got {pred.shape}")
    B, N = pred.shape[:2]
    diff = pred.data - target
    norm = 1.0 / (B * N)
    value = np.asarray((diff * diff).sum() * norm, dtype=pred.dtype)
    return record(value, "mse_heatmap", (pred,), lambda g: (2.0 * norm * g * diff,))


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class ParamCheck:
    name: str
    checked: int
    excluded: int
    max_rel_error: float


@dataclass
class GradCheckReport:
    tol: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def excluded(self) -> int:
        return sum(p.excluded for p in self.params)

    @property
    def checked(self) -> int:
        return sum(p.checked for p in self.params)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def summary(self) -> str:
        lines = [
            f"{p.name}: checked={p.checked} excluded={p.excluded} max_rel_err={p.max_rel_error:.3e}" for p in self.params
        ]
        status = "PASS" if self.passed else "FAIL"
        lines.append(f"{status} max_rel_err={self.max_rel_error:.3e} tol={self.tol:.1e} excluded={self.excluded}")
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    abs_floor: float = 1e-6,
    max_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` with central differences.

    ``f`` must rebuild the graph on every call.  Relative error per element is
    ``|a - n| / max(|a|, |n|, abs_floor)``.  Elements whose one-sided
    differences disagree (the perturbation crossed a kink: pooling tie,
    ReLU at zero) are excluded and counted.  With ``max_per_param`` only a
    seeded random subset of each tensor is probed.
    """
    named = dict(params) if isinstance(params, dict) else {f"p{i}": p for i, p in enumerate(params)}
    for p in named.values():
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires double precision parameters")
        p.zero_grad()
    root = f()
    backward(root)
    f0 = root.item()
    analytic = {k: p.grad.copy() for k, p in named.items()}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, p in named.items():
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idxs = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
        a_flat = analytic[name].reshape(-1)
        worst, excluded = 0.0, 0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            d_plus, d_minus = (fp - f0) / h, (f0 - fm) / h
            num = (fp - fm) / (2 * h)
            kink = abs(d_plus - d_minus) > max(1e-2 * max(abs(d_plus), abs(d_minus)), 1e-2 * abs_floor + 50 * h)
            if kink:
                excluded += 1
                continue
            a = a_flat[i]
            rel = abs(a - num) / max(abs(a), abs(num), abs_floor)
            worst = max(worst, rel)
        report.params.append(ParamCheck(name, len(idxs) - excluded, excluded, worst))
    return report
