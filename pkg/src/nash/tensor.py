"""Dense tensors with reverse-mode automatic differentiation.

Small CNN training is the target workload: NCHW feature maps, direct
(non-im2col) convolution, max pooling, exact-shape elementwise add, a
linear classifier head, and softmax cross-entropy. Gradients are
recorded on an explicit Tape so there is no global mutable state; a
Tape plus the Tensors it touches form one single-threaded unit.

Computation defaults to float32. float64 is accepted (the finite
difference checker uses it) but training code sticks to float32.
"""

from __future__ import annotations

import json
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError


class Tensor:
    """A dense n-dimensional array that can participate in a gradient tape.

    ``grad`` accumulates additively: two backward passes without zeroing
    double it. ``tape`` is set on tensors produced by recorded primitives
    (and on leaves created through ``Tape.leaf``); plain parameter leaves
    keep ``tape=None`` and pick up gradients from whichever tape recorded
    an operation that consumed them.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, tape: "Tape | None" = None,
                 dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise InvalidArgumentError(
                f"grad shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Entry:
    """One recorded primitive: inputs, output, and its backward rule.

    ``backward(out_grad)`` returns one gradient array (or None) per input,
    in input order.
    """

    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor,
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Replaying entries in reverse recording order propagates gradients to
    every requires_grad leaf that contributed to the seeded output.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def leaf(self, data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
        return Tensor(data, requires_grad=requires_grad, tape=self, dtype=dtype)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        output.tape = self
        self.entries.append(_Entry(inputs, output, backward))

    def reset(self) -> None:
        self.entries.clear()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into each requires_grad leaf's .grad."""
        if loss.data.size != 1:
            raise InvalidArgumentError("backward seed must be a scalar tensor")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(e.output) for e in self.entries}
        for entry in reversed(self.entries):
            out_g = grads.pop(id(entry.output), None)
            if out_g is None:
                continue
            in_grads = entry.backward(out_g)
            for t, g in zip(entry.inputs, in_grads):
                if g is None:
                    continue
                if id(t) in produced:
                    acc = grads.get(id(t))
                    grads[id(t)] = g if acc is None else acc + g
                elif t.requires_grad:
                    t.accumulate_grad(g)
                # non-leaf tensors produced outside this tape, and leaves
                # without requires_grad, receive nothing


def _find_tape(tape: Tape | None, *tensors: Tensor) -> Tape | None:
    if tape is not None:
        return tape
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def _emit(tape: Tape | None, inputs: tuple[Tensor, ...], out_data: np.ndarray,
          backward) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    t = _find_tape(tape, *inputs)
    if t is not None:
        t.record(inputs, out, backward)
    return out


# ---------------------------------------------------------------------------
# primitives


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           tape: Tape | None = None) -> Tensor:
    """Direct 2-D cross-correlation, NCHW input against MCKK weights.

    Vectorized over the batch and channels but still the direct algorithm:
    one multiply-accumulate per kernel tap. Differentiable w.r.t. both
    input and weight.
    """
    if stride <= 0:
        raise InvalidArgumentError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise InvalidArgumentError(f"padding must be nonnegative, got {padding}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise InvalidArgumentError("conv2d expects 4-d input and weight")
    n, c, h, wd = x.data.shape
    m, cw, kh, kw = w.data.shape
    if cw != c:
        raise InvalidArgumentError(f"channel mismatch: input has {c}, weight has {cw}")
    if kh != kw or kh % 2 == 0:
        raise InvalidArgumentError(f"kernel must be square with odd extent, got {kh}x{kw}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise InvalidArgumentError(
            f"kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, m, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            out += np.einsum("nchw,mc->nmhw", patch, w.data[:, :, i, j],
                             optimize=True)

    def backward(g):
        gx = gw = None
        if x.requires_grad or x.tape is not None:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        np.einsum("nmhw,mc->nchw", g, w.data[:, :, i, j], optimize=True)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        if w.requires_grad or w.tape is not None:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
                    gw[:, :, i, j] = np.einsum("nmhw,nchw->mc", g, patch, optimize=True)
        return gx, gw

    return _emit(tape, (x, w), out, backward)


def maxpool2d(x: Tensor, k: int = 3, stride: int = 1, padding: int = 1,
              tape: Tape | None = None) -> Tensor:
    """Per-window maximum with -inf padding, so constants pool to themselves.

    Backward routes gradient to the argmax, first occurrence in row-major
    scan order of the window on ties.
    """
    if stride <= 0:
        raise InvalidArgumentError(f"stride must be positive, got {stride}")
    if x.data.ndim != 4:
        raise InvalidArgumentError("maxpool2d expects a 4-d input")
    n, c, h, w = x.data.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise InvalidArgumentError(f"pool window {k} does not fit padded input")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    best = np.full((n, c, oh, ow), -np.inf, dtype=x.data.dtype)
    arg = np.zeros((n, c, oh, ow), dtype=np.int64)  # flat window offset i*k+j
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            better = patch > best  # strict: earlier offsets win ties
            best = np.where(better, patch, best)
            arg = np.where(better, i * k + j, arg)

    def backward(g):
        if not (x.requires_grad or x.tape is not None):
            return (None,)
        gxp = np.zeros_like(xp)
        oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        rows = oy * stride + arg // k   # (n,c,oh,ow) via broadcast
        cols = ox * stride + arg % k
        nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(gxp, (nn[:, :, None, None], cc[:, :, None, None], rows, cols), g)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return _emit(tape, (x,), best, backward)


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise sum of identically shaped tensors (no broadcasting)."""
    if a.data.shape != b.data.shape:
        raise InvalidArgumentError(
            f"add requires identical shapes, got {a.data.shape} and {b.data.shape}")

    def backward(g):
        return g, g

    return _emit(tape, (a, b), a.data + b.data, backward)


def scale_by(x: Tensor, gate: Tensor, tape: Tape | None = None) -> Tensor:
    """Multiply a tensor by a scalar gate tensor.

    Used to attach architecture-parameter gradients to a sampled branch:
    the gate carries d(loss)/d(gate) = <upstream grad, branch output>.
    """
    if gate.data.size != 1:
        raise InvalidArgumentError("gate must be a scalar tensor")

    def backward(g):
        gx = g * gate.data.reshape(())
        gg = np.array(np.sum(g * x.data), dtype=gate.data.dtype).reshape(gate.data.shape)
        return gx, gg

    return _emit(tape, (x, gate), x.data * gate.data.reshape(()), backward)


def channel_replicate(x: Tensor, out_channels: int, tape: Tape | None = None) -> Tensor:
    """Tile a feature map along channels and truncate to out_channels.

    Channel-only stand-in for a concatenate layer: lets a pooling branch,
    which cannot change channel count by itself, feed an edge whose output
    is wider than its input.
    """
    if x.data.ndim != 4:
        raise InvalidArgumentError("channel_replicate expects a 4-d input")
    n, c, h, w = x.data.shape
    if out_channels < 1:
        raise InvalidArgumentError("out_channels must be positive")
    reps = -(-out_channels // c)
    out = np.tile(x.data, (1, reps, 1, 1))[:, :out_channels]

    def backward(g):
        padded = np.zeros((n, reps * c, h, w), dtype=g.dtype)
        padded[:, :out_channels] = g
        return (padded.reshape(n, reps, c, h, w).sum(axis=1).astype(x.data.dtype),)

    return _emit(tape, (x,), np.ascontiguousarray(out), backward)


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _emit(tape, (x,), np.where(mask, x.data, 0), backward)


def linear(x: Tensor, w: Tensor, tape: Tape | None = None) -> Tensor:
    """x[N,F] @ w[O,F].T -> [N,O]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise InvalidArgumentError(
            f"linear shapes incompatible: {x.data.shape} vs {w.data.shape}")

    def backward(g):
        gx = g @ w.data if (x.requires_grad or x.tape is not None) else None
        gw = g.T @ x.data if (w.requires_grad or w.tape is not None) else None
        return gx, gw

    return _emit(tape, (x, w), x.data @ w.data.T, backward)


def global_avg_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.data.ndim != 4:
        raise InvalidArgumentError("global_avg_pool expects a 4-d input")
    n, c, h, w = x.data.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).astype(
            x.data.dtype),)

    return _emit(tape, (x,), x.data.mean(axis=(2, 3)), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          tape: Tape | None = None) -> Tensor:
    """Mean cross-entropy over the batch; gradient is (softmax - onehot)/N."""
    if logits.data.ndim != 2:
        raise InvalidArgumentError("logits must be [N, classes]")
    labels = np.asarray(labels)
    n, o = logits.data.shape
    if labels.shape != (n,):
        raise InvalidArgumentError(f"labels must have shape ({n},)")
    if labels.min() < 0 or labels.max() >= o:
        raise InvalidArgumentError(f"label out of range [0, {o})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g.reshape(()) * p / n,)

    return _emit(tape, (logits,), np.asarray(loss, dtype=logits.data.dtype), backward)


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Reduce to a scalar; handy loss head for gradient checks."""

    def backward(g):
        return (np.broadcast_to(g.reshape(()), x.data.shape).astype(x.data.dtype),)

    return _emit(tape, (x,), np.asarray(x.data.sum(), dtype=x.data.dtype), backward)


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """SGD with classical momentum: v <- momentum*v + grad; p <- p - lr*v.

    step() zeroes the gradients it consumed.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        if lr < 0:
            raise InvalidArgumentError("learning rate must be nonnegative")
        if not 0.0 <= momentum < 1.0:
            raise InvalidArgumentError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= (self.lr * v).astype(p.data.dtype)
            p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float, momentum: float = 0.0,
             velocities: dict[int, np.ndarray] | None = None) -> None:
    """Single momentum-SGD update over a parameter set.

    Stateless convenience wrapper around the SGD rule; pass ``velocities``
    (keyed by id(param)) to carry momentum across calls.
    """
    for p in params:
        if p.grad is None:
            continue
        if velocities is None:
            v = p.grad
        else:
            v = velocities.setdefault(id(p), np.zeros_like(p.data))
            v *= momentum
            v += p.grad
        p.data -= (lr * v).astype(p.data.dtype)
        p.grad = None


# ---------------------------------------------------------------------------
# verification harness


def grad_check(f: Callable[[Tape, Tensor], Tensor], x: Tensor,
               h: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(tape, x)`` must build a scalar. Runs in float64 regardless of the
    input dtype so the difference quotient is not drowned by rounding.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True, dtype=np.float64)
    tape = Tape()
    loss = f(tape, x64)
    tape.backward(loss)
    analytic = x64.grad.copy()

    numeric = np.zeros_like(x64.data)
    flat = x64.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tape(), Tensor(x64.data, dtype=np.float64)).item()
        flat[i] = orig - h
        fm = f(Tape(), Tensor(x64.data, dtype=np.float64)).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# checkpoint io: one flat little-endian float32 blob + a JSON manifest


def save_checkpoint(named: dict[str, Tensor], directory: str) -> None:
    """Write tensors to weights.bin plus manifest.json {name, shape, offset}.

    Offsets are byte positions into the blob; values are little-endian
    float32 regardless of platform.
    """
    os.makedirs(directory, exist_ok=True)
    manifest = []
    offset = 0
    with open(os.path.join(directory, "weights.bin"), "wb") as fh:
        for name in sorted(named):
            t = named[name]
            raw = t.data.astype("<f4").tobytes()
            fh.write(raw)
            manifest.append({"name": name, "shape": list(t.data.shape),
                             "offset": offset})
            offset += len(raw)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump({"schema_version": 1, "tensors": manifest}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory: str) -> dict[str, np.ndarray]:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    blob = np.fromfile(os.path.join(directory, "weights.bin"), dtype="<f4")
    out = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"] // 4
        out[entry["name"]] = blob[start:start + count].reshape(shape).astype(np.float32)
    return out
