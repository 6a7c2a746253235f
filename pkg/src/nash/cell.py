"""The searched convolutional cell: a fixed quantized backbone group in
parallel with a small DAG of candidate operations.

A cell spanning a group of D conv layers has D+1 nodes (node 0 is the
cell input) and an edge for every ordered pair (i, j), i < j. The
backbone contributes one quantized conv per consecutive edge plus the
group's residual shortcuts; every DAG edge additionally carries one
sampled candidate op per step. Node j sums, in a fixed order, the
backbone term, the shortcut term when present, and the active candidate
branches of its incoming edges.

Each branch is bracketed by quantized activations: a ReLU quantizer at
entry (convolutions need a quantized input) and an identity or hardtanh
quantizer before the addition (the dataflow backend requires a
quantization step ahead of every add).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import InvalidArgumentError, InvalidStateError
from .quant import (BitWidthPlan, QuantSpec, RELU_ACT, IDENTITY_ACT, WEIGHT,
                    act_quant, quantize_weight)
from .tensor import Tensor, add, channel_replicate, conv2d, maxpool2d, scale_by

Edge = tuple[int, int]


class OpKind(IntEnum):
    ZERO = 0
    MAXPOOL3 = 1
    IDENTITY = 2
    CONV1 = 3
    CONV3 = 4
    CONV5 = 5


ALL_OPS = (OpKind.ZERO, OpKind.MAXPOOL3, OpKind.IDENTITY,
           OpKind.CONV1, OpKind.CONV3, OpKind.CONV5)
NO_MAXPOOL_OPS = tuple(op for op in ALL_OPS if op is not OpKind.MAXPOOL3)

_CONV_KSIZE = {OpKind.CONV1: 1, OpKind.CONV3: 3, OpKind.CONV5: 5}


@dataclass(frozen=True)
class GroupSpec:
    """Channel/stride description of one backbone convolutional group.

    ``layers`` holds (out_channels, stride) per conv; blocks of two convs
    carry a residual shortcut from block input to block output, with a
    strided 1x1 conv on the shortcut when the block changes shape.
    """

    in_channels: int
    layers: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgumentError("group must have at least one conv layer")
        for ch, st in self.layers:
            if ch < 1:
                raise InvalidArgumentError("channel counts must be positive")
            if st not in (1, 2):
                raise InvalidArgumentError(f"stride must be 1 or 2, got {st}")

    @property
    def depth(self) -> int:
        return len(self.layers)

    def to_json(self) -> dict:
        return {"in_channels": self.in_channels,
                "layers": [list(l) for l in self.layers]}

    @staticmethod
    def from_json(d: dict) -> "GroupSpec":
        return GroupSpec(d["in_channels"], tuple(tuple(l) for l in d["layers"]))


def standard_group(in_channels: int, out_channels: int, stride: int,
                   blocks: int = 2) -> GroupSpec:
    """A plain residual group: ``blocks`` blocks of two 3x3 convs, the
    first conv carrying the group's stride."""
    layers = []
    for b in range(blocks):
        layers.append((out_channels, stride if b == 0 else 1))
        layers.append((out_channels, 1))
    return GroupSpec(in_channels, tuple(layers))


@dataclass(frozen=True)
class EdgeInfo:
    src: int
    dst: int
    in_channels: int
    out_channels: int
    stride: int

    @property
    def shape_changing(self) -> bool:
        return self.in_channels != self.out_channels or self.stride != 1


# ---------------------------------------------------------------------------
# branches: weight-carrying building blocks shared by search and final models


def _he_init(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class ConvBranch:
    """act1 -> quantized KxK conv -> act2."""

    def __init__(self, rng, in_ch, out_ch, k, stride, wbits, abits,
                 act_range=2.0, act2_kind=IDENTITY_ACT, act1=True):
        self.w = Tensor(_he_init(rng, (out_ch, in_ch, k, k)), requires_grad=True)
        self.k = k
        self.stride = stride
        self.padding = k // 2
        self.wspec = QuantSpec(wbits, True, WEIGHT)
        self.act1 = QuantSpec(abits, False, RELU_ACT, act_range) if act1 else None
        self.act2 = QuantSpec(abits, True, act2_kind, act_range)

    def forward(self, x: Tensor, tape) -> Tensor:
        if self.act1 is not None:
            x = act_quant(x, self.act1, tape)
        qw = quantize_weight(self.w, self.wspec, tape)
        y = conv2d(x, qw, self.stride, self.padding, tape)
        return act_quant(y, self.act2, tape)

    def params(self):
        return [self.w]


class PoolBranch:
    """act1 -> 3x3 max pool -> channel replication if needed -> act2."""

    def __init__(self, edge: EdgeInfo, abits, act_range=2.0,
                 act2_kind=IDENTITY_ACT):
        self.stride = edge.stride
        self.in_channels = edge.in_channels
        self.out_channels = edge.out_channels
        self.act1 = QuantSpec(abits, False, RELU_ACT, act_range)
        self.act2 = QuantSpec(abits, True, act2_kind, act_range)

    def forward(self, x: Tensor, tape) -> Tensor:
        x = act_quant(x, self.act1, tape)
        y = maxpool2d(x, 3, self.stride, 1, tape)
        if self.out_channels != self.in_channels:
            y = channel_replicate(y, self.out_channels, tape)
        return act_quant(y, self.act2, tape)

    def params(self):
        return []


class IdentityBranch:
    """act1 -> act2; only valid on shape-preserving edges."""

    def __init__(self, abits, act_range=2.0, act2_kind=IDENTITY_ACT):
        self.act1 = QuantSpec(abits, False, RELU_ACT, act_range)
        self.act2 = QuantSpec(abits, True, act2_kind, act_range)

    def forward(self, x: Tensor, tape) -> Tensor:
        return act_quant(act_quant(x, self.act1, tape), self.act2, tape)

    def params(self):
        return []


class ShortcutBranch:
    """Residual shortcut: identity when shapes match, otherwise a strided
    1x1 conv. Runs at the residual bit widths."""

    def __init__(self, rng, edge: EdgeInfo, plan: BitWidthPlan,
                 act_range=2.0, act2_kind=IDENTITY_ACT):
        self.edge = edge
        self.act2 = QuantSpec(plan.residual_a, True, act2_kind, act_range)
        if edge.shape_changing:
            self.conv = ConvBranch(rng, edge.in_channels, edge.out_channels, 1,
                                   edge.stride, plan.residual_w, plan.residual_a,
                                   act_range, act2_kind)
        else:
            self.conv = None

    def forward(self, x: Tensor, tape) -> Tensor:
        if self.conv is not None:
            return self.conv.forward(x, tape)
        return act_quant(x, self.act2, tape)

    def params(self):
        return self.conv.params() if self.conv is not None else []


def make_nas_branch(op: OpKind, edge: EdgeInfo, plan: BitWidthPlan, rng,
                    act_range=2.0, act2_kind=IDENTITY_ACT):
    """Branch for a candidate op on a DAG edge (None for Zero)."""
    if op is OpKind.ZERO:
        return None
    if op is OpKind.MAXPOOL3:
        return PoolBranch(edge, plan.nas_a, act_range, act2_kind)
    if op is OpKind.IDENTITY:
        if edge.shape_changing:
            raise InvalidArgumentError("identity cannot change tensor shape")
        return IdentityBranch(plan.nas_a, act_range, act2_kind)
    k = _CONV_KSIZE[op]
    return ConvBranch(rng, edge.in_channels, edge.out_channels, k, edge.stride,
                      plan.nas_w, plan.nas_a, act_range, act2_kind)


# ---------------------------------------------------------------------------
# the cell


@dataclass
class CellGraph:
    group: GroupSpec
    plan: BitWidthPlan
    nodes: int
    edges: dict[Edge, EdgeInfo]
    candidates: dict[Edge, tuple[OpKind, ...]]
    alpha: dict[Edge, np.ndarray]
    alpha_grad: dict[Edge, np.ndarray]
    backbone: list[ConvBranch]
    shortcuts: dict[Edge, ShortcutBranch]
    nas_branches: dict[Edge, dict[OpKind, object]]

    def weight_params(self) -> list[Tensor]:
        out = []
        for b in self.backbone:
            out.extend(b.params())
        for s in self.shortcuts.values():
            out.extend(s.params())
        for branches in self.nas_branches.values():
            for br in branches.values():
                if br is not None:
                    out.extend(br.params())
        return out

    def edge_probs(self, edge: Edge) -> np.ndarray:
        return softmax(self.alpha[edge])

    def zero_alpha_grads(self) -> None:
        for g in self.alpha_grad.values():
            g[:] = 0.0


def softmax(a: np.ndarray) -> np.ndarray:
    z = a - a.max()
    e = np.exp(z)
    return e / e.sum()


def node_shapes(group: GroupSpec) -> list[tuple[int, int]]:
    """(channels, cumulative stride) per node."""
    shapes = [(group.in_channels, 1)]
    for ch, st in group.layers:
        c_prev, s_prev = shapes[-1]
        shapes.append((ch, s_prev * st))
    return shapes


def edge_info(group: GroupSpec, i: int, j: int) -> EdgeInfo:
    shapes = node_shapes(group)
    ci, si = shapes[i]
    cj, sj = shapes[j]
    if sj % si != 0:
        raise InvalidStateError("non-integer stride across edge")
    return EdgeInfo(i, j, ci, cj, sj // si)


def shortcut_edges(group: GroupSpec) -> list[Edge]:
    """Residual edges of the backbone: one per block of two convs."""
    out = []
    j = 0
    while j + 2 <= group.depth:
        out.append((j, j + 2))
        j += 2
    return out


def build_cell(group: GroupSpec, plan: BitWidthPlan, rng: np.random.Generator,
               ops: tuple[OpKind, ...] = ALL_OPS,
               op_mask: dict[Edge, tuple[OpKind, ...]] | None = None,
               mask_shape_changing_maxpool: bool = False,
               include_zero: bool = True,
               act_range: float = 2.0,
               act2_kind: str = IDENTITY_ACT) -> CellGraph:
    """Assemble a cell over ``group``: backbone convs with shortcuts plus
    the full DAG of candidate ops, with architecture logits at zero
    (uniform sampling).

    Identity is dropped from shape-changing edges automatically;
    ``mask_shape_changing_maxpool`` additionally drops the pool op there
    (the search variant that forbids it up front).
    """
    n = group.depth + 1
    edges: dict[Edge, EdgeInfo] = {}
    candidates: dict[Edge, tuple[OpKind, ...]] = {}
    for i in range(n):
        for j in range(i + 1, n):
            info = edge_info(group, i, j)
            edges[(i, j)] = info
            cands = [op for op in ops]
            if not include_zero:
                cands = [op for op in cands if op is not OpKind.ZERO]
            if info.shape_changing:
                cands = [op for op in cands if op is not OpKind.IDENTITY]
                if mask_shape_changing_maxpool:
                    cands = [op for op in cands if op is not OpKind.MAXPOOL3]
            if op_mask and (i, j) in op_mask:
                allowed = set(op_mask[(i, j)])
                cands = [op for op in cands if op in allowed]
            if not cands:
                raise InvalidArgumentError(f"edge ({i},{j}) has no candidate ops")
            candidates[(i, j)] = tuple(cands)

    backbone = []
    for idx, (ch, st) in enumerate(group.layers):
        info = edges[(idx, idx + 1)]
        backbone.append(ConvBranch(rng, info.in_channels, ch, 3, st,
                                   plan.backbone_w, plan.backbone_a,
                                   act_range, act2_kind))
    shortcuts = {}
    for e in shortcut_edges(group):
        shortcuts[e] = ShortcutBranch(rng, edges[e], plan, act_range, act2_kind)

    nas_branches = {}
    for e, cands in candidates.items():
        nas_branches[e] = {op: make_nas_branch(op, edges[e], plan, rng,
                                               act_range, act2_kind)
                           for op in cands}

    alpha = {e: np.zeros(len(c), dtype=np.float64) for e, c in candidates.items()}
    alpha_grad = {e: np.zeros_like(a) for e, a in alpha.items()}
    return CellGraph(group, plan, n, edges, candidates, alpha, alpha_grad,
                     backbone, shortcuts, nas_branches)


PathChoice = dict[Edge, OpKind]


def sample_path(cell: CellGraph, rng: np.random.Generator) -> PathChoice:
    """Draw one candidate per edge with probability softmax(alpha)."""
    path: PathChoice = {}
    for e in sorted(cell.candidates):
        p = cell.edge_probs(e)
        if not np.all(np.isfinite(p)):
            raise InvalidStateError(f"alpha on edge {e} is not finite")
        idx = int(rng.choice(len(p), p=p))
        path[e] = cell.candidates[e][idx]
    return path


class OpCounter:
    """Counts branch activations per (edge, op) and per forward pass."""

    def __init__(self):
        self.per_edge_op: dict[tuple[Edge, OpKind], int] = {}
        self.per_step: list[dict[Edge, int]] = []

    def begin_step(self):
        self.per_step.append({})

    def hit(self, edge: Edge, op: OpKind):
        self.per_edge_op[(edge, op)] = self.per_edge_op.get((edge, op), 0) + 1
        if self.per_step:
            step = self.per_step[-1]
            step[edge] = step.get(edge, 0) + 1


def cell_forward(cell: CellGraph, path: PathChoice, x: Tensor, tape,
                 gates: dict[Edge, Tensor] | None = None,
                 counter: OpCounter | None = None) -> Tensor:
    """One pass through the cell under a sampled path.

    Node j accumulates, in order: the backbone conv from j-1, the
    residual shortcut if one ends at j, then the active candidate of each
    incoming edge by ascending source node. Only sampled branches are
    evaluated, so peak memory does not depend on the candidate count.

    When ``gates`` is supplied, each non-zero branch output is routed
    through a scalar gate tensor so the backward pass deposits
    d(loss)/d(gate); alpha gradients are derived from those afterwards.
    """
    if counter is not None:
        counter.begin_step()
    values = [x]
    for j in range(1, cell.nodes):
        terms: list[Tensor] = [cell.backbone[j - 1].forward(values[j - 1], tape)]
        for e in sorted(cell.shortcuts):
            if e[1] == j:
                terms.append(cell.shortcuts[e].forward(values[e[0]], tape))
        for i in range(j):
            e = (i, j)
            op = path[e]
            if op not in cell.candidates[e]:
                raise InvalidArgumentError(f"op {op.name} not allowed on edge {e}")
            if counter is not None:
                counter.hit(e, op)
            if op is OpKind.ZERO:
                continue
            out = cell.nas_branches[e][op].forward(values[i], tape)
            if gates is not None:
                gate = Tensor(np.ones((), dtype=np.float32), requires_grad=True)
                out = scale_by(out, gate, tape)
                gates[e] = gate
            terms.append(out)
        acc = terms[0]
        for t in terms[1:]:
            acc = add(acc, t, tape)
        values.append(acc)
    return values[-1]


def update_alpha_gradients(cell: CellGraph, path: PathChoice,
                           gates: dict[Edge, Tensor]) -> None:
    """Turn gate gradients into alpha gradients.

    The hard sample is treated as a straight-through draw from
    softmax(alpha): with u = d(loss)/d(gate_s) for sampled index s,
    d(loss)/d(alpha_m) = u * p_s * (1[m == s] - p_m). Unsampled ops
    receive gradient only through that softmax coupling; a zero branch
    contributes u = 0.
    """
    for e, cands in cell.candidates.items():
        gate = gates.get(e)
        u = 0.0 if gate is None or gate.grad is None else float(gate.grad)
        if u == 0.0:
            continue
        p = cell.edge_probs(e)
        s = cands.index(path[e])
        coup = -u * p[s] * p
        coup[s] += u * p[s]
        cell.alpha_grad[e] += coup


@dataclass
class DerivedCell:
    """Discretized cell: one (predecessor, op) pick per node past the
    input node, alongside the group it decorates."""

    group: GroupSpec
    picks: dict[int, tuple[int, OpKind]]
    variant: str = "basic"

    def to_json(self) -> dict:
        return {
            "group": self.group.to_json(),
            "nodes": [{"node": j, "pred": i, "op": op.name}
                      for j, (i, op) in sorted(self.picks.items())],
            "variant": self.variant,
        }

    @staticmethod
    def from_json(d: dict) -> "DerivedCell":
        picks = {e["node"]: (e["pred"], OpKind[e["op"]]) for e in d["nodes"]}
        return DerivedCell(GroupSpec.from_json(d["group"]), picks,
                           d.get("variant", "basic"))


def derive_architecture(cell: CellGraph) -> DerivedCell:
    """Keep, for every node past the input, the incoming (edge, op) pair
    with the largest softmax mass, never selecting Zero. Exact ties break
    toward the lower (source node, op index)."""
    picks: dict[int, tuple[int, OpKind]] = {}
    for j in range(1, cell.nodes):
        best = None
        for i in range(j):
            e = (i, j)
            p = cell.edge_probs(e)
            for idx, op in enumerate(cell.candidates[e]):
                if op is OpKind.ZERO:
                    continue
                key = (-p[idx], i, int(op))
                if best is None or key < best[0]:
                    best = (key, i, op)
        if best is None:
            raise InvalidStateError(f"node {j} has only Zero candidates")
        picks[j] = (best[1], best[2])
    return DerivedCell(cell.group, picks)
