"""Full classifier networks built around searched cells.

Layout mirrors a small residual net: an 8-bit stem conv, one cell per
convolutional group, then a quantized head (ReLU quantizer, global
average pool, 8-bit linear). The same scaffold serves three roles:
the supernet during search, the discretized model for final training,
and the backbone-only baseline (no candidate branches at all).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cell import (CellGraph, ConvBranch, DerivedCell, GroupSpec, OpCounter,
                   OpKind, PathChoice, ShortcutBranch, _he_init, build_cell,
                   cell_forward, make_nas_branch, shortcut_edges)
from .errors import InvalidArgumentError
from .quant import (BitWidthPlan, QuantSpec, RELU_ACT, IDENTITY_ACT, WEIGHT,
                    act_quant, quantize_weight)
from .tensor import Tape, Tensor, add, conv2d, global_avg_pool, linear


@dataclass(frozen=True)
class ModelSpec:
    """Global network shape: stem width, per-group specs, class count."""

    in_channels: int
    stem_channels: int
    groups: tuple[GroupSpec, ...]
    classes: int
    act_range: float = 2.0
    act2_kind: str = IDENTITY_ACT

    def to_json(self) -> dict:
        return {"in_channels": self.in_channels,
                "stem_channels": self.stem_channels,
                "groups": [g.to_json() for g in self.groups],
                "classes": self.classes,
                "act_range": self.act_range,
                "act2_kind": self.act2_kind}

    @staticmethod
    def from_json(d: dict) -> "ModelSpec":
        return ModelSpec(d["in_channels"], d["stem_channels"],
                         tuple(GroupSpec.from_json(g) for g in d["groups"]),
                         d["classes"], d.get("act_range", 2.0),
                         d.get("act2_kind", IDENTITY_ACT))


class Stem:
    """8-bit 3x3 conv on the raw input; no activation quantizer in front
    because the input is already a bounded image."""

    def __init__(self, rng, in_ch, out_ch):
        self.w = Tensor(_he_init(rng, (out_ch, in_ch, 3, 3)), requires_grad=True)
        self.wspec = QuantSpec(8, True, WEIGHT)

    def forward(self, x: Tensor, tape) -> Tensor:
        qw = quantize_weight(self.w, self.wspec, tape)
        return conv2d(x, qw, 1, 1, tape)


class Head:
    """ReLU quantizer -> global average pool -> 8-bit linear."""

    def __init__(self, rng, channels, classes, act_range=2.0):
        self.act = QuantSpec(8, False, RELU_ACT, act_range)
        self.w = Tensor(_he_init(rng, (classes, channels)), requires_grad=True)
        self.wspec = QuantSpec(8, True, WEIGHT)

    def forward(self, x: Tensor, tape) -> Tensor:
        x = act_quant(x, self.act, tape)
        x = global_avg_pool(x, tape)
        qw = quantize_weight(self.w, self.wspec, tape)
        return linear(x, qw, tape)


class FixedCell:
    """A cell after discretization: backbone convs, residual shortcuts,
    and at most one chosen branch per node. ``picks=None`` gives the
    backbone-only baseline group."""

    def __init__(self, group: GroupSpec, plan: BitWidthPlan,
                 picks: dict[int, tuple[int, OpKind]] | None,
                 rng: np.random.Generator, act_range=2.0,
                 act2_kind=IDENTITY_ACT, donor: CellGraph | None = None):
        from .cell import edge_info  # shared shape bookkeeping

        self.group = group
        self.plan = plan
        self.picks = dict(picks) if picks else {}
        self.nodes = group.depth + 1
        if donor is not None:
            self.backbone = donor.backbone
            self.shortcuts = donor.shortcuts
            self.branches = {j: donor.nas_branches[(i, j)][op]
                             for j, (i, op) in self.picks.items()}
        else:
            self.backbone = [
                ConvBranch(rng, edge_info(group, i, i + 1).in_channels, ch, 3, st,
                           plan.backbone_w, plan.backbone_a, act_range, act2_kind)
                for i, (ch, st) in enumerate(group.layers)]
            self.shortcuts = {
                e: ShortcutBranch(rng, edge_info(group, *e), plan, act_range,
                                  act2_kind)
                for e in shortcut_edges(group)}
            self.branches = {}
            for j, (i, op) in self.picks.items():
                info = edge_info(group, i, j)
                self.branches[j] = make_nas_branch(op, info, plan, rng,
                                                   act_range, act2_kind)

    def forward(self, x: Tensor, tape) -> Tensor:
        values = [x]
        for j in range(1, self.nodes):
            terms = [self.backbone[j - 1].forward(values[j - 1], tape)]
            for e in sorted(self.shortcuts):
                if e[1] == j:
                    terms.append(self.shortcuts[e].forward(values[e[0]], tape))
            if j in self.picks:
                i, op = self.picks[j]
                if op is not OpKind.ZERO:
                    terms.append(self.branches[j].forward(values[i], tape))
            acc = terms[0]
            for t in terms[1:]:
                acc = add(acc, t, tape)
            values.append(acc)
        return values[-1]

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for li, b in enumerate(self.backbone):
            out[f"{prefix}.backbone{li}.w"] = b.w
        for (i, j), s in sorted(self.shortcuts.items()):
            if s.conv is not None:
                out[f"{prefix}.shortcut{i}_{j}.w"] = s.conv.w
        for j, br in sorted(self.branches.items()):
            if isinstance(br, ConvBranch):
                out[f"{prefix}.node{j}.w"] = br.w
        return out


class FinalNetwork:
    """Stem + fixed cells + head; the trainable inference-time model."""

    def __init__(self, spec: ModelSpec, plan: BitWidthPlan,
                 derived: list[DerivedCell] | None,
                 rng: np.random.Generator,
                 donors: list[CellGraph] | None = None):
        if derived is not None and len(derived) != len(spec.groups):
            raise InvalidArgumentError("one derived cell per group is required")
        self.spec = spec
        self.plan = plan
        self.stem = Stem(rng, spec.in_channels, spec.stem_channels)
        self.cells = []
        for gi, group in enumerate(spec.groups):
            picks = derived[gi].picks if derived is not None else None
            donor = donors[gi] if donors is not None else None
            self.cells.append(FixedCell(group, plan, picks, rng, spec.act_range,
                                        spec.act2_kind, donor))
        last_ch = spec.groups[-1].layers[-1][0]
        self.head = Head(rng, last_ch, spec.classes, spec.act_range)

    def forward(self, x: Tensor, tape: Tape | None) -> Tensor:
        y = self.stem.forward(x, tape)
        for cell in self.cells:
            y = cell.forward(y, tape)
        return self.head.forward(y, tape)

    def logits(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(batch), None).data

    def named_params(self) -> dict[str, Tensor]:
        out = {"stem.w": self.stem.w, "head.w": self.head.w}
        for ci, cell in enumerate(self.cells):
            out.update(cell.named_params(f"cell{ci}"))
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in sorted(self.named_params().items())]

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()


class SearchNetwork:
    """Supernet: stem + one CellGraph per group + head. Weight parameters
    cover every candidate branch; architecture logits live on the cells."""

    def __init__(self, spec: ModelSpec, plan: BitWidthPlan,
                 rng: np.random.Generator, ops=None,
                 mask_shape_changing_maxpool: bool = False,
                 include_zero: bool = True):
        from .cell import ALL_OPS

        self.spec = spec
        self.plan = plan
        self.stem = Stem(rng, spec.in_channels, spec.stem_channels)
        self.cells = [build_cell(g, plan, rng,
                                 ops=ops if ops is not None else ALL_OPS,
                                 mask_shape_changing_maxpool=mask_shape_changing_maxpool,
                                 include_zero=include_zero,
                                 act_range=spec.act_range,
                                 act2_kind=spec.act2_kind)
                      for g in spec.groups]
        last_ch = spec.groups[-1].layers[-1][0]
        self.head = Head(rng, last_ch, spec.classes, spec.act_range)

    def sample(self, rng: np.random.Generator) -> list[PathChoice]:
        from .cell import sample_path
        return [sample_path(c, rng) for c in self.cells]

    def forward(self, x: Tensor, tape, paths: list[PathChoice],
                gates: list[dict] | None = None,
                counter: OpCounter | None = None) -> Tensor:
        y = self.stem.forward(x, tape)
        for ci, cell in enumerate(self.cells):
            g = gates[ci] if gates is not None else None
            y = cell_forward(cell, paths[ci], y, tape, g, counter)
        return self.head.forward(y, tape)

    def weight_params(self) -> list[Tensor]:
        out = [self.stem.w, self.head.w]
        for c in self.cells:
            out.extend(c.weight_params())
        return out

    def zero_weight_grads(self) -> None:
        for p in self.weight_params():
            p.zero_grad()

    def alpha_state(self) -> dict[str, np.ndarray]:
        out = {}
        for ci, cell in enumerate(self.cells):
            for e, a in sorted(cell.alpha.items()):
                out[f"cell{ci}.edge{e[0]}_{e[1]}"] = a
        return out
