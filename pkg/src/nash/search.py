"""Bilevel architecture search and the four discretization variants for
shape-changing max pooling.

Each step alternates two sampled forward passes: a validation batch
updates only the architecture logits, then a training batch updates only
the model weights. The variant rules differ in when the problematic
pooling op is removed: after derivation (replace with a 1x1 conv),
before search (masked from shape-changing edges), at derivation (reject
and fall back to the next-ranked candidate), or globally (dropped from
the op list, with 8-bit branch weights instead of 1-bit).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .cell import (ALL_OPS, NO_MAXPOOL_OPS, CellGraph, DerivedCell, OpKind,
                   derive_architecture, edge_info, update_alpha_gradients)
from .data import Dataset
from .errors import InvalidArgumentError, InvalidStateError, NumericAbortError
from .network import ModelSpec, SearchNetwork
from .quant import resolve_plan
from .tensor import SGD, Tape, Tensor, softmax_cross_entropy

VARIANTS = ("v1", "v2", "v3", "v4")


@dataclass(frozen=True)
class SearchConfig:
    epochs: int
    batches_per_epoch: int
    batch_size: int
    lr_w: float
    lr_alpha: float
    seed: int
    variant: str
    split_frac: float = 0.5
    momentum: float = 0.9
    include_zero: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batches_per_epoch < 1:
            raise InvalidArgumentError("epochs and batches_per_epoch must be >= 1")
        if not 0.0 < self.split_frac < 1.0:
            raise InvalidArgumentError("split fraction must lie in (0, 1)")
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(f"unknown variant {self.variant!r}")


@dataclass
class SearchResult:
    derived: list[DerivedCell]
    alpha_history: list[dict[str, list[float]]]
    val_losses: list[float]
    audit_log: list[dict]
    variant: str
    seed: int

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "variant": self.variant,
            "seed": self.seed,
            "cells": [d.to_json() for d in self.derived],
            "val_losses": [float(v) for v in self.val_losses],
            "alpha_history": self.alpha_history,
            "audit_log": self.audit_log,
        }

    @staticmethod
    def from_json(d: dict) -> "SearchResult":
        return SearchResult([DerivedCell.from_json(c) for c in d["cells"]],
                            d["alpha_history"], d["val_losses"],
                            d["audit_log"], d["variant"], d["seed"])


def split_dataset(d: Dataset, frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint, exhaustive, seeded-shuffle split; first part gets
    round(frac * N) samples."""
    if len(d) < 2:
        raise InvalidArgumentError("need at least two samples to split")
    n_first = int(round(len(d) * frac))
    if n_first == 0 or n_first == len(d):
        raise InvalidArgumentError("split leaves one side empty")
    perm = np.random.default_rng(seed).permutation(len(d))
    return d.subset(perm[:n_first]), d.subset(perm[n_first:])


def _sample_batch(d: Dataset, batch_size: int, rng: np.random.Generator):
    idx = rng.choice(len(d), size=min(batch_size, len(d)), replace=False)
    return d.images[idx], d.labels[idx]


def _check_finite(loss: float, phase: str, step: int) -> None:
    if not np.isfinite(loss):
        raise NumericAbortError(
            f"non-finite loss {loss} during {phase} at step {step}; "
            "lower the learning rates or inspect the input data")


def search_step(net: SearchNetwork, opt: SGD, lr_alpha: float,
                val_batch, train_batch, rng: np.random.Generator,
                step: int = 0) -> tuple[float, float]:
    """One alternating update: alpha from the validation batch with
    weights frozen, then weights from the training batch with alpha
    frozen."""
    vx, vy = val_batch
    paths = net.sample(rng)
    gates = [dict() for _ in net.cells]
    tape = Tape()
    logits = net.forward(tape.leaf(vx), tape, paths, gates)
    val_loss = softmax_cross_entropy(logits, vy, tape)
    tape.backward(val_loss)
    _check_finite(val_loss.item(), "alpha update", step)
    for cell, path, g in zip(net.cells, paths, gates):
        update_alpha_gradients(cell, path, g)
        if lr_alpha != 0.0:
            for e in cell.alpha:
                cell.alpha[e] -= lr_alpha * cell.alpha_grad[e]
        cell.zero_alpha_grads()
    net.zero_weight_grads()  # weights stay frozen in this phase

    tx, ty = train_batch
    paths = net.sample(rng)
    tape = Tape()
    logits = net.forward(tape.leaf(tx), tape, paths)
    train_loss = softmax_cross_entropy(logits, ty, tape)
    tape.backward(train_loss)
    _check_finite(train_loss.item(), "weight update", step)
    opt.step()
    return val_loss.item(), train_loss.item()


# ---------------------------------------------------------------------------
# variant rules


def variant_v1(derived: DerivedCell, audit: list | None = None,
               cell_index: int = 0) -> DerivedCell:
    """After search: swap every pooling pick on a shape-changing edge for
    a 1x1 conv with the edge's stride and channels. Shape-preserving
    pooling picks stay."""
    picks = {}
    for j, (i, op) in derived.picks.items():
        info = edge_info(derived.group, i, j)
        if op is OpKind.MAXPOOL3 and info.shape_changing:
            picks[j] = (i, OpKind.CONV1)
            if audit is not None:
                audit.append({"variant": "v1", "cell": cell_index, "node": j,
                              "edge": [i, j],
                              "action": "replace_maxpool_with_conv1"})
        else:
            picks[j] = (i, op)
    return DerivedCell(derived.group, picks, "v1")


def variant_v2_mask(cell: CellGraph, audit: list | None = None,
                    cell_index: int = 0) -> CellGraph:
    """Before search: remove the pooling op from the candidate list of
    every shape-changing edge, along with its logit and branch."""
    for e, cands in cell.candidates.items():
        if OpKind.MAXPOOL3 in cands and cell.edges[e].shape_changing:
            keep = [k for k, op in enumerate(cands) if op is not OpKind.MAXPOOL3]
            cell.candidates[e] = tuple(cands[k] for k in keep)
            cell.alpha[e] = cell.alpha[e][keep]
            cell.alpha_grad[e] = cell.alpha_grad[e][keep]
            cell.nas_branches[e].pop(OpKind.MAXPOOL3, None)
            if audit is not None:
                audit.append({"variant": "v2", "cell": cell_index,
                              "edge": list(e),
                              "action": "mask_maxpool_on_shape_changing_edge"})
    return cell


def variant_v3_reject(cell: CellGraph, audit: list | None = None,
                      cell_index: int = 0) -> DerivedCell:
    """At derivation: rank every (edge, op) candidate of a node by
    softmax mass and take the best one that is not Zero and not a
    shape-changing pooling op, logging each rejection."""
    picks: dict[int, tuple[int, OpKind]] = {}
    for j in range(1, cell.nodes):
        ranked = []
        for i in range(j):
            e = (i, j)
            p = cell.edge_probs(e)
            for idx, op in enumerate(cell.candidates[e]):
                ranked.append((-p[idx], i, int(op), op))
        ranked.sort(key=lambda r: r[:3])
        chosen = None
        for _, i, _, op in ranked:
            if op is OpKind.ZERO:
                continue
            if op is OpKind.MAXPOOL3 and cell.edges[(i, j)].shape_changing:
                if audit is not None:
                    audit.append({"variant": "v3", "cell": cell_index,
                                  "node": j, "edge": [i, j],
                                  "action": "reject_shape_changing_maxpool"})
                continue
            chosen = (i, op)
            break
        if chosen is None:
            raise InvalidStateError(f"node {j}: no acceptable candidate")
        picks[j] = chosen
    return DerivedCell(cell.group, picks, "v3")


def variant_v4_ops() -> tuple[OpKind, ...]:
    """Global op list without the pooling op."""
    return NO_MAXPOOL_OPS


# ---------------------------------------------------------------------------
# the search loop


def run_search(cfg: SearchConfig, d: Dataset, spec: ModelSpec) -> SearchResult:
    """Alternating search over epochs x batches, then the variant rule."""
    ss = np.random.SeedSequence(cfg.seed)
    split_seed, init_seed, loop_seed = [int(s.generate_state(1)[0])
                                        for s in ss.spawn(3)]
    plan = resolve_plan(cfg.variant, _plan_bits(cfg))
    rng_init = np.random.default_rng(init_seed)
    ops = variant_v4_ops() if cfg.variant == "v4" else ALL_OPS
    net = SearchNetwork(spec, plan, rng_init, ops=ops,
                        include_zero=cfg.include_zero)
    audit: list[dict] = []
    if cfg.variant == "v2":
        for ci, cell in enumerate(net.cells):
            variant_v2_mask(cell, audit, ci)

    train, val = split_dataset(d, 1.0 - cfg.split_frac, split_seed)
    rng = np.random.default_rng(loop_seed)
    opt = SGD(net.weight_params(), cfg.lr_w, cfg.momentum)

    val_losses: list[float] = []
    alpha_history: list[dict[str, list[float]]] = []
    step = 0
    for _epoch in range(cfg.epochs):
        epoch_val = []
        for _batch in range(cfg.batches_per_epoch):
            vb = _sample_batch(val, cfg.batch_size, rng)
            tb = _sample_batch(train, cfg.batch_size, rng)
            vl, _tl = search_step(net, opt, cfg.lr_alpha, vb, tb, rng, step)
            epoch_val.append(vl)
            step += 1
        val_losses.append(float(np.mean(epoch_val)))
        alpha_history.append({k: [float(x) for x in v]
                              for k, v in net.alpha_state().items()})

    derived = []
    for ci, cell in enumerate(net.cells):
        if cfg.variant == "v3":
            dc = variant_v3_reject(cell, audit, ci)
        else:
            dc = derive_architecture(cell)
            if cfg.variant == "v1":
                dc = variant_v1(dc, audit, ci)
            else:
                dc = DerivedCell(dc.group, dc.picks, cfg.variant)
        derived.append(dc)
    return SearchResult(derived, alpha_history, val_losses, audit,
                        cfg.variant, cfg.seed)


def _plan_bits(cfg: SearchConfig) -> tuple[int, int]:
    # the search supernet trains at the target widths; callers that want
    # different search/train widths run resolve_plan themselves
    return getattr(cfg, "wbits", 1), getattr(cfg, "abits", 1)
