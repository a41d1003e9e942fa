"""Magnitude-based filter pruning, candidate generation, and budget schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn


class BudgetInfeasible(RuntimeError):
    """No candidate (or no schedule) can meet the requested MAC budget."""


@dataclass(frozen=True)
class Candidate:
    candidate_id: int
    pruned_layer_index: int
    arch: nn.Architecture
    params: nn.Parameters
    macs: int
    parent_macs: int
    filters_removed: int = 0


def filter_norms(params: nn.Parameters, layer_index: int) -> list[tuple[int, float]]:
    """(filter_index, l2 norm) pairs, smallest norm first; ties keep index order."""
    w = params.weights[layer_index]
    if w is None:
        raise ValueError(f"layer {layer_index} has no filters to rank")
    norms = np.sqrt((w.astype(np.float64) ** 2).reshape(-1, w.shape[-1]).sum(axis=0))
    order = np.argsort(norms, kind="stable")
    return [(int(i), float(norms[i])) for i in order]


def remove_filters(arch: nn.Architecture, params: nn.Parameters, layer_index: int, removed) -> tuple[nn.Architecture, nn.Parameters]:
    """Drop filters of one layer and the matching input slices of its successor."""
    layer = arch.layers[layer_index]
    if not layer.trainable:
        raise ValueError(f"layer {layer_index} ({layer.kind}) is not prunable")
    removed = sorted(set(int(i) for i in removed))
    keep = np.setdiff1d(np.arange(layer.filters), removed)
    if keep.size < 1:
        raise ValueError("cannot remove every filter of a layer")
    new_arch = arch.with_layer(layer_index, layer.with_filters(int(keep.size)))
    weights = list(params.weights)
    biases = list(params.biases)
    weights[layer_index] = params.weights[layer_index][..., keep].copy()
    biases[layer_index] = params.biases[layer_index][keep].copy()

    succ = arch.successor(layer_index)
    if succ is not None:
        w = params.weights[succ]
        if arch.layers[succ].kind == "conv2d":
            weights[succ] = w[:, :, keep, :].copy()
        else:
            # dense successor: flattened NHWC features, channel is the fastest axis
            fan = arch.input_of(succ)
            channels = arch.shapes[layer_index][-1] if len(fan) == 1 and len(arch.shapes[layer_index]) == 3 else None
            if channels is None:
                weights[succ] = w[keep, :].copy()
            else:
                spatial = fan[0] // channels
                rows = (np.arange(spatial)[:, None] * channels + keep[None, :]).ravel()
                weights[succ] = w[rows, :].copy()
    new_params = nn.Parameters(tuple(weights), tuple(biases))
    nn.check_params(new_arch, new_params)
    return new_arch, new_params


def _macs_with_filters(arch: nn.Architecture, layer_index: int, filters: int) -> int:
    return nn.macs(arch.with_layer(layer_index, arch.layers[layer_index].with_filters(filters)))


def prune_layer_to_budget(arch: nn.Architecture, params: nn.Parameters, layer_index: int, budget: float,
                          candidate_id: int = 0) -> Candidate | None:
    """Remove the fewest smallest-norm filters of one layer to meet ``budget``.

    Returns ``None`` when the layer is the classifier or cannot reach the
    budget while keeping at least one filter.
    """
    if not 0 <= layer_index < len(arch.layers):
        raise IndexError(f"layer index {layer_index} out of range")
    if not arch.layers[layer_index].trainable:
        raise ValueError(f"layer {layer_index} ({arch.layers[layer_index].kind}) is not prunable")
    parent = nn.macs(arch)
    if parent <= budget:
        return Candidate(candidate_id, layer_index, arch, params, parent, parent, 0)
    if layer_index not in arch.prunable_indices:
        return None
    filters = arch.layers[layer_index].filters
    # macs is affine in the filter count of one layer, so a linear scan is exact
    for removed in range(1, filters):
        if _macs_with_filters(arch, layer_index, filters - removed) <= budget:
            break
    else:
        return None
    drop = [i for i, _ in filter_norms(params, layer_index)[:removed]]
    new_arch, new_params = remove_filters(arch, params, layer_index, drop)
    return Candidate(candidate_id, layer_index, new_arch, new_params, nn.macs(new_arch), parent, removed)


def generate_candidates(arch: nn.Architecture, params: nn.Parameters, budget: float) -> list[Candidate]:
    """One candidate per prunable layer that can meet ``budget``."""
    out = []
    for layer_index in arch.prunable_indices:
        cand = prune_layer_to_budget(arch, params, layer_index, budget, candidate_id=len(out))
        if cand is not None:
            out.append(cand)
    if not out:
        raise BudgetInfeasible(f"no single-layer pruning of a {nn.macs(arch)}-MAC model meets budget {budget:.0f}")
    return out


def width_multiplier(arch: nn.Architecture, factor: float) -> nn.Architecture:
    """Scale every conv/dense layer except the classifier by ``factor``."""
    if not 0 < factor <= 1:
        raise ValueError(f"width factor must lie in (0, 1], got {factor}")
    out = arch
    for i in arch.prunable_indices:
        layer = arch.layers[i]
        filters = max(1, int(round(layer.filters * factor)))
        out = out.with_layer(i, layer.with_filters(filters))
    return out


def factor_for_macs(arch: nn.Architecture, target: float, tol: float = 1e-4) -> float:
    """Largest width factor whose model fits in ``target`` MACs."""
    if nn.macs(width_multiplier(arch, 1.0)) <= target:
        return 1.0
    lo, hi = 1e-3, 1.0
    if nn.macs(width_multiplier(arch, lo)) > target:
        raise BudgetInfeasible(f"no width factor reaches {target:.0f} MACs")
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if nn.macs(width_multiplier(arch, mid)) <= target:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class BudgetSchedule:
    r0: float
    delta0: float
    decay: float
    final_budget: float
    budgets: tuple[float, ...]

    @property
    def T(self) -> int:
        return len(self.budgets)


def budget_schedule(r0: float, delta0: float, decay: float, final_budget: float) -> BudgetSchedule:
    """Geometrically shrinking reductions ``delta0 * decay**(t-1)`` until the final budget."""
    if not 0 < decay <= 1:
        raise ValueError("decay must lie in (0, 1]")
    if not 0 < delta0 < r0:
        raise ValueError("delta0 must lie in (0, R0)")
    need = r0 - final_budget
    if need <= 0:
        return BudgetSchedule(r0, delta0, decay, final_budget, ())
    if decay == 1:
        steps = math.ceil(need / delta0 - 1e-12)
    elif delta0 / (1 - decay) <= need:
        raise BudgetInfeasible(
            f"reductions sum to at most {delta0 / (1 - decay):.6g}, short of the required {need:.6g}")
    else:
        steps = None
    budgets = []
    r, delta = r0, delta0
    while True:
        r = r - delta
        budgets.append(r)
        delta *= decay
        if r <= final_budget or (steps is not None and len(budgets) >= steps):
            break
    return BudgetSchedule(r0, delta0, decay, final_budget, tuple(budgets))
