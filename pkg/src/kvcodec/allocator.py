"""Bit allocation over ordered principal components.

The dynamic program walks components left to right. ``best_error[i, b]`` is
the smallest squared error reachable when the first ``i`` components are
covered by contiguous blocks (allowed sizes x element types) spending at most
``b`` bits per token, with everything not covered left at zero. Entries start
at the all-zero error ``||P||_F^2``; a block ending at ``i`` improves on the
table row ``i - size`` by its ``error_change`` (quantization error minus the
energy the block had when zeroed).

Every error value is produced by ``quant.block_error_change`` and summed in
the same left-to-right order, so the DP optimum, the brute-force optimum and
``plan_error`` agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InstanceTooLarge, InvalidInput
from .linalg import as_matrix
from .quant import ElementType, bit_cost_per_token, block_error_change

DEFAULT_GROUP_SIZES = (1, 16, 64, 256, 1024)
DEFAULT_TYPES = (ElementType.NONE, ElementType.INT2, ElementType.INT4, ElementType.FP8_E4M3)
DEFAULT_SAMPLE_CAP = 32768
# guards the (r+1) x (budget+1) tables
MAX_TABLE_CELLS = 200_000_000


@dataclass(frozen=True)
class DpConfig:
    group_sizes: tuple[int, ...] = DEFAULT_GROUP_SIZES
    types: tuple[ElementType, ...] = DEFAULT_TYPES
    max_budget_bits: int | None = None
    sample_cap: int = DEFAULT_SAMPLE_CAP

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.group_sizes)
        if not sizes or any(s <= 0 for s in sizes) or list(sizes) != sorted(set(sizes)):
            raise InvalidInput(f"group sizes must be positive, unique and ascending: {sizes}")
        types = tuple(ElementType(t) for t in self.types)
        if ElementType.NONE not in types:
            raise InvalidInput("NONE must be an allowed type")
        # canonical order doubles as the tie-break order
        object.__setattr__(self, "group_sizes", sizes)
        object.__setattr__(self, "types", tuple(sorted(set(types))))
        if self.sample_cap < 1:
            raise InvalidInput("sample_cap must be positive")


@dataclass(frozen=True)
class AllocationPlan:
    """Ordered groups over the leading components; the rest decode to zero.

    ``groups`` may contain NONE spans (skipped components) between quantized
    groups; trailing NONE spans are dropped.
    """

    groups: tuple[tuple[int, ElementType], ...]
    components: int
    expected_error: float = math.nan
    budget_bits: int = 0
    artifact_fingerprint: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        merged: list[tuple[int, ElementType]] = []
        for size, et in self.groups:
            size, et = int(size), ElementType(et)
            if size <= 0:
                raise InvalidInput("group sizes must be positive")
            if merged and et is ElementType.NONE and merged[-1][1] is ElementType.NONE:
                merged[-1] = (merged[-1][0] + size, et)
            else:
                merged.append((size, et))
        while merged and merged[-1][1] is ElementType.NONE:
            merged.pop()
        object.__setattr__(self, "groups", tuple(merged))
        if self.covered_components > self.components:
            raise InvalidInput(
                f"plan covers {self.covered_components} components but rank is {self.components}"
            )

    @property
    def covered_components(self) -> int:
        return sum(size for size, _ in self.groups)

    @property
    def bits_per_token(self) -> int:
        return sum(bit_cost_per_token(size, et) for size, et in self.groups)

    def spans(self):
        """Yield (start, size, etype) for every group, NONE included."""
        start = 0
        for size, et in self.groups:
            yield start, size, et
            start += size

    def with_fingerprint(self, fingerprint: int) -> "AllocationPlan":
        return AllocationPlan(
            self.groups, self.components, self.expected_error, self.budget_bits, fingerprint, dict(self.meta)
        )

    def component_bits(self) -> np.ndarray:
        """Payload bits assigned to each of the ``components`` coordinates."""
        bits = np.zeros(self.components, dtype=np.int64)
        for start, size, et in self.spans():
            bits[start : start + size] = et.payload_bits
        return bits


@dataclass
class DpTables:
    best_error: np.ndarray
    best_type: np.ndarray
    best_block: np.ndarray
    best_cost: np.ndarray
    initial_error: float

    @property
    def components(self) -> int:
        return self.best_error.shape[0] - 1

    @property
    def max_budget(self) -> int:
        return self.best_error.shape[1] - 1


def budget_from_ratio(feature_count: int, target_cr: float, feature_bits: int = 16) -> int:
    if not target_cr > 0:
        raise InvalidInput(f"target compression ratio must be positive, got {target_cr}")
    return int(math.floor(feature_count * feature_bits / target_cr))


def _prepare(projected, sample_cap: int) -> np.ndarray:
    p = as_matrix(projected, "projected calibration")
    if p.shape[0] < 1:
        raise InvalidInput("empty calibration matrix")
    return np.ascontiguousarray(p[:sample_cap])


def _initial_error(p: np.ndarray) -> float:
    return float((p * p).sum())


def _candidates(p: np.ndarray, i: int, config: DpConfig, max_budget: int):
    """(cost, size, type, error_change) for blocks ending at component i, tie-break sorted."""
    out = []
    for size in config.group_sizes:
        if size > i:
            break
        block = p[:, i - size : i]
        for et in config.types:
            cost = bit_cost_per_token(size, et)
            if cost > max_budget:
                continue
            out.append((cost, size, int(et), block_error_change(block, et)))
    out.sort(key=lambda c: (c[0], c[1], c[2]))
    return out


def build_tables(projected, max_budget: int, config: DpConfig = DpConfig()) -> DpTables:
    """Fill the DP tables for every budget in ``0..max_budget``."""
    if max_budget < 0:
        raise InvalidInput(f"bit budget must be non-negative, got {max_budget}")
    p = _prepare(projected, config.sample_cap)
    r = p.shape[1]
    width = max_budget + 1
    if (r + 1) * width > MAX_TABLE_CELLS:
        raise InstanceTooLarge(f"DP table {(r + 1)} x {width} exceeds {MAX_TABLE_CELLS} cells")
    initial = _initial_error(p)
    best = np.full((r + 1, width), initial)
    btype = np.zeros((r + 1, width), dtype=np.int8)
    bblock = np.zeros((r + 1, width), dtype=np.int32)
    bcost = np.zeros((r + 1, width), dtype=np.int32)
    budgets = np.arange(width)

    for i in range(1, r + 1):
        fresh = np.full(width, np.inf)
        f_type = np.zeros(width, dtype=np.int8)
        f_block = np.zeros(width, dtype=np.int32)
        f_cost = np.zeros(width, dtype=np.int32)
        for cost, size, et, change in _candidates(p, i, config, max_budget):
            lo = max(cost, 1)
            seg = change + best[i - size, lo - cost : width - cost]
            better = seg < fresh[lo:]
            if not better.any():
                continue
            idx = np.nonzero(better)[0] + lo
            fresh[idx] = seg[better]
            f_type[idx] = et
            f_block[idx] = size
            f_cost[idx] = cost
        valid = fresh < initial
        valid[0] = False
        vals = np.where(valid, fresh, initial)
        prefix = np.minimum.accumulate(vals)
        improves = np.empty(width, dtype=bool)
        improves[0] = True
        improves[1:] = vals[1:] < prefix[:-1]
        src = np.maximum.accumulate(np.where(improves, budgets, 0))
        best[i] = prefix
        keep = valid[src]
        btype[i] = np.where(keep, f_type[src], 0)
        bblock[i] = np.where(keep, f_block[src], 0)
        bcost[i] = np.where(keep, f_cost[src], 0)
    return DpTables(best, btype, bblock, bcost, initial)


def extract_plan(tables: DpTables, budget: int) -> AllocationPlan:
    """Walk backpointers from ``(r, budget)``; ties resolve toward fewer bits."""
    if budget < 0:
        raise InvalidInput(f"bit budget must be non-negative, got {budget}")
    b = min(budget, tables.max_budget)
    i = tables.components
    target = tables.best_error[i, b]
    rev: list[tuple[int, ElementType]] = []
    while i > 0 and b > 0:
        row = tables.best_error[i]
        # earliest budget in the constant run ending at b
        b = int(np.argmax(row[: b + 1] == row[b]))
        size = int(tables.best_block[i, b])
        if size == 0:
            break
        rev.append((size, ElementType(int(tables.best_type[i, b]))))
        b -= int(tables.best_cost[i, b])
        i -= size
    if i > 0:
        rev.append((i, ElementType.NONE))
    groups = tuple(reversed(rev))
    return AllocationPlan(groups, tables.components, float(target), budget)


def dp_allocate(
    projected_calibration,
    target_cr: float,
    feature_bits: int = 16,
    config: DpConfig = DpConfig(),
    feature_count: int | None = None,
) -> AllocationPlan:
    """Optimal plan for the per-token budget ``floor(p * feature_bits / target_cr)``.

    ``feature_count`` is the original (pre-truncation) feature count ``p``;
    it defaults to the number of projected columns.
    """
    p = as_matrix(projected_calibration, "projected calibration")
    if feature_count is None:
        feature_count = p.shape[1]
    budget = budget_from_ratio(feature_count, target_cr, feature_bits)
    return allocate_budget(p, budget, config)


def useful_budget(components: int, config: DpConfig) -> int:
    """Budgets above this cannot buy anything more."""
    top = max(bit_cost_per_token(1, et) for et in config.types)
    return components * top


def allocate_budget(projected, budget: int, config: DpConfig = DpConfig()) -> AllocationPlan:
    if budget < 0:
        raise InvalidInput(f"bit budget must be non-negative, got {budget}")
    if config.max_budget_bits is not None:
        budget = min(budget, config.max_budget_bits)
    p = as_matrix(projected, "projected calibration")
    cap = min(budget, useful_budget(p.shape[1], config))
    tables = build_tables(p, cap, config)
    plan = extract_plan(tables, cap)
    return AllocationPlan(plan.groups, plan.components, plan.expected_error, budget)


def allocate_many(projected, budgets, config: DpConfig = DpConfig()) -> list[AllocationPlan]:
    """Plans for several budgets from a single table build."""
    budgets = [int(b) for b in budgets]
    if any(b < 0 for b in budgets):
        raise InvalidInput("bit budgets must be non-negative")
    p = as_matrix(projected, "projected calibration")
    cap = min(max(budgets, default=0), useful_budget(p.shape[1], config))
    tables = build_tables(p, cap, config)
    plans = []
    for b in budgets:
        plan = extract_plan(tables, min(b, cap))
        plans.append(AllocationPlan(plan.groups, plan.components, plan.expected_error, b))
    return plans


def plan_error(projected, plan: AllocationPlan, sample_cap: int | None = None) -> float:
    """Squared Frobenius error of ``plan`` on ``projected``, in the decorrelated domain."""
    p = as_matrix(projected, "projected")
    if p.shape[1] < plan.covered_components:
        raise InvalidInput(f"projected has {p.shape[1]} columns, plan covers {plan.covered_components}")
    if sample_cap is not None:
        p = p[:sample_cap]
    p = np.ascontiguousarray(p)
    total = _initial_error(p)
    for start, size, et in plan.spans():
        if et is not ElementType.NONE:
            total = block_error_change(p[:, start : start + size], et) + total
    return float(total)


BRUTE_FORCE_MAX_COMPONENTS = 10
BRUTE_FORCE_MAX_BUDGET = 256


def brute_force_allocate(projected, budget: int, config: DpConfig = DpConfig()) -> AllocationPlan:
    """Exhaustive search over the DP's feasible set; exponential, tiny instances only.

    Feasible plans are: a leading run of zeroed components, then back-to-back
    blocks (any allowed size and type, NONE included) ending at the last
    component, spending at most ``budget`` bits per token.
    """
    p = _prepare(projected, config.sample_cap)
    r = p.shape[1]
    if budget < 0:
        raise InvalidInput("bit budget must be non-negative")
    if r > BRUTE_FORCE_MAX_COMPONENTS or budget > BRUTE_FORCE_MAX_BUDGET:
        raise InstanceTooLarge(f"brute force limited to r<={BRUTE_FORCE_MAX_COMPONENTS}, budget<={BRUTE_FORCE_MAX_BUDGET}")
    initial = _initial_error(p)
    change = {}
    for start in range(r):
        for size in config.group_sizes:
            if start + size > r:
                break
            for et in config.types:
                change[start, size, et] = block_error_change(p[:, start : start + size], et)

    best_total = initial
    best_groups: tuple = ((r, ElementType.NONE),) if r else ()
    best_bits = 0

    def walk(pos, left, total, groups, bits):
        nonlocal best_total, best_groups, best_bits
        if pos == r:
            if total < best_total or (total == best_total and bits < best_bits):
                best_total, best_groups, best_bits = total, tuple(groups), bits
            return
        for size in config.group_sizes:
            if pos + size > r:
                break
            for et in config.types:
                cost = bit_cost_per_token(size, et)
                if cost > left:
                    continue
                groups.append((size, et))
                walk(pos + size, left - cost, change[pos, size, et] + total, groups, bits + cost)
                groups.pop()

    for lead in range(r):
        walk(lead, budget, initial, [(lead, ElementType.NONE)] if lead else [], 0)
    return AllocationPlan(best_groups, r, float(best_total), budget)


def pca_only_plan(projected, budget: int, feature_bits: int = 16) -> AllocationPlan:
    """Truncation baseline: keep the leading components raw, drop the rest."""
    if budget < 0:
        raise InvalidInput("bit budget must be non-negative")
    p = as_matrix(projected, "projected")
    keep = min(p.shape[1], budget // feature_bits)
    groups = ((keep, ElementType.FP16),) if keep else ()
    plan = AllocationPlan(groups, p.shape[1], math.nan, budget)
    return AllocationPlan(plan.groups, plan.components, plan_error(p, plan), budget)
