"""Calibration statistics and per-layer channel plans.

Thresholds decide *how many* channels go to each precision (a channel fits a
group when its calibration max stays under that group's threshold), and the
channel-wise absolute mean decides *which* channels: channels are sorted by
ascending mean and the smallest ones go to MXFP4, then MXFP6, then MXFP8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from micromix.error_model import ThresholdSet, thresholds
from micromix.errors import DomainError, PlanMismatchError, ShapeError
from micromix.formats import BLOCK_SIZE
from micromix.mx import as_dense

GROUP_BITS = (4, 6, 8)


@dataclass(frozen=True, eq=False)
class CalibStats:
    """Running per-channel statistics for one linear layer's input."""

    layer_id: str
    num_channels: int
    num_samples: int = 0
    num_rows: int = 0
    channel_abs_mean: np.ndarray = field(default=None)
    channel_abs_max: np.ndarray = field(default=None)
    tensor_max: float = 0.0

    def __post_init__(self):
        zeros = np.zeros(self.num_channels, dtype=np.float64)
        if self.channel_abs_mean is None:
            object.__setattr__(self, "channel_abs_mean", zeros.copy())
        if self.channel_abs_max is None:
            object.__setattr__(self, "channel_abs_max", zeros.copy())

    @classmethod
    def empty(cls, layer_id: str, num_channels: int) -> CalibStats:
        return cls(layer_id, int(num_channels))


def accumulate(stats: CalibStats, sample) -> CalibStats:
    """Fold one activation sample (rows x channels) into the statistics."""
    x = as_dense(sample, name="calibration sample")
    if x.shape[1] != stats.num_channels:
        raise ShapeError(f"sample has {x.shape[1]} channels, layer {stats.layer_id!r} has {stats.num_channels}")
    a = np.abs(x.astype(np.float64))
    rows = x.shape[0]
    if rows == 0:
        return replace(stats, num_samples=stats.num_samples + 1)
    single = CalibStats(
        stats.layer_id,
        stats.num_channels,
        num_samples=1,
        num_rows=rows,
        channel_abs_mean=a.mean(axis=0),
        channel_abs_max=a.max(axis=0),
        tensor_max=float(a.max()),
    )
    return merge(stats, single)


def merge(a: CalibStats, b: CalibStats) -> CalibStats:
    """Combine two statistics; max fields exactly, means weighted by row count."""
    if a.layer_id != b.layer_id or a.num_channels != b.num_channels:
        raise PlanMismatchError("cannot merge statistics of different layers")
    rows = a.num_rows + b.num_rows
    if a.num_rows == 0 or b.num_rows == 0:
        # copying keeps the mean exact instead of re-rounding m * r / r
        mean = (b if a.num_rows == 0 else a).channel_abs_mean.copy()
    else:
        mean = (a.channel_abs_mean * a.num_rows + b.channel_abs_mean * b.num_rows) / rows
    return CalibStats(
        a.layer_id,
        a.num_channels,
        num_samples=a.num_samples + b.num_samples,
        num_rows=rows,
        channel_abs_mean=mean,
        channel_abs_max=np.maximum(a.channel_abs_max, b.channel_abs_max),
        tensor_max=max(a.tensor_max, b.tensor_max),
    )


def calibrate(layer_id: str, samples) -> CalibStats:
    samples = list(samples)
    if not samples:
        raise ValueError("calibration needs at least one sample")
    stats = CalibStats.empty(layer_id, np.shape(samples[0])[1])
    for s in samples:
        stats = accumulate(stats, s)
    return stats


def _check_usable(stats: CalibStats) -> None:
    if stats.num_samples < 1:
        raise DomainError(f"layer {stats.layer_id!r} has no calibration samples")
    if not stats.tensor_max > 0:
        raise DomainError(f"layer {stats.layer_id!r} saw only zeros; thresholds are undefined")


def estimate_proportions(stats: CalibStats) -> tuple[float, float, float]:
    """Fractions of channels whose calibration max fits under T(4), T(6), or neither."""
    _check_usable(stats)
    th = thresholds(stats.tensor_max)
    cmax = stats.channel_abs_max
    n = stats.num_channels
    n4 = int(np.count_nonzero(cmax <= th.t4))
    n6 = int(np.count_nonzero((cmax > th.t4) & (cmax <= th.t6)))
    p4, p6 = n4 / n, n6 / n
    return p4, p6, (n - n4 - n6) / n


def padded_count(num_channels: int) -> int:
    return -(-num_channels // BLOCK_SIZE) * BLOCK_SIZE


def _round_up32(x: float) -> int:
    return int(math.ceil(x / BLOCK_SIZE - 1e-12)) * BLOCK_SIZE


def group_counts(num_channels: int, proportions) -> tuple[int, int, int]:
    """Channel counts per precision, each a multiple of 32.

    FP8 is rounded up first, then FP6 (capped by what is left), and FP4 takes
    the remainder of the padded channel count.
    """
    p4, p6, p8 = proportions
    total = padded_count(num_channels)
    n8 = min(_round_up32(p8 * num_channels), total)
    n6 = min(_round_up32(p6 * num_channels), total - n8)
    return total - n8 - n6, n6, n8


@dataclass(frozen=True, eq=False)
class ChannelPlan:
    """Permutation and precision split for one layer.

    ``permutation[j]`` is the source channel placed at position ``j``; positions
    ``[0, n4)`` are MXFP4, ``[n4, n4+n6)`` MXFP6 and the rest MXFP8. It covers
    the padded channel count; indices ``>= num_channels`` are zero padding.
    """

    layer_id: str
    num_channels: int
    permutation: np.ndarray
    n4: int
    n6: int
    n8: int
    p4: float
    p6: float
    p8: float
    thresholds: ThresholdSet

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64)
        object.__setattr__(self, "permutation", perm)
        total = self.padded_channels
        if perm.shape != (total,) or not np.array_equal(np.sort(perm), np.arange(total)):
            raise ValueError("permutation must be a bijection on the padded channel range")
        counts = (self.n4, self.n6, self.n8)
        if any(c < 0 or c % BLOCK_SIZE for c in counts) or sum(counts) != total:
            raise ValueError(f"group counts {counts} must be multiples of 32 summing to {total}")

    @property
    def padded_channels(self) -> int:
        return padded_count(self.num_channels)

    @property
    def padding(self) -> int:
        return self.padded_channels - self.num_channels

    @property
    def counts(self) -> tuple[int, int, int]:
        return self.n4, self.n6, self.n8

    @property
    def proportions(self) -> tuple[float, float, float]:
        return self.p4, self.p6, self.p8

    def group_slices(self) -> tuple[slice, slice, slice]:
        a, b = self.n4, self.n4 + self.n6
        return slice(0, a), slice(a, b), slice(b, self.padded_channels)

    def inverse_permutation(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.permutation.size)
        return inv

    def group_of_channel(self) -> np.ndarray:
        """Bit-width assigned to each source channel (length ``num_channels``)."""
        bits = np.empty(self.padded_channels, dtype=np.int64)
        for b, sl in zip(GROUP_BITS, self.group_slices()):
            bits[self.permutation[sl]] = b
        return bits[: self.num_channels]

    def __eq__(self, other):
        if not isinstance(other, ChannelPlan):
            return NotImplemented
        return (
            self.layer_id == other.layer_id
            and self.num_channels == other.num_channels
            and np.array_equal(self.permutation, other.permutation)
            and self.counts == other.counts
            and self.proportions == other.proportions
            and self.thresholds == other.thresholds
        )

    __hash__ = None


def make_plan(layer_id: str, channel_abs_mean, proportions, th: ThresholdSet) -> ChannelPlan:
    """Order channels by ascending mean and split them by the given proportions.

    Zero-padding channels fill the tail of the lowest-precision non-empty
    group (FP4 unless it is empty); fewer than 32 pads always fit there.
    """
    mean = np.asarray(channel_abs_mean, dtype=np.float64)
    num_channels = mean.size
    n4, n6, n8 = group_counts(num_channels, proportions)
    total = n4 + n6 + n8
    order = np.lexsort((np.arange(num_channels), mean))  # ties by channel index
    first_end = next(c for c in np.cumsum((n4, n6, n8)) if c > 0)
    split = int(first_end) - (total - num_channels)
    perm = np.concatenate([order[:split], np.arange(num_channels, total), order[split:]])
    p4, p6, p8 = proportions
    return ChannelPlan(layer_id, num_channels, perm, n4, n6, n8, float(p4), float(p6), float(p8), th)


def build_plan(stats: CalibStats) -> ChannelPlan:
    proportions = estimate_proportions(stats)
    return make_plan(stats.layer_id, stats.channel_abs_mean, proportions, thresholds(stats.tensor_max))


def identity_plan(layer_id: str, num_channels: int, counts: tuple[int, int, int], tensor_max: float = 1.0) -> ChannelPlan:
    """Plan with channels in their natural order and explicit group counts."""
    total = padded_count(num_channels)
    if sum(counts) != total:
        raise ValueError(f"counts {counts} must sum to {total}")
    props = tuple(c / total for c in counts)
    return ChannelPlan(layer_id, num_channels, np.arange(total), *counts, *props, thresholds(tensor_max))


@dataclass
class LayerDiagnostics:
    layer_id: str
    violations: dict[int, int]  # bit-width -> channels whose max exceeds that group's threshold
    avg_bits: float
    counts: tuple[int, int, int]

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())


def plan_diagnostics(plan: ChannelPlan, stats: CalibStats) -> LayerDiagnostics:
    """Count channels the mean-based ordering put in a group their max does not fit."""
    from micromix.report import avg_bits

    if plan.layer_id != stats.layer_id or plan.num_channels != stats.num_channels:
        raise PlanMismatchError(f"plan {plan.layer_id!r} does not match statistics {stats.layer_id!r}")
    th = plan.thresholds
    groups = plan.group_of_channel()
    cmax = stats.channel_abs_max
    violations = {
        4: int(np.count_nonzero((groups == 4) & (cmax > th.t4))),
        6: int(np.count_nonzero((groups == 6) & (cmax > th.t6))),
        8: 0,
    }
    return LayerDiagnostics(plan.layer_id, violations, avg_bits(plan), plan.counts)


def diagnostics_report(layers) -> list[LayerDiagnostics]:
    """Diagnostics for an iterable of ``(plan, stats)`` pairs."""
    return [plan_diagnostics(plan, stats) for plan, stats in layers]
