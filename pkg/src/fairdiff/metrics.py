"""Statistical parity, the fair boundary, amplification/reflection/mitigation
verdicts and per-group box statistics."""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, InputError

# Rates such as 0.46 are not exact in binary floating point; boundary and
# verdict comparisons absorb that representation error.
TOL = 1e-9


@dataclass(frozen=True)
class RateRecord:
    concept: str
    rate: float
    count: int

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise InputError(f"rate {self.rate} outside [0, 1]")
        if self.count < 1:
            raise InputError("rate record needs at least one sample")


@dataclass(frozen=True)
class FairBoundary:
    target: float = 0.5
    half_width: float = 0.04

    def __post_init__(self):
        if not 0.0 <= self.target <= 1.0 or not 0.0 <= self.half_width <= 0.5:
            raise InputError(f"invalid boundary {self.target} +/- {self.half_width}")

    @property
    def low(self) -> float:
        return self.target - self.half_width

    @property
    def high(self) -> float:
        return self.target + self.half_width


class BiasVerdict(str, enum.Enum):
    AMPLIFIED = "Amplified"
    REFLECTED = "Reflected"
    MITIGATED = "Mitigated"

    def __str__(self):
        return self.value


def attribute_rate(labels: Iterable[int]) -> float:
    labels = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels)
    if labels.size == 0:
        raise InputError("attribute_rate of an empty label sequence")
    return float(np.count_nonzero(labels == 1) / labels.size)


def rate_record(concept: str, labels) -> RateRecord:
    labels = np.asarray(labels)
    return RateRecord(concept, attribute_rate(labels), int(labels.size))


def parity_gap(concepts: Sequence[str], attributes: Sequence[int], concept: str) -> float:
    """``|P(y=1 | a=1) - P(y=1 | a=0)|`` with ``y = [sample is of concept]``."""
    concepts = np.asarray(concepts, dtype=object)
    attributes = np.asarray(attributes)
    if concepts.shape != attributes.shape:
        raise InputError("concept and attribute sequences differ in length")
    y = concepts == concept
    rates = []
    for a in (1, 0):
        group = attributes == a
        if not group.any():
            raise DegenerateInputError(f"attribute group a={a} is empty")
        rates.append(np.count_nonzero(y & group) / np.count_nonzero(group))
    return float(abs(rates[0] - rates[1]))


def within_boundary(rate: float, b: FairBoundary = FairBoundary()) -> bool:
    """Inclusive: ``|rate - target| <= half_width``."""
    return abs(rate - b.target) <= b.half_width + TOL


def verdict(ref_rate: float, out_rate: float, b: FairBoundary = FairBoundary()) -> BiasVerdict:
    """Reflected when the outcome stays within +/- half_width of the reference;
    otherwise Amplified if it moved farther from the target, else Mitigated."""
    if abs(out_rate - ref_rate) <= b.half_width + TOL:
        return BiasVerdict.REFLECTED
    if abs(out_rate - b.target) > abs(ref_rate - b.target):
        return BiasVerdict.AMPLIFIED
    return BiasVerdict.MITIGATED


def group_split(records: Sequence[RateRecord]) -> tuple[list[RateRecord], list[RateRecord]]:
    """``(f, m)``: reference rate < 0.5 goes to m, otherwise f."""
    if not records:
        raise InputError("group_split needs at least one record")
    f = [r for r in records if not r.rate < 0.5]
    m = [r for r in records if r.rate < 0.5]
    return f, m


@dataclass(frozen=True)
class GroupStats:
    group: str
    members: tuple[str, ...]
    min: float
    q1: float
    median: float
    q3: float
    max: float
    lo_whisker: float
    hi_whisker: float

    def row(self) -> list:
        return [self.group, self.min, self.q1, self.median, self.q3, self.max,
                self.lo_whisker, self.hi_whisker]


def box_stats(rates: Sequence[float], group: str = "", members: Sequence[str] = ()) -> GroupStats:
    """Five-number summary (linear interpolation at position 1 + p(n-1)) and
    Tukey whiskers at the extreme points within 1.5 IQR of the quartiles.
    Whiskers never sit inside the box: an interpolated quartile can lie past
    every data point within the fence, in which case the whisker is the
    quartile itself."""
    x = np.sort(np.asarray(rates, dtype=float))
    if x.size == 0:
        raise InputError("box_stats needs at least one rate")
    q1, med, q3 = (float(v) for v in np.quantile(x, [0.25, 0.5, 0.75], method="linear"))
    iqr = q3 - q1
    lo = min(float(x[x >= q1 - 1.5 * iqr].min()), q1)
    hi = max(float(x[x <= q3 + 1.5 * iqr].max()), q3)
    return GroupStats(group, tuple(members), float(x[0]), q1, med, q3, float(x[-1]), lo, hi)


def group_box_stats(ref: Sequence[RateRecord], series: dict[str, dict[str, float]] | None = None
                    ) -> list[GroupStats]:
    """Box statistics per f/m group (split by the reference rates) for the
    reference and for every extra named series of per-concept rates."""
    f, m = group_split(ref)
    all_series = {"ref": {r.concept: r.rate for r in ref}}
    all_series.update(series or {})
    out = []
    for name, rates in all_series.items():
        for label, members in (("f", f), ("m", m)):
            names = [r.concept for r in members if r.concept in rates]
            if names:
                out.append(box_stats([rates[c] for c in names], f"{name}_{label}", names))
    return out


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def _num(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return "%.6f" % v


def box_stats_csv(stats: Sequence[GroupStats], header_lines: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for h in header_lines:
        buf.write(f"# {h}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "min", "q1", "median", "q3", "max", "lo_whisker", "hi_whisker"])
    for s in stats:
        w.writerow([s.group] + [_num(v) for v in s.row()[1:]])
    return buf.getvalue()


def box_stats_plotdata(stats: Sequence[GroupStats], header_lines: Sequence[str] = ()) -> str:
    """gnuplot ``candlesticks``-ready columns: index group min q1 median q3 max."""
    lines = [f"# {h}" for h in header_lines]
    lines.append("# index group lo_whisker q1 median q3 hi_whisker min max")
    for i, s in enumerate(stats):
        lines.append(" ".join([str(i), s.group] + [_num(v) for v in
                                                    (s.lo_whisker, s.q1, s.median, s.q3, s.hi_whisker, s.min, s.max)]))
    return "\n".join(lines) + "\n"
