"""Fair guidance: edit instructions, the prompt lookup table, per-sample
direction draws and the edit term added to the guided noise estimate.

Each generated sample flips a q-weighted coin. Heads steers with side 1 of the
instruction (e.g. toward "female person", away from "male person"); tails
uses side 2. Direction coins come from stream 1 of the seed, diffusion noise
from stream 0, so a fair run and a plain run with the same seed share their
noise exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .diffusion import EpsilonModel, sample
from .errors import InputError, ParseError, SpecificationError
from .numerics import Rng, RngBank
from .world import ATTRIBUTE_TOKENS

WILDCARD = "*"
MALE, FEMALE = ATTRIBUTE_TOKENS
DEFAULT_EDIT_SCALE = 2.0


@dataclass(frozen=True)
class EditConcept:
    concept: str
    scale: float = DEFAULT_EDIT_SCALE
    positive: bool = True

    def __post_init__(self):
        if not self.concept:
            raise SpecificationError("edit concept must be named")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise SpecificationError(f"edit scale must be finite and > 0, got {self.scale}")

    @property
    def sign(self) -> float:
        return 1.0 if self.positive else -1.0

    def flipped(self) -> "EditConcept":
        return EditConcept(self.concept, self.scale, not self.positive)

    def __str__(self):
        return f"{'+' if self.positive else '-'}{self.concept}:{self.scale!r}"


@dataclass(frozen=True)
class FairInstruction:
    side1: tuple[EditConcept, ...]
    side2: tuple[EditConcept, ...]
    q: float = 0.5
    warmup: int = 0
    mask: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "side1", tuple(self.side1))
        object.__setattr__(self, "side2", tuple(self.side2))
        if not self.side1 or not self.side2:
            raise SpecificationError("a fair instruction needs at least one edit on each side")
        if not 0.0 <= self.q <= 1.0:
            raise SpecificationError(f"guidance probability q must lie in [0, 1], got {self.q}")
        if self.warmup < 0:
            raise SpecificationError("warm-up steps must be >= 0")
        if not 0.0 < self.mask <= 1.0:
            raise SpecificationError("mask fraction must lie in (0, 1]")

    def side(self, which: int) -> tuple[EditConcept, ...]:
        return self.side1 if which == 1 else self.side2

    def concepts(self) -> set[str]:
        return {e.concept for e in self.side1 + self.side2}

    def with_q(self, q: float) -> "FairInstruction":
        return FairInstruction(self.side1, self.side2, q, self.warmup, self.mask)


def paired_instruction(scale: float = DEFAULT_EDIT_SCALE, q: float = 0.5, **kw) -> FairInstruction:
    """Toward one attribute and away from the other, mirrored on side 2."""
    return FairInstruction(
        (EditConcept(FEMALE, scale), EditConcept(MALE, scale, False)),
        (EditConcept(MALE, scale), EditConcept(FEMALE, scale, False)), q, **kw)


def positive_only_instruction(scale: float = DEFAULT_EDIT_SCALE, q: float = 0.5, **kw) -> FairInstruction:
    return FairInstruction((EditConcept(FEMALE, scale),), (EditConcept(MALE, scale),), q, **kw)


def shared_negative_instruction(scale: float = DEFAULT_EDIT_SCALE, q: float = 0.5, **kw) -> FairInstruction:
    """Both attributes negated on both sides, one reinstated positively."""
    neg = (EditConcept(MALE, scale / 2, False), EditConcept(FEMALE, scale / 2, False))
    return FairInstruction(neg + (EditConcept(FEMALE, scale),), neg + (EditConcept(MALE, scale),), q, **kw)


PRESETS = {
    "paired": paired_instruction,
    "positive-only": positive_only_instruction,
    "shared-negative": shared_negative_instruction,
}


@dataclass
class LookupTable:
    entries: list[tuple[str, FairInstruction]] = field(default_factory=list)

    def __post_init__(self):
        keys = [k for k, _ in self.entries]
        if len(set(keys)) != len(keys):
            raise SpecificationError("lookup table keys must be unique")

    def __len__(self):
        return len(self.entries)

    def resolve(self, concept: str) -> Optional[FairInstruction]:
        wildcard = None
        for key, instr in self.entries:
            if key == concept:
                return instr
            if key == WILDCARD:
                wildcard = instr
        return wildcard

    def with_q(self, q: float) -> "LookupTable":
        return LookupTable([(k, i.with_q(q)) for k, i in self.entries])


def resolve_instruction(concept: str, table: LookupTable | None) -> Optional[FairInstruction]:
    """Exact key first, then the wildcard, else ``None`` (plain generation)."""
    return table.resolve(concept) if table is not None else None


@dataclass(frozen=True)
class DirectionDraw:
    side: int
    u: float


def draw_direction(instr: FairInstruction, rng: Rng) -> DirectionDraw:
    """Side 1 iff ``u < q``; the tie ``u == q`` goes to side 2."""
    u = rng.uniform()
    return DirectionDraw(1 if u < instr.q else 2, u)


def direction_draws(instr: FairInstruction, seed: int, n: int) -> list[DirectionDraw]:
    """Per-sample draws; sample ``i`` uses ``Rng(seed, 1).split(i)``."""
    u = RngBank(Rng(seed, stream=1), n).uniform(1)[:, 0]
    return [DirectionDraw(1 if ui < instr.q else 2, float(ui)) for ui in u]


def _top_mask(diff: np.ndarray, frac: float) -> np.ndarray:
    d = diff.shape[-1]
    keep = math.ceil(frac * d)
    order = np.argsort(-np.abs(diff), axis=-1, kind="stable")
    mask = np.zeros_like(diff)
    np.put_along_axis(mask, order[..., :keep], 1.0, axis=-1)
    return mask


def in_warmup(t: int, T: int, warmup: int) -> bool:
    """Sampling step k = T - t counts from 0; the first ``warmup`` are skipped."""
    return T - t < warmup


def gamma(model: EpsilonModel, z_t, t: int, active_side: Sequence[EditConcept],
          instr: FairInstruction, eps_uncond: np.ndarray | None = None) -> np.ndarray:
    """Sum of signed, scaled (optionally magnitude-masked) differences
    ``eps(z_t, c_e) - eps(z_t)`` over the active side's edits."""
    z_t = np.asarray(z_t, dtype=float)
    model.schedule.check_t(t)
    for e in active_side:
        model.vocab[e.concept]
    out = np.zeros_like(z_t)
    if in_warmup(t, model.schedule.T, instr.warmup):
        return out
    e_u = model.eps(z_t, t, None) if eps_uncond is None else eps_uncond
    for e in active_side:
        diff = model.eps(z_t, t, e.concept) - e_u
        if instr.mask < 1.0:
            diff = diff * _top_mask(diff, instr.mask)
        out = out + e.sign * e.scale * diff
    return out


@dataclass
class FairSample:
    samples: np.ndarray
    draws: list[DirectionDraw]


def fair_sample(model: EpsilonModel, concept: str, s_g: float, n: int, seed: int,
                instr: FairInstruction | None) -> FairSample:
    """Sample with fair guidance; ``instr=None`` reduces to plain sampling."""
    if instr is None:
        return FairSample(sample(model, concept, s_g, n, seed), [])
    for c in instr.concepts():
        model.vocab[c]
    draws = direction_draws(instr, seed, n)
    side1 = np.array([d.side == 1 for d in draws])
    T = model.schedule.T

    def provider(z, t, _bank):
        if in_warmup(t, T, instr.warmup):
            return None
        g = np.zeros_like(z)
        for which, rows in ((1, side1), (2, ~side1)):
            if rows.any():
                g[rows] = gamma(model, z[rows], t, instr.side(which), instr)
        return g

    return FairSample(sample(model, concept, s_g, n, seed, provider), draws)


def generate(model: EpsilonModel, concept: str, s_g: float, n: int, seed: int,
             table: LookupTable | None = None) -> FairSample:
    return fair_sample(model, concept, s_g, n, seed, resolve_instruction(concept, table))


# ---------------------------------------------------------------------------
# lookup-table file
# ---------------------------------------------------------------------------
#
#   <key>\tq=<float>;warmup=<int>;mask=<float>;side1=+<c>:<s>[,-<c>:<s>...];side2=...
#
# '#' starts a comment line. sideK= for K > 2 is reserved and rejected.


def _parse_edits(text: str, line: int, col: int) -> tuple[EditConcept, ...]:
    edits = []
    pos = 0
    for item in text.split(","):
        icol = col + pos
        pos += len(item) + 1
        item_s = item.strip()
        if not item_s:
            raise ParseError("empty edit", line, icol)
        if item_s[0] not in "+-":
            raise ParseError(f"edit {item_s!r} must start with + or -", line, icol)
        name, sep, scale = item_s[1:].rpartition(":")
        if not sep:
            raise ParseError(f"edit {item_s!r} lacks ':<scale>'", line, icol)
        try:
            value = float(scale)
        except ValueError:
            raise ParseError(f"bad scale {scale!r}", line, icol) from None
        try:
            edits.append(EditConcept(name.strip(), value, item_s[0] == "+"))
        except SpecificationError as exc:
            raise ParseError(str(exc), line, icol) from None
    return tuple(edits)


def parse_table(text: str) -> LookupTable:
    entries = []
    seen = set()
    for n, raw in enumerate(text.split("\n"), start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        if "\t" not in raw:
            raise ParseError("expected <key><TAB><fields>", n, 1)
        key, body = raw.split("\t", 1)
        key = key.strip()
        if not key:
            raise ParseError("empty key", n, 1)
        if key in seen:
            raise ParseError(f"duplicate key {key!r}", n, 1)
        seen.add(key)
        fields = {"q": 0.5, "warmup": 0, "mask": 1.0, "side1": None, "side2": None}
        col = len(key) + 2
        for part in body.split(";"):
            pcol = col
            col += len(part) + 1
            if not part.strip():
                continue
            name, eq, value = part.partition("=")
            name = name.strip()
            if not eq:
                raise ParseError(f"expected name=value, got {part!r}", n, pcol)
            vcol = pcol + len(part) - len(part.lstrip()) + part.strip().index("=") + 1
            if name in ("side1", "side2"):
                fields[name] = _parse_edits(value, n, vcol)
            elif name.startswith("side"):
                raise ParseError(f"{name!r}: only two sides are supported", n, pcol)
            elif name in ("q", "mask"):
                try:
                    fields[name] = float(value)
                except ValueError:
                    raise ParseError(f"bad {name} value {value!r}", n, vcol) from None
            elif name == "warmup":
                try:
                    fields[name] = int(value)
                except ValueError:
                    raise ParseError(f"bad warmup value {value!r}", n, vcol) from None
            else:
                raise ParseError(f"unknown field {name!r}", n, pcol)
        try:
            instr = FairInstruction(fields["side1"] or (), fields["side2"] or (),
                                    fields["q"], fields["warmup"], fields["mask"])
        except SpecificationError as exc:
            raise ParseError(str(exc), n, len(key) + 2) from None
        entries.append((key, instr))
    return LookupTable(entries)


def format_table(table: LookupTable) -> str:
    lines = []
    for key, i in table.entries:
        s1 = ",".join(str(e) for e in i.side1)
        s2 = ",".join(str(e) for e in i.side2)
        lines.append(f"{key}\tq={i.q!r};warmup={i.warmup};mask={i.mask!r};side1={s1};side2={s2}")
    return "\n".join(lines) + "\n"


def read_table(path) -> LookupTable:
    with open(path, encoding="utf-8") as fh:
        return parse_table(fh.read())


def write_table(table: LookupTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_table(table))
