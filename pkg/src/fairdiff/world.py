"""Synthetic labelled world with planted per-concept attribute rates.

Geometry: axis 0 carries the binary attribute (cells at -sep/2 and +sep/2);
concept centres sit at radius ``sep`` on the vertices of a regular simplex in
the remaining axes, so a concept's prototype (the average of its two cells) is
orthogonal to the attribute axis.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConceptLookupError, ParseError, SpecificationError
from .numerics import Rng

DEFAULT_CONCEPTS = (
    ("firefighter", 0.04),
    ("engineer", 0.15),
    ("scientist", 0.30),
    ("coach", 0.46),
    ("teacher", 0.54),
    ("designer", 0.70),
    ("nurse", 0.85),
    ("aide", 0.96),
)

# Conditioning tokens for the two attribute values; reserved, so concepts
# may not use these names.
ATTRIBUTE_TOKENS = ("male person", "female person")


@dataclass(frozen=True)
class ConceptSpec:
    name: str
    rate: float
    count: int = 250


@dataclass
class WorldSpec:
    concepts: list[ConceptSpec]
    dim: int = 8
    sep: float = 4.0
    std: float = 1.0
    groups: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        names = [c.name for c in self.concepts]
        if len(names) < 2:
            raise SpecificationError("a world needs at least two concepts")
        if len(set(names)) != len(names):
            raise SpecificationError("duplicate concept names")
        for c in self.concepts:
            if not c.name or any(ch in c.name for ch in ",\n\t:;=") or c.name in ATTRIBUTE_TOKENS:
                raise SpecificationError(f"invalid concept name {c.name!r}")
            if not 0.0 <= c.rate <= 1.0:
                raise SpecificationError(f"rate of {c.name!r} outside [0, 1]: {c.rate}")
            if c.count < 1:
                raise SpecificationError(f"count of {c.name!r} must be >= 1")
        if self.dim < 2:
            raise SpecificationError("dim must be >= 2")
        if not (self.sep > 0 and self.std > 0):
            raise SpecificationError("sep and std must be positive")
        for g, members in self.groups.items():
            unknown = set(members) - set(names)
            if unknown:
                raise SpecificationError(f"group {g!r} names unknown concepts {sorted(unknown)}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.concepts]

    def concept(self, name: str) -> ConceptSpec:
        for c in self.concepts:
            if c.name == name:
                return c
        raise ConceptLookupError(f"unknown concept {name!r}")

    def concept_directions(self) -> np.ndarray:
        """Unit concept directions, shape ``(K, dim)``, zero on axis 0."""
        k, d = len(self.concepts), self.dim
        out = np.zeros((k, d))
        if k - 1 <= d - 1:
            # regular simplex: centred basis vectors expressed in a Helmert basis
            helmert = np.zeros((k - 1, k))
            for i in range(1, k):
                helmert[i - 1, :i] = 1.0
                helmert[i - 1, i] = -float(i)
                helmert[i - 1] /= np.sqrt(i * (i + 1.0))
            verts = helmert @ (np.eye(k) - 1.0 / k)
            verts = verts.T / np.linalg.norm(verts.T, axis=1, keepdims=True)
            out[:, 1:k] = verts
        else:
            # more concepts than free axes: fixed pseudo-random directions
            g = Rng(0x5EED, stream=7).gaussian(k * (d - 1)).reshape(k, d - 1)
            out[:, 1:] = g / np.linalg.norm(g, axis=1, keepdims=True)
        return out

    def cluster_means(self) -> np.ndarray:
        """Cell means, shape ``(K, 2, dim)`` indexed ``[concept, attribute]``."""
        centres = self.sep * self.concept_directions()
        means = np.repeat(centres[:, None, :], 2, axis=1)
        means[:, 0, 0] = -self.sep / 2.0
        means[:, 1, 0] = self.sep / 2.0
        return means


def default_world(count: int = 250) -> WorldSpec:
    return WorldSpec(
        [ConceptSpec(n, r, count) for n, r in DEFAULT_CONCEPTS],
        groups={"science": ["engineer", "scientist"], "caregiving": ["nurse", "aide"]},
    )


@dataclass(frozen=True)
class Sample:
    id: str
    concept: str
    attribute: int
    features: np.ndarray


@dataclass
class Dataset:
    spec: WorldSpec | None
    samples: list[Sample]

    def __len__(self):
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples[0].features.shape[0] if self.samples else (self.spec.dim if self.spec else 0)

    @property
    def concepts(self) -> list[str]:
        seen = []
        for s in self.samples:
            if s.concept not in seen:
                seen.append(s.concept)
        return seen

    def features(self) -> np.ndarray:
        return np.array([s.features for s in self.samples]).reshape(len(self.samples), -1)

    def attributes(self) -> np.ndarray:
        return np.array([s.attribute for s in self.samples], dtype=np.int64)

    def concept_labels(self) -> np.ndarray:
        return np.array([s.concept for s in self.samples], dtype=object)

    def subset(self, concept: str) -> "Dataset":
        return Dataset(self.spec, [s for s in self.samples if s.concept == concept])


def build_world(spec: WorldSpec, seed: int) -> Dataset:
    """Draw ``count`` samples per concept: attribute ~ Bernoulli(rate) first,
    then features from that cell's isotropic Gaussian."""
    spec.validate()
    means = spec.cluster_means()
    base = Rng(seed, stream=0)
    samples = []
    for k, c in enumerate(spec.concepts):
        r = base.split(k)
        attrs = (r.uniform(c.count) < c.rate).astype(np.int64)
        noise = r.gaussian(c.count * spec.dim).reshape(c.count, spec.dim)
        feats = means[k, attrs] + spec.std * noise
        for j in range(c.count):
            samples.append(Sample(f"{c.name}-{j:05d}", c.name, int(attrs[j]), feats[j]))
    return Dataset(spec, samples)


def concept_prototype(spec: WorldSpec, concept: str) -> np.ndarray:
    """The concept's stand-in prompt embedding: mean of its two cell means."""
    k = spec.names.index(spec.concept(concept).name)
    means = spec.cluster_means()
    return (means[k, 0] + means[k, 1]) / 2.0


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def format_float(v: float) -> str:
    return "%.17g" % v


def dataset_to_csv(ds: Dataset) -> str:
    d = ds.dim
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "concept", "attribute"] + [f"x{i}" for i in range(d)])
    for s in ds.samples:
        w.writerow([s.id, s.concept, s.attribute] + [format_float(v) for v in s.features])
    return buf.getvalue()


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dataset_to_csv(ds))


def read_dataset(path, spec: WorldSpec | None = None) -> Dataset:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["id", "concept", "attribute"]:
        raise ParseError("dataset header must start with id,concept,attribute", line=1)
    d = len(rows[0]) - 3
    if rows[0][3:] != [f"x{i}" for i in range(d)]:
        raise ParseError("feature columns must be x0..x{D-1}", line=1)
    samples = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != d + 3:
            raise ParseError(f"expected {d + 3} fields, got {len(row)}", line=n)
        try:
            attr = int(row[2])
            feats = np.array([float(v) for v in row[3:]])
        except ValueError as exc:
            raise ParseError(str(exc), line=n) from None
        if attr not in (0, 1):
            raise ParseError(f"attribute must be 0 or 1, got {attr}", line=n, column=3)
        samples.append(Sample(row[0], row[1], attr, feats))
    return Dataset(spec, samples)


def parse_world_spec(text: str) -> WorldSpec:
    concepts, groups = [], {}
    opts = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key=value", line=n, column=1)
        key, value = (s.strip() for s in line.split("=", 1))
        col = raw.index("=") + 2
        try:
            if key == "concept":
                name, rate, count = (s.strip() for s in value.split(","))
                concepts.append(ConceptSpec(name, float(rate), int(count)))
            elif key == "group":
                gname, members = value.split(":", 1)
                groups[gname.strip()] = [m.strip() for m in members.split(",") if m.strip()]
            elif key == "dim":
                opts["dim"] = int(value)
            elif key in ("sep", "std"):
                opts[key] = float(value)
            else:
                raise ParseError(f"unknown key {key!r}", line=n, column=1)
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"bad value for {key!r}: {value!r}", line=n, column=col) from None
    return WorldSpec(concepts, groups=groups, **opts)


def world_spec_to_text(spec: WorldSpec) -> str:
    lines = [f"dim={spec.dim}", f"sep={format_float(spec.sep)}", f"std={format_float(spec.std)}"]
    lines += [f"concept={c.name},{format_float(c.rate)},{c.count}" for c in spec.concepts]
    lines += [f"group={g}:{','.join(m)}" for g, m in spec.groups.items()]
    return "\n".join(lines) + "\n"


def read_world_spec(path) -> WorldSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_world_spec(fh.read())


def world_from_dataset(ds: Dataset, template: WorldSpec | None = None) -> WorldSpec:
    """Rebuild a WorldSpec whose concept order/counts match a loaded dataset;
    geometry comes from ``template`` (default world geometry otherwise)."""
    base = template or default_world()
    concepts = []
    for name in ds.concepts:
        sub = ds.subset(name)
        rate = float(np.mean(sub.attributes()))
        concepts.append(ConceptSpec(name, rate, len(sub)))
    groups = {g: [m for m in ms if m in ds.concepts] for g, ms in base.groups.items()}
    groups = {g: ms for g, ms in groups.items() if ms}
    return WorldSpec(concepts, dim=ds.dim, sep=base.sep, std=base.std, groups=groups)


def planted_rates(spec: WorldSpec) -> dict[str, float]:
    return {c.name: c.rate for c in spec.concepts}


def empirical_rates(ds: Dataset) -> dict[str, float]:
    return {name: float(np.mean(ds.subset(name).attributes())) for name in ds.concepts}


__all__: Sequence[str] = (
    "ATTRIBUTE_TOKENS", "ConceptSpec", "WorldSpec", "Sample", "Dataset", "build_world",
    "concept_prototype", "default_world", "write_dataset", "read_dataset", "parse_world_spec",
    "read_world_spec", "world_spec_to_text", "dataset_to_csv",
)
