"""Measurement pipeline: relevance filtering against a concept prototype,
attribute labelling with a trained classifier (kappa), and rate reports for
datasets and generated outcomes."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from .errors import (ConceptLookupError, DegenerateInputError, InputError, NumericError,
                     ParseError, QualityError, ShapeError, SpecificationError)
from .metrics import (BiasVerdict, FairBoundary, GroupStats, RateRecord, attribute_rate,
                      group_box_stats, parity_gap, verdict, within_boundary)
from .numerics import AdamState, Mlp, Rng, adam_step, mlp_from_lines, mlp_to_lines, permutation
from .world import Dataset, WorldSpec, concept_prototype

DEFAULT_TEMPLATE = "A photo of the face of a {occ}"
DEFAULT_THRESHOLD = 0.27
DEFAULT_FLOOR = 0.9
ABSTAIN = -1


# ---------------------------------------------------------------------------
# kappa
# ---------------------------------------------------------------------------


class Labeler(Protocol):
    accuracy: float

    def label(self, features) -> np.ndarray: ...


@dataclass
class ClassifierModel:
    mlp: Mlp
    accuracy: float
    seed: int
    floor: float = DEFAULT_FLOOR
    # rows: true attribute, columns: predicted (held-out split)
    confusion: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), dtype=np.int64))
    # logit gaps below this abstain (label -1); 0 means plain argmax
    min_margin: float = 0.0

    def __post_init__(self):
        if self.mlp.sizes[-1] != 2:
            raise ShapeError("classifier must output two logits")
        if not 0.0 <= self.accuracy <= 1.0:
            raise InputError(f"accuracy {self.accuracy} outside [0, 1]")

    @property
    def dim(self) -> int:
        return self.mlp.sizes[0]

    def logits(self, features) -> np.ndarray:
        return self.mlp.forward(features)

    def label(self, features) -> np.ndarray:
        """Argmax of the logits; an exact tie goes to 0."""
        x = np.asarray(features, dtype=float)
        if x.shape[-1] != self.dim:
            raise InputError(f"feature dim {x.shape[-1]} != classifier input {self.dim}")
        lg = np.atleast_2d(self.logits(x))
        out = (lg[:, 1] > lg[:, 0]).astype(np.int64)
        if self.min_margin > 0:
            out[np.abs(lg[:, 1] - lg[:, 0]) < self.min_margin] = ABSTAIN
        return out[0] if x.ndim == 1 else out


def label_from_logits(logits) -> int:
    l0, l1 = logits
    return 1 if l1 > l0 else 0


def kappa_label(model: ClassifierModel, features):
    return model.label(features)


@dataclass
class GroundTruthLabeler:
    """Perfect oracle: looks labels up by feature row in a known dataset."""
    dataset: Dataset
    accuracy: float = 1.0

    def __post_init__(self):
        self._index = {s.features.tobytes(): s.attribute for s in self.dataset.samples}

    def label(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=float))
        try:
            return np.array([self._index[row.tobytes()] for row in x], dtype=np.int64)
        except KeyError:
            raise InputError("ground-truth labeler asked about an unknown sample") from None


def _split(n: int, seed: int, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    order = permutation(Rng(seed, stream=41), n)
    cut = int(round(train_frac * n))
    return order[:cut], order[cut:]


def train_kappa(dataset: Dataset, seed: int = 0, epochs: int = 100, floor: float = DEFAULT_FLOOR,
                hidden: int = 16, lr: float = 1e-2, batch_size: int = 64) -> ClassifierModel:
    """Softmax classifier D -> hidden -> 2 on an 80/20 split drawn from ``seed``.

    The output layer starts at zero, so an untrained model predicts the tie
    label 0 everywhere (chance-level accuracy on a balanced world).
    Raises ``QualityError`` when held-out accuracy is below ``floor``.
    """
    if len(dataset) == 0:
        raise InputError("cannot train kappa on an empty dataset")
    y = dataset.attributes()
    if np.unique(y).size < 2:
        raise DegenerateInputError(f"dataset contains only attribute value {int(y[0])}")
    if epochs < 0 or batch_size < 1 or lr <= 0:
        raise SpecificationError("invalid kappa hyper-parameters")
    x = dataset.features()
    tr, te = _split(len(y), seed)
    if te.size == 0:
        raise DegenerateInputError("dataset too small for a held-out split")
    mlp = Mlp.init((x.shape[1], hidden, 2), Rng(seed, stream=42))
    mlp.weights[-1][:] = 0.0
    params = mlp.params
    state = AdamState.for_params(params, lr=lr)
    rng = Rng(seed, stream=43)
    onehot = np.eye(2)[y]
    for _ in range(epochs):
        order = tr[np.argsort(rng.uniform(tr.size), kind="stable")]
        for start in range(0, order.size, batch_size):
            idx = order[start:start + batch_size]
            lg = mlp.forward(x[idx])
            lg = lg - lg.max(axis=1, keepdims=True)
            p = np.exp(lg)
            p /= p.sum(axis=1, keepdims=True)
            grads, _ = mlp.backward(x[idx], (p - onehot[idx]) / idx.size)
            params, state = adam_step(state, params, grads)
            mlp = mlp.with_params(params)
    model = ClassifierModel(mlp, 0.0, seed, floor)
    pred = model.label(x[te])
    conf = np.zeros((2, 2), dtype=np.int64)
    np.add.at(conf, (y[te], pred), 1)
    model.confusion = conf
    model.accuracy = float(np.trace(conf) / te.size)
    if model.accuracy < floor:
        raise QualityError(f"kappa held-out accuracy {model.accuracy:.4f} below floor {floor}",
                           model.accuracy)
    return model


KAPPA_MAGIC = "KAPPA v1"


def kappa_to_text(model: ClassifierModel) -> str:
    c = model.confusion
    lines = [KAPPA_MAGIC] + mlp_to_lines(model.mlp)
    lines.append(f"META {model.accuracy!r} {model.seed} {model.floor!r} {model.min_margin!r}")
    lines.append(f"CONFUSION {c[0, 0]} {c[0, 1]} {c[1, 0]} {c[1, 1]}")
    return "\n".join(lines) + "\n"


def kappa_from_text(text: str) -> ClassifierModel:
    lines = text.splitlines()
    if not lines or lines[0] != KAPPA_MAGIC:
        raise ParseError(f"expected {KAPPA_MAGIC!r} header", line=1)
    mlp, pos = mlp_from_lines(lines, 1)
    try:
        meta = lines[pos].split()
        conf = lines[pos + 1].split()
        if meta[0] != "META" or conf[0] != "CONFUSION":
            raise ParseError("expected META and CONFUSION lines", line=pos + 1)
        cm = np.array([int(v) for v in conf[1:5]], dtype=np.int64).reshape(2, 2)
        return ClassifierModel(mlp, float(meta[1]), int(meta[2]), float(meta[3]), cm, float(meta[4]))
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed kappa checkpoint: {exc}", line=pos + 1) from None


def save_kappa(model: ClassifierModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(kappa_to_text(model))


def load_kappa(path) -> ClassifierModel:
    with open(path, encoding="utf-8") as fh:
        return kappa_from_text(fh.read())


def check_deployable(kappa) -> None:
    floor = getattr(kappa, "floor", 0.0)
    if kappa.accuracy < floor:
        raise QualityError(f"kappa accuracy {kappa.accuracy:.4f} below floor {floor}", kappa.accuracy)


# ---------------------------------------------------------------------------
# relevance filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptSpec:
    concept: str
    template: str = DEFAULT_TEMPLATE
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not self.concept:
            raise SpecificationError("prompt concept must be named")
        if not -1.0 <= self.threshold < 1.0:
            raise SpecificationError(f"similarity threshold {self.threshold} outside [-1, 1)")

    @property
    def text(self) -> str:
        return self.template.format(occ=self.concept)


def similarities(features, prototype) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=float))
    p = np.asarray(prototype, dtype=float)
    pn = np.linalg.norm(p)
    if pn == 0:
        raise NumericError("prototype has zero norm")
    if x.shape[1] != p.shape[0]:
        raise InputError(f"feature dim {x.shape[1]} != prototype dim {p.shape[0]}")
    xn = np.linalg.norm(x, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = (x @ p) / (xn * pn)
    # a zero feature vector is similar to nothing
    return np.where(xn == 0, -np.inf, sims)


def filter_relevant(dataset: Dataset, prompt: PromptSpec, prototype) -> Dataset:
    """Members whose cosine similarity to ``prototype`` is strictly above the
    prompt threshold."""
    if len(dataset) == 0:
        similarities(np.zeros((0, len(prototype))), prototype)
        return Dataset(dataset.spec, [])
    keep = similarities(dataset.features(), prototype) > prompt.threshold
    return Dataset(dataset.spec, [s for s, k in zip(dataset.samples, keep) if k])


def read_prompts(path, template: str = DEFAULT_TEMPLATE) -> list[PromptSpec]:
    """One ``concept[,threshold]`` per line; blank and ``#`` lines skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            name, _, thr = line.partition(",")
            try:
                out.append(PromptSpec(name.strip(), template,
                                      float(thr) if thr.strip() else DEFAULT_THRESHOLD))
            except ValueError as exc:
                raise ParseError(str(exc), line=n, column=len(name) + 2) from None
    return out


def default_prompts(spec: WorldSpec, threshold: float = DEFAULT_THRESHOLD) -> list[PromptSpec]:
    return [PromptSpec(c, threshold=threshold) for c in spec.names]


# ---------------------------------------------------------------------------
# dataset audit
# ---------------------------------------------------------------------------


def corrected_rate(rate: float, accuracy: float) -> Optional[float]:
    """Invert ``r = rho * a + (1 - rho) * (1 - a)``; clipped to [0, 1].
    Undefined for a <= 0.5."""
    if accuracy <= 0.5:
        return None
    return float(min(1.0, max(0.0, (rate - (1.0 - accuracy)) / (2.0 * accuracy - 1.0))))


def _labelled_rate(labels: np.ndarray) -> Optional[float]:
    kept = labels[labels != ABSTAIN]
    return attribute_rate(kept) if kept.size else None


@dataclass(frozen=True)
class ConceptAudit:
    concept: str
    threshold: float
    relevant: int
    rate: float
    corrected: Optional[float]
    parity_gap: Optional[float]
    in_boundary: bool
    abstained: int = 0


@dataclass
class AuditReport:
    rows: list[ConceptAudit]
    missing: list[str]
    groups: list[GroupStats]
    kappa_accuracy: float
    confusion: Optional[np.ndarray] = None

    def rates(self) -> dict[str, float]:
        return {r.concept: r.rate for r in self.rows}

    def records(self) -> list[RateRecord]:
        return [RateRecord(r.concept, r.rate, r.relevant) for r in self.rows]


def audit_dataset(dataset: Dataset, prompts: Sequence[PromptSpec], kappa: Labeler,
                  prototypes: Mapping[str, np.ndarray], boundary: FairBoundary = FairBoundary()
                  ) -> AuditReport:
    """Filter, label and rate every prompt's relevant set.

    The parity gap treats membership in a concept's relevant set as the
    outcome and kappa's label as the attribute, over the whole dataset.
    Prompts whose relevant set is empty land in ``missing``.
    """
    check_deployable(kappa)
    if len(dataset) == 0:
        raise InputError("cannot audit an empty dataset")
    x = dataset.features()
    labels = np.asarray(kappa.label(x))
    known = labels != ABSTAIN
    rows, missing = [], []
    for p in prompts:
        if p.concept not in prototypes:
            raise ConceptLookupError(f"no prototype for concept {p.concept!r}")
        mask = similarities(x, prototypes[p.concept]) > p.threshold
        if not mask.any():
            missing.append(p.concept)
            continue
        rate = _labelled_rate(labels[mask])
        if rate is None:
            missing.append(p.concept)
            continue
        try:
            gap = parity_gap(mask[known], labels[known], True)
        except DegenerateInputError:
            gap = None
        rows.append(ConceptAudit(p.concept, p.threshold, int(mask.sum()), rate,
                                 corrected_rate(rate, kappa.accuracy), gap,
                                 within_boundary(rate, boundary), int((~known & mask).sum())))
    groups = group_box_stats([RateRecord(r.concept, r.rate, r.relevant) for r in rows]) if rows else []
    return AuditReport(rows, missing, groups, kappa.accuracy, getattr(kappa, "confusion", None))


def world_prototypes(spec: WorldSpec) -> dict[str, np.ndarray]:
    return {c: concept_prototype(spec, c) for c in spec.names}


# ---------------------------------------------------------------------------
# outcome audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OutcomeRow:
    concept: str
    ref_rate: float
    out_rate: Optional[float]
    fair_rate: Optional[float]
    verdict: Optional[BiasVerdict]
    fair_verdict: Optional[BiasVerdict]
    in_boundary: bool


@dataclass
class OutcomeReport:
    rows: list[OutcomeRow]
    groups: list[GroupStats]
    boundary: FairBoundary

    def _percent(self, attr: str) -> dict[BiasVerdict, float]:
        vs = [getattr(r, attr) for r in self.rows if getattr(r, attr) is not None]
        if not vs:
            return {v: 0.0 for v in BiasVerdict}
        return {v: 100.0 * sum(1 for x in vs if x is v) / len(vs) for v in BiasVerdict}

    def verdict_percentages(self) -> dict[BiasVerdict, float]:
        return self._percent("verdict")

    def fair_verdict_percentages(self) -> dict[BiasVerdict, float]:
        return self._percent("fair_verdict")

    def medians(self) -> dict[str, float]:
        return {g.group: g.median for g in self.groups}


def _rate_of(kappa: Labeler, vectors) -> Optional[float]:
    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    if v.shape[0] == 0:
        return None
    return _labelled_rate(np.asarray(kappa.label(v)))


def audit_outcome(generated: Mapping[str, np.ndarray], kappa: Labeler,
                  reference: AuditReport | Mapping[str, float],
                  fair: Mapping[str, np.ndarray] | None = None,
                  boundary: FairBoundary = FairBoundary()) -> OutcomeReport:
    """Label generated samples and compare their rates with the reference.

    ``verdict`` compares plain outcomes with the reference and ``fair_verdict``
    the fair-guided ones. ``in_boundary`` describes the fair rate when present,
    else the plain rate.
    """
    check_deployable(kappa)
    ref = reference.rates() if isinstance(reference, AuditReport) else dict(reference)
    fair = fair or {}
    concepts = list(generated) + [c for c in fair if c not in generated]
    rows = []
    out_rates, fair_rates = {}, {}
    for c in concepts:
        if c not in ref:
            raise ConceptLookupError(f"concept {c!r} missing from the reference report")
        r = ref[c]
        o = _rate_of(kappa, generated[c]) if c in generated else None
        f = _rate_of(kappa, fair[c]) if c in fair else None
        if o is not None:
            out_rates[c] = o
        if f is not None:
            fair_rates[c] = f
        shown = f if f is not None else o
        rows.append(OutcomeRow(
            c, r, o, f,
            verdict(r, o, boundary) if o is not None else None,
            verdict(r, f, boundary) if f is not None else None,
            shown is not None and within_boundary(shown, boundary)))
    ref_records = [RateRecord(c, ref[c], 1) for c in concepts]
    series = {}
    if out_rates:
        series["out"] = out_rates
    if fair_rates:
        series["fair"] = fair_rates
    groups = group_box_stats(ref_records, series) if ref_records else []
    return OutcomeReport(rows, groups, boundary)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def _f(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return "%.6f" % v


def _header(buf, header_lines):
    for h in header_lines:
        buf.write(f"# {h}\n")


def audit_csv(report: AuditReport, header_lines: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    _header(buf, header_lines)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["concept", "threshold", "relevant", "rate", "corrected_rate", "parity_gap",
                "in_boundary", "status"])
    for r in report.rows:
        w.writerow([r.concept, _f(r.threshold), r.relevant, _f(r.rate), _f(r.corrected),
                    _f(r.parity_gap), str(r.in_boundary).lower(), "ok"])
    for c in report.missing:
        w.writerow([c, "", 0, "", "", "", "", "missing"])
    return buf.getvalue()


def _confusion_lines(conf) -> list[str]:
    if conf is None:
        return []
    c = np.asarray(conf)
    return ["kappa confusion (rows true 0/1, columns predicted 0/1):",
            f"  {c[0, 0]:6d} {c[0, 1]:6d}", f"  {c[1, 0]:6d} {c[1, 1]:6d}"]


def audit_summary(report: AuditReport, header_lines: Sequence[str] = ()) -> str:
    lines = list(header_lines)
    lines.append(f"kappa held-out accuracy: {report.kappa_accuracy:.4f}")
    lines += _confusion_lines(report.confusion)
    lines.append(f"concepts audited: {len(report.rows)}; missing (empty relevant set): "
                 f"{', '.join(report.missing) if report.missing else 'none'}")
    lines.append("")
    lines.append(f"{'concept':<16}{'|R|':>6}{'rate':>9}{'corr.':>9}{'gap':>9}  fair")
    for r in report.rows:
        lines.append(f"{r.concept:<16}{r.relevant:>6}{_f(r.rate):>9}{_f(r.corrected):>9}"
                     f"{_f(r.parity_gap):>9}  {'yes' if r.in_boundary else 'no'}")
    for g in report.groups:
        lines.append(f"group {g.group}: median {g.median:.4f} (n={len(g.members)})")
    return "\n".join(lines) + "\n"


OUTCOME_HEADER = ["concept", "ref_rate", "out_rate", "fair_rate", "verdict", "in_boundary"]


def outcome_csv(report: OutcomeReport, header_lines: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    _header(buf, header_lines)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OUTCOME_HEADER)
    for r in report.rows:
        w.writerow([r.concept, _f(r.ref_rate), _f(r.out_rate), _f(r.fair_rate),
                    "" if r.verdict is None else r.verdict.value, str(r.in_boundary).lower()])
    return buf.getvalue()


def verdict_csv(report: OutcomeReport, header_lines: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    _header(buf, header_lines)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "Amplified", "Reflected", "Mitigated", "total"])
    for name, pct in (("out", report.verdict_percentages()),
                      ("fair", report.fair_verdict_percentages())):
        vals = [pct[v] for v in BiasVerdict]
        if any(getattr(r, "verdict" if name == "out" else "fair_verdict") for r in report.rows):
            w.writerow([name] + ["%.2f" % v for v in vals] + ["%.2f" % sum(vals)])
    return buf.getvalue()


def outcome_summary(report: OutcomeReport, kappa=None, header_lines: Sequence[str] = ()) -> str:
    lines = list(header_lines)
    if kappa is not None:
        lines.append(f"kappa held-out accuracy: {kappa.accuracy:.4f}")
        lines += _confusion_lines(getattr(kappa, "confusion", None))
    b = report.boundary
    lines.append(f"fair boundary: [{b.low:.2f}, {b.high:.2f}]")
    lines.append("")
    lines.append(f"{'concept':<16}{'ref':>9}{'out':>9}{'fair':>9}  verdict     fair-verdict")
    for r in report.rows:
        lines.append(f"{r.concept:<16}{_f(r.ref_rate):>9}{_f(r.out_rate):>9}{_f(r.fair_rate):>9}  "
                     f"{(r.verdict.value if r.verdict else '-'):<12}"
                     f"{r.fair_verdict.value if r.fair_verdict else '-'}")
    lines.append("")
    for label, pct in (("plain", report.verdict_percentages()),
                       ("fair", report.fair_verdict_percentages())):
        lines.append(f"{label} verdicts: " + ", ".join(f"{v.value} {pct[v]:.1f}%" for v in BiasVerdict))
    for g in report.groups:
        lines.append(f"group {g.group}: median {g.median:.4f} "
                     f"({'within' if within_boundary(g.median, b) else 'outside'} boundary)")
    return "\n".join(lines) + "\n"
