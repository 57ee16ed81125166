"""``fairdiff`` command line: synth, train, train-kappa, generate, audit, ieat,
report and repro.

Exit codes: 0 success, 1 I/O error, 2 invalid input, 3 quality gate.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .audit import (DEFAULT_FLOOR, AuditReport, ConceptAudit, audit_csv, audit_dataset,
                    audit_outcome, audit_summary, default_prompts, load_kappa, outcome_csv,
                    outcome_summary, read_prompts, save_kappa, train_kappa, verdict_csv,
                    world_prototypes)
from .diffusion import EpsilonModel, TrainConfig, load_model, save_model, train_epsilon
from .errors import FairDiffError, InputError, NumericError, ParseError, QualityError
from .guidance import PRESETS, WILDCARD, LookupTable, generate, read_table, write_table
from .ieat import RESULT_HEADER, IeatConfig, ieat, read_concept_set, result_row
from .metrics import box_stats_csv, box_stats_plotdata
from .world import (ATTRIBUTE_TOKENS, Dataset, default_world, read_dataset, read_world_spec,
                    world_from_dataset, write_dataset, build_world, format_float)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _config_digest(args: argparse.Namespace) -> str:
    """Digest of the resolved options. Output locations are excluded and
    input paths reduced to their names so reruns elsewhere match."""
    items = []
    for k in sorted(vars(args)):
        if k in ("out", "config", "func", "log"):
            continue
        v = getattr(args, k)
        if isinstance(v, str) and os.sep in v:
            v = os.path.basename(v)
        items.append(f"{k}={v}")
    return hashlib.sha256("\n".join(items).encode()).hexdigest()[:16]


def _provenance(args) -> list[str]:
    return [f"fairdiff {__version__}", f"command {args.command}", f"seed {args.seed}",
            f"config {_config_digest(args)}"]


def _write(path, text: str) -> Path:
    p = Path(path)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True)
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return p


def _read_generated(path) -> dict[str, np.ndarray]:
    """Generated-sample CSV ``id,concept,x0,...`` grouped by concept."""
    with open(_require(path), encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0][:2] != ["id", "concept"]:
        raise ParseError("generated-sample header must start with id,concept", line=1)
    out: dict[str, list] = {}
    for n, row in enumerate(rows[1:], start=2):
        try:
            out.setdefault(row[1], []).append([float(v) for v in row[2:]])
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}: {exc}", line=n) from None
    return {c: np.array(v) for c, v in out.items()}


def _generated_csv(concept: str, samples: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "concept"] + [f"x{i}" for i in range(samples.shape[1])])
    for i, row in enumerate(samples):
        w.writerow([f"{concept}-g{i:05d}", concept] + [format_float(v) for v in row])
    return buf.getvalue()


def _read_reference(path) -> dict[str, float]:
    """Reference rates from an audit CSV (``concept,...,rate,...``)."""
    with open(_require(path), encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or "concept" not in rows[0] or "rate" not in rows[0]:
        raise ParseError("reference CSV needs concept and rate columns", line=1)
    ci, ri = rows[0].index("concept"), rows[0].index("rate")
    ref = {}
    for n, row in enumerate(rows[1:], start=2):
        if row[ri] == "":
            continue
        try:
            ref[row[ci]] = float(row[ri])
        except ValueError:
            raise ParseError(f"bad rate {row[ri]!r}", line=n, column=ri + 1) from None
    return ref


def _load_world_spec(args, ds: Dataset | None = None):
    template = read_world_spec(_require(args.world)) if getattr(args, "world", None) else None
    if ds is not None:
        return world_from_dataset(ds, template)
    return template or default_world()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = read_world_spec(_require(args.world)) if args.world else default_world(args.count)
    ds = build_world(spec, args.seed)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = read_dataset(_require(args.data))
    tokens = ds.concepts + list(ATTRIBUTE_TOKENS)
    model = EpsilonModel.init(ds.dim, tokens, seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    res = train_epsilon(model, ds, cfg)
    save_model(res.model, args.out)
    step = max(1, len(res.losses) // 10)
    for i in range(0, len(res.losses), step):
        print(f"epoch {i:5d} loss {res.losses[i]:.5f}")
    if res.losses:
        print(f"final loss {res.losses[-1]:.5f}")
    print(f"wrote diffusion checkpoint to {args.out}")
    return 0


def cmd_train_kappa(args) -> int:
    ds = read_dataset(_require(args.data))
    try:
        kappa = train_kappa(ds, args.seed, args.epochs, args.floor)
    except QualityError as exc:
        print(f"held-out accuracy {exc.accuracy:.4f}", file=sys.stderr)
        raise
    save_kappa(kappa, args.out)
    print(f"held-out accuracy {kappa.accuracy:.4f}")
    print(f"wrote kappa checkpoint to {args.out}")
    return 0


def _resolve_table(args) -> LookupTable | None:
    table = read_table(_require(args.table)) if args.table else None
    if table is None and args.preset:
        table = LookupTable([(WILDCARD, PRESETS[args.preset](args.scale))])
    if table is not None and args.q_override is not None:
        table = table.with_q(args.q_override)
    return table


def cmd_generate(args) -> int:
    model = load_model(_require(args.model))
    table = _resolve_table(args)
    res = generate(model, args.concept, args.sg, args.n, args.seed, table)
    _write(args.out, _generated_csv(args.concept, res.samples))
    if res.draws:
        log = args.log or str(args.out) + ".directions.csv"
        lines = ["id,side,u"] + [f"{args.concept}-g{i:05d},{d.side},{format_float(d.u)}"
                                 for i, d in enumerate(res.draws)]
        _write(log, "\n".join(lines) + "\n")
        print(f"fair guidance: {sum(d.side == 1 for d in res.draws)}/{len(res.draws)} side-1 draws")
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def _audit_outputs(report: AuditReport, outdir: Path, header: list[str], prefix: str = "audit"):
    return [
        _write(outdir / f"{prefix}.csv", audit_csv(report, header)),
        _write(outdir / f"{prefix}.txt", audit_summary(report, header)),
        _write(outdir / f"{prefix}_box.csv", box_stats_csv(report.groups, header)),
        _write(outdir / f"{prefix}_box.dat", box_stats_plotdata(report.groups, header)),
    ]


def cmd_audit(args) -> int:
    ds = read_dataset(_require(args.data))
    kappa = load_kappa(_require(args.kappa))
    spec = _load_world_spec(args, ds)
    prompts = read_prompts(_require(args.prompts)) if args.prompts else default_prompts(spec, args.threshold)
    report = audit_dataset(ds, prompts, kappa, world_prototypes(spec))
    outs = _audit_outputs(report, Path(args.out), _provenance(args))
    print(audit_summary(report), end="")
    print("wrote " + ", ".join(str(p) for p in outs))
    return 0


def cmd_ieat(args) -> int:
    sets = [read_concept_set(_require(p)) for p in (args.x, args.y, args.a, args.b)]
    res = ieat(*sets, cfg=IeatConfig(args.cap, args.mc_draws, args.seed))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_HEADER)
    w.writerow(result_row(res))
    if args.out:
        _write(args.out, "".join(f"# {h}\n" for h in _provenance(args)) + buf.getvalue())
    print(buf.getvalue(), end="")
    return 0


def cmd_report(args) -> int:
    kappa = load_kappa(_require(args.kappa))
    ref = _read_reference(args.reference)
    generated = _read_generated(args.generated)
    fair = _read_generated(args.fair) if args.fair else None
    report = audit_outcome(generated, kappa, ref, fair)
    outdir = Path(args.out)
    header = _provenance(args)
    outs = [
        _write(outdir / "outcome.csv", outcome_csv(report, header)),
        _write(outdir / "verdicts.csv", verdict_csv(report, header)),
        _write(outdir / "box.csv", box_stats_csv(report.groups, header)),
        _write(outdir / "box.dat", box_stats_plotdata(report.groups, header)),
        _write(outdir / "summary.txt", outcome_summary(report, kappa, header)),
    ]
    print(outcome_summary(report, kappa), end="")
    print("wrote " + ", ".join(str(p) for p in outs))
    return 0


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def cmd_repro(args) -> int:
    """synth -> train -> train-kappa -> generate plain and fair (q = 0.5, 0.7)
    -> audit -> report, then a MANIFEST of sha256 digests."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    header = _provenance(args)
    files: list[Path] = []

    def stage(name):
        print(f"[{time.perf_counter() - t0:7.1f}s] {name}", flush=True)

    stage("synth")
    spec = read_world_spec(_require(args.world)) if args.world else default_world(args.count)
    ds = build_world(spec, args.seed)
    write_dataset(ds, out / "world.csv")
    files.append(out / "world.csv")

    stage("train")
    model = EpsilonModel.init(ds.dim, ds.concepts + list(ATTRIBUTE_TOKENS), seed=args.seed)
    res = train_epsilon(model, ds, TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed))
    model = res.model
    save_model(model, out / "diffusion.ckpt")
    files.append(out / "diffusion.ckpt")
    files.append(_write(out / "loss.dat", "# epoch loss\n" + "".join(
        f"{i} {format_float(v)}\n" for i, v in enumerate(res.losses))))

    stage("train-kappa")
    kappa = train_kappa(ds, args.seed, args.kappa_epochs, args.floor)
    save_kappa(kappa, out / "kappa.ckpt")
    files.append(out / "kappa.ckpt")

    stage("audit")
    report = audit_dataset(ds, default_prompts(spec, args.threshold), kappa, world_prototypes(spec))
    files += _audit_outputs(report, out, header)

    plain: dict[str, np.ndarray] = {}
    stage("generate plain")
    for c in spec.names:
        plain[c] = generate(model, c, args.sg, args.n, args.seed).samples
    files.append(_write(out / "gen_plain.csv", "".join(
        _generated_csv(c, s) if i == 0 else _generated_csv(c, s).split("\n", 1)[1]
        for i, (c, s) in enumerate(plain.items()))))

    base = PRESETS[args.preset](args.scale)
    for q in (0.5, 0.7):
        stage(f"generate fair q={q}")
        table = LookupTable([(WILDCARD, base.with_q(q))])
        write_table(table, out / f"table_q{q}.tsv")
        files.append(out / f"table_q{q}.tsv")
        fair = {}
        log = ["id,side,u"]
        for c in spec.names:
            fs = generate(model, c, args.sg, args.n, args.seed, table)
            fair[c] = fs.samples
            log += [f"{c}-g{i:05d},{d.side},{format_float(d.u)}" for i, d in enumerate(fs.draws)]
        files.append(_write(out / f"gen_fair_q{q}.csv", "".join(
            _generated_csv(c, s) if i == 0 else _generated_csv(c, s).split("\n", 1)[1]
            for i, (c, s) in enumerate(fair.items()))))
        files.append(_write(out / f"gen_fair_q{q}.directions.csv", "\n".join(log) + "\n"))

        stage(f"report q={q}")
        rep = audit_outcome(plain, kappa, report, fair)
        rdir = out / f"report_q{q}"
        files += [
            _write(rdir / "outcome.csv", outcome_csv(rep, header + [f"q {q}"])),
            _write(rdir / "verdicts.csv", verdict_csv(rep, header + [f"q {q}"])),
            _write(rdir / "box.csv", box_stats_csv(rep.groups, header + [f"q {q}"])),
            _write(rdir / "box.dat", box_stats_plotdata(rep.groups, header + [f"q {q}"])),
            _write(rdir / "summary.txt", outcome_summary(rep, kappa, header + [f"q {q}"])),
        ]
        print(outcome_summary(rep, kappa), end="")

    lines = [f"# {h}" for h in header]
    lines += [f"{_sha256(p)}  {p.relative_to(out).as_posix()}" for p in files]
    _write(out / "MANIFEST", "\n".join(lines) + "\n")
    stage(f"done; MANIFEST lists {len(files)} artifacts")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")


def _add_config(p):
    p.add_argument("--config", help="key=value file with option defaults; flags take precedence")


def _q(value: str) -> float:
    q = float(value)
    if not 0.0 <= q <= 1.0:
        raise argparse.ArgumentTypeError("q must lie in [0, 1]")
    return q


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairdiff", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"fairdiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="draw a synthetic labelled world")
    p.add_argument("--world", help="world spec file (default: built-in 8-concept world)")
    p.add_argument("--count", type=int, default=250, help="samples per concept for the default world")
    p.add_argument("--out", required=True, help="dataset CSV to write")
    _add_seed(p)
    _add_config(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the conditional diffusion model")
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    _add_seed(p)
    _add_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-kappa", help="train the attribute classifier")
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--floor", type=float, default=DEFAULT_FLOOR, help="minimum held-out accuracy")
    _add_seed(p)
    _add_config(p)
    p.set_defaults(func=cmd_train_kappa)

    p = sub.add_parser("generate", help="sample from the diffusion model")
    p.add_argument("--model", required=True, help="diffusion checkpoint")
    p.add_argument("--concept", required=True)
    p.add_argument("--n", type=int, default=250, help="number of samples")
    p.add_argument("--sg", type=float, default=3.0, help="classifier-free guidance scale")
    p.add_argument("--table", help="lookup table file; no table means plain sampling")
    p.add_argument("--preset", choices=sorted(PRESETS), help="wildcard table from a preset when --table is absent")
    p.add_argument("--scale", type=float, default=2.0, help="edit scale for --preset")
    p.add_argument("--q-override", type=_q, help="replace q in every table entry")
    p.add_argument("--out", required=True, help="generated-sample CSV")
    p.add_argument("--log", help="direction log (default: <out>.directions.csv)")
    _add_seed(p)
    _add_config(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("audit", help="filter, label and rate a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--kappa", required=True, help="kappa checkpoint")
    p.add_argument("--prompts", help="prompt list: concept[,threshold] per line")
    p.add_argument("--world", help="world spec supplying the prototype geometry")
    p.add_argument("--threshold", type=float, default=0.27, help="similarity threshold")
    p.add_argument("--out", required=True, help="output directory")
    _add_seed(p)
    _add_config(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("ieat", help="embedding association test on four concept-set files")
    for name in ("x", "y", "a", "b"):
        p.add_argument(f"--{name}", required=True, help=f"concept set {name.upper()} (CSV)")
    p.add_argument("--cap", type=int, default=200_000, help="largest partition count to enumerate")
    p.add_argument("--mc-draws", type=int, default=10_000)
    p.add_argument("--out", help="also write the result CSV here")
    _add_seed(p)
    _add_config(p)
    p.set_defaults(func=cmd_ieat)

    p = sub.add_parser("report", help="compare generated outcomes with a reference audit")
    p.add_argument("--reference", required=True, help="audit CSV of the training data")
    p.add_argument("--kappa", required=True)
    p.add_argument("--generated", required=True, help="plain generated-sample CSV")
    p.add_argument("--fair", help="fair-guided generated-sample CSV")
    p.add_argument("--out", required=True, help="output directory")
    _add_seed(p)
    _add_config(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("repro", help="full pipeline from one seed, with a MANIFEST")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--world", help="world spec file")
    p.add_argument("--count", type=int, default=250)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--kappa-epochs", type=int, default=100)
    p.add_argument("--floor", type=float, default=DEFAULT_FLOOR)
    p.add_argument("--threshold", type=float, default=0.27)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--sg", type=float, default=3.0)
    p.add_argument("--preset", choices=sorted(PRESETS), default="paired")
    p.add_argument("--scale", type=float, default=2.0)
    _add_seed(p)
    _add_config(p)
    p.set_defaults(func=cmd_repro)
    return parser


def _read_config(path) -> dict[str, str]:
    values = {}
    with open(_require(path), encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise ParseError("expected key=value", line=n, column=1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _config_path(argv: Sequence[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    path = _config_path(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    subs = parser._subparsers._group_actions[0].choices
    if path and command in subs:
        values = _read_config(path)
        sub = subs[command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known - {"config"})
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**values)
        # required flags may come from the config file; flags still win
        for a in sub._actions:
            if a.dest in values:
                a.required = False
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        return args.func(args)
    except QualityError as exc:
        print(f"fairdiff: quality gate: {exc}", file=sys.stderr)
        return 3
    except (InputError, NumericError, KeyError, IndexError) as exc:
        print(f"fairdiff: invalid input: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"fairdiff: I/O error: {exc}", file=sys.stderr)
        return 1
    except FairDiffError as exc:
        print(f"fairdiff: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
