"""``provgraph`` command line: convert, stats, generate, featurize, train,
evaluate and report.

Exit codes: 0 success, 1 usage, 2 input format, 3 I/O, 4 numeric failure.
Results go to files or stdout, diagnostics and progress to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .features import FeatureSet
from .gnn import NonFiniteLoss, SchemaMismatch, load_checkpoint
from .hetgraph import CorruptPayload, HeteroMultigraph, Label, build, deserialize, serialize, stats
from .parser import DanglingEndpoint, DanglingPolicy, MalformedInput, normalize, parse
from .pipeline import model_inputs, prepare_graphs
from .synth import IOFailure, ManifestMismatch, Vector, export_dataset, generate_dataset, load_dataset
from .trainer import (CVSummary, InvalidFoldCount, TrainingArguments, cross_validate, evaluate, report)
from .util import atomic_write

log = logging.getLogger("provgraph")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class FormatError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dumps(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _read(path: str) -> bytes:
    return Path(path).read_bytes()


def _load_graph(path: str, fmt: str = "auto", dangling: str = "synthesize") -> tuple[HeteroMultigraph, list[str]]:
    """A graph file (binary or JSON export) or raw provenance."""
    data = _read(path)
    if data[:4] == b"PGRF":
        return deserialize(data), []
    if fmt == "auto":
        try:
            doc = json.loads(data)
            if isinstance(doc, dict) and "node_types" in doc and "relations" in doc:
                return deserialize(data), []
        except ValueError:
            pass
    doc = normalize(parse(data, fmt), dangling)
    return build(doc, dangling), list(doc.warnings)


def _warn(lines: Sequence[str]) -> None:
    for w in lines:
        print(f"WARN {w}", file=sys.stderr)


def _stats_line(g: HeteroMultigraph) -> str:
    st = stats(g)
    return f"nodes={st.num_nodes} edges={st.num_edges} relation_types={st.num_relation_types}"


# --------------------------------------------------------------- subcommands

def cmd_convert(a) -> int:
    label = Label[a.label.upper()] if a.label else None
    g, warnings = _load_graph(a.input, a.format, a.dangling)
    if label is not None or a.scenario:
        g = HeteroMultigraph(g.node_ids, g.relations, g.node_attributes, label or g.label, a.scenario or g.scenario)
    _warn(warnings)
    atomic_write(a.out, serialize(g, "json" if a.to == "json" else "binary"))
    print(_stats_line(g))
    return EXIT_OK


def cmd_stats(a) -> int:
    g, warnings = _load_graph(a.input, a.format, a.dangling)
    _warn(warnings)
    sys.stdout.buffer.write(_dumps(stats(g).to_json()))
    return EXIT_OK


def cmd_generate(a) -> int:
    ds = generate_dataset(a.vector, a.benign, a.attack, a.seed, scale=a.scale, jitter=a.jitter)
    manifest = export_dataset(ds, a.out)
    log.info("wrote %d graphs and %s", len(ds), manifest)
    return EXIT_OK


def _load_args(path: str | None, **overrides) -> TrainingArguments:
    doc = {} if path is None else json.loads(_read(path))
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainingArguments.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def cmd_featurize(a) -> int:
    from .features import node_features

    g, warnings = _load_graph(a.input)
    _warn(warnings)
    feats: FeatureSet = node_features(g, a.mode, None, a.k, a.gamma, seed=a.seed, precondition=True)
    if a.transform:
        feats = model_inputs(feats, g.num_nodes)
    atomic_write(a.out, serialize(g, "binary", features=feats))
    print(f"{_stats_line(g)} feature_dim={feats.dim}")
    return EXIT_OK


def cmd_train(a) -> int:
    args = _load_args(a.config, seed=a.seed)
    out = Path(a.out)
    if args.checkpoint_dir is None:
        args.checkpoint_dir = str(out / "checkpoints")
    ds = load_dataset(a.dataset)
    summary = cross_validate(args, ds, a.folds, args.seed)
    atomic_write(out / "summary.json", report(summary, "json"))
    sys.stdout.buffer.write(report(summary, "text"))
    return EXIT_OK


def cmd_evaluate(a) -> int:
    model, extra = load_checkpoint(a.checkpoint)
    args = TrainingArguments.from_dict(extra["args"]) if "args" in extra else TrainingArguments()
    ds = load_dataset(a.dataset)
    prepared = prepare_graphs(ds.graphs, model.schema, args.feature_mode, args.spectral_dim, args.coupling,
                              args.seed if a.seed is None else a.seed)
    metrics = evaluate(model, prepared)
    body = _dumps(metrics.to_dict())
    if a.out:
        atomic_write(a.out, body)
    sys.stdout.buffer.write(body)
    return EXIT_OK


def cmd_report(a) -> int:
    doc = json.loads(_read(a.summary))
    try:
        summary = CVSummary.from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{a.summary}: not a cross-validation summary ({exc})") from exc
    body = report(summary, a.format)
    if a.out:
        atomic_write(a.out, body)
    else:
        sys.stdout.buffer.write(body)
    return EXIT_OK


# ------------------------------------------------------------------- parsing

def _positive(kind):
    def conv(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return conv


def _count(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {text}")
    return value


def _vector(text):
    try:
        return Vector.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="provgraph", description="Provenance graphs to graph classification.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    p.add_argument("-q", "--quiet", action="store_true", help="only errors on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def graph_input(sp):
        sp.add_argument("--in", dest="input", required=True, help="provenance JSON or graph file")
        sp.add_argument("--format", choices=["auto", "w3c", "spade"], default="auto",
                        help="input format of raw provenance (default: auto)")
        sp.add_argument("--dangling", choices=[d.value for d in DanglingPolicy], default="synthesize",
                        help="edges whose endpoints are undeclared (default: synthesize)")

    sp = sub.add_parser("convert", help="raw provenance to a graph file")
    graph_input(sp)
    sp.add_argument("--out", required=True, help="output graph file")
    sp.add_argument("--to", choices=["binary", "json"], default="binary", help="output encoding (default: binary)")
    sp.add_argument("--label", choices=["benign", "attack"], help="graph label to record")
    sp.add_argument("--scenario", help="scenario name to record")
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("stats", help="print graph statistics as JSON")
    graph_input(sp)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("generate", help="write a synthetic labeled dataset")
    sp.add_argument("--vector", type=_vector, required=True, help=", ".join(v.value for v in Vector))
    sp.add_argument("--benign", type=_count, default=100, help="benign graphs (default: 100)")
    sp.add_argument("--attack", type=_count, default=100, help="attack graphs (default: 100)")
    sp.add_argument("--seed", type=int, default=1, help="dataset seed (default: 1)")
    sp.add_argument("--scale", type=_positive(float), default=1.0,
                    help="multiplier on graph sizes (default: 1.0)")
    sp.add_argument("--jitter", type=float, default=0.10, help="relative size jitter (default: 0.10)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("featurize", help="attach node features to a graph file")
    sp.add_argument("--in", dest="input", required=True, help="graph file or raw provenance")
    sp.add_argument("--out", required=True, help="output graph file with features")
    sp.add_argument("--mode", choices=["degree", "spectral", "combined"], default="combined",
                    help="feature family (default: combined)")
    sp.add_argument("--k", type=_positive(int), default=16, help="spectral dimensions (default: 16)")
    sp.add_argument("--gamma", type=float, default=1.0, help="interlayer coupling (default: 1.0)")
    sp.add_argument("--seed", type=int, default=0, help="eigensolver start seed (default: 0)")
    sp.add_argument("--transform", action="store_true", help="store model inputs (log degrees, scaled spectra)")
    sp.set_defaults(func=cmd_featurize)

    sp = sub.add_parser("train", help="k-fold cross-validation of an R-GCN")
    sp.add_argument("--dataset", required=True, help="dataset directory with manifest.json")
    sp.add_argument("--config", help="JSON file with TrainingArguments fields")
    sp.add_argument("--folds", type=int, default=5, help="number of folds, >= 2 (default: 5)")
    sp.add_argument("--seed", type=int, help="overrides the config seed")
    sp.add_argument("--out", required=True, help="output directory (summary.json, checkpoints/)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    sp.add_argument("--checkpoint", required=True, help="model checkpoint")
    sp.add_argument("--dataset", required=True, help="dataset directory with manifest.json")
    sp.add_argument("--seed", type=int, help="eigensolver start seed (default: from checkpoint)")
    sp.add_argument("--out", help="also write metrics JSON here")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="render a summary as a table, JSON or CSV")
    sp.add_argument("--summary", required=True, help="summary.json from train")
    sp.add_argument("--format", choices=["text", "json", "csv"], default="text", help="output format")
    sp.add_argument("--out", help="output file (default: stdout)")
    sp.set_defaults(func=cmd_report)
    return p


def _validate(a) -> None:
    if a.command == "train" and a.folds < 2:
        raise UsageError(f"--folds must be at least 2, got {a.folds}")
    if a.verbose and a.quiet:
        raise UsageError("--verbose and --quiet are mutually exclusive")
    if a.command == "generate" and a.benign + a.attack == 0:
        raise UsageError("nothing to generate")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        # --help, --version and argparse usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        _validate(a)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"provgraph: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    level = logging.DEBUG if a.verbose else logging.ERROR if a.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(message)s", force=True)
    try:
        return a.func(a)
    except MalformedInput as exc:
        print(f"provgraph: malformed input: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (FormatError, CorruptPayload, ManifestMismatch, DanglingEndpoint, SchemaMismatch,
            json.JSONDecodeError, UnicodeDecodeError) as exc:
        print(f"provgraph: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except InvalidFoldCount as exc:
        print(f"provgraph: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"provgraph: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IOFailure, OSError) as exc:
        print(f"provgraph: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
