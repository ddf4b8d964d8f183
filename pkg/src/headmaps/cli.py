"""Command-line entry point: ``headmaps <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import report
from .describe import (
    CannedTransport,
    EndpointConfig,
    HTTPTransport,
    describe_head,
    format_prompt,
    identification_rate,
    parse_response,
)
from .errors import DataError, EndpointError, HeadmapsError
from .model_io import HeadRef, load_geometry_overrides, load_model
from .projector import (
    DEFAULT_BLOCK_ROWS,
    DEFAULT_TAU,
    ScanStats,
    output_space_size,
    relation_score,
    saliency,
    salient_mappings,
)
from .sweep import (
    SweepConfig,
    category_grid,
    count_by_relation,
    parse_heads,
    run_sweep,
    score_distribution,
    summary_stats,
)
from .toy import BatteryConfig, run_battery
from .vocab import RelationSpec, Vocabulary, load_relations, load_vocab, read_pairs, tokenize_relation

log = logging.getLogger("headmaps")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _load(args):
    if not args.model:
        raise UsageError("a model path is required")
    overrides = load_geometry_overrides(args.geometry) if args.geometry else None
    return load_model(args.model, args.adapter, overrides)


def _vocab(args, required: bool = True) -> Vocabulary | None:
    path = getattr(args, "vocab", None)
    if not path and args.model:
        root = Path(args.model)
        root = root if root.is_dir() else root.parent
        for name in ("vocab.json", "tokenizer.json"):
            if (root / name).exists():
                path = root / name
                break
    if not path:
        if required:
            raise UsageError("no vocabulary found; pass --vocab")
        return None
    return load_vocab(path)


def _heads(args, geometry) -> list[HeadRef]:
    if not args.heads:
        return geometry.heads()
    return parse_heads(args.heads, geometry.n_layers, geometry.n_heads)


def _one_head(args, geometry) -> HeadRef:
    head = HeadRef.parse(args.head)
    geometry.check_head(head)
    return head


def _relations(args, vocab):
    if args.pairs:
        spec = RelationSpec(args.relation or Path(args.pairs).stem, args.category, args.suppressive)
        return [tokenize_relation(vocab, spec, read_pairs(args.pairs))]
    if not args.manifest:
        raise UsageError("pass --manifest or --pairs")
    rels = load_relations(args.manifest, vocab)
    if getattr(args, "relation", None):
        rels = [r for r in rels if r.name == args.relation]
        if not rels:
            raise UsageError(f"relation {args.relation!r} not in manifest")
    return rels


# -- subcommands ---------------------------------------------------------------


def cmd_inspect(args):
    geometry, store = _load(args)
    d = {k: getattr(geometry, k) for k in geometry.__dataclass_fields__}
    d.update(
        source=store.source,
        default_policy=store.default_policy,
        has_first_mlp=store.mlp0 is not None,
        has_final_norm=store.final_norm is not None,
    )
    _emit(d, args.out)


def cmd_score(args):
    geometry, store = _load(args)
    vocab = _vocab(args)
    head = _one_head(args, geometry)
    circuit = store.circuit(head, args.policy)
    out = []
    for rel in _relations(args, vocab):
        dirs = ("suppress",) if rel.spec.suppressive else (args.direction,)
        for d in dirs:
            s = relation_score(circuit, rel, args.k, d, args.tau)
            out.append({
                "head": str(head), "relation": s.relation, "direction": d, "score": s.score,
                "k": s.k, "hits": s.hits, "n_pairs": s.n_pairs, "classified": s.classified,
            })
    _emit(out, args.out)


def _sweep_config(args) -> SweepConfig:
    overrides = {
        "model_path": args.model, "adapter": args.adapter, "vocab_path": args.vocab,
        "manifest_path": args.manifest, "geometry_path": args.geometry, "tau": args.tau,
        "directions": args.directions, "policy": args.policy, "heads": args.heads,
        "seed": args.seed, "workers": args.workers, "block_rows": args.block_rows,
        "checkpoint_dir": args.checkpoint_dir,
    }
    if args.k:
        overrides["k_overrides"] = dict(_kv(x) for x in args.k)
    if args.config:
        return SweepConfig.from_file(args.config, **overrides)
    return SweepConfig(**{k: v for k, v in overrides.items() if v is not None})


def _kv(text: str):
    name, sep, value = text.partition("=")
    if not sep:
        raise UsageError(f"--k expects NAME=K, got {text!r}")
    try:
        return name, int(value)
    except ValueError:
        raise UsageError(f"--k expects an integer, got {value!r}") from None


def cmd_sweep(args):
    config = _sweep_config(args)
    if not (config.model_path and config.vocab_path and config.manifest_path):
        raise UsageError("sweep needs a model, a vocabulary and a manifest (flags or --config)")
    result = run_sweep(config)
    report.write_result(result, args.out)
    counts = count_by_relation(result)
    print(f"{len(result.scores)} cells scored; classified heads per relation: {json.dumps(counts)}")


def cmd_classify(args):
    result = report.read_result(args.report)
    tau = args.tau
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = category_grid(result, tau)
    report.counts_csv(count_by_relation(result, tau, "promote"), out / "counts_promote.csv")
    report.counts_csv(count_by_relation(result, tau, "suppress"), out / "counts_suppress.csv")
    report.grid_csv(grid, out / "grid.csv")
    report.grid_svg(grid, out / "grid.svg")
    report.stats_json(summary_stats(result, tau), out / "stats.json")
    for r in result.relations:
        for d in r.directions:
            report.distribution_csv(score_distribution(result, r.name, d), out / f"dist_{r.name}_{d}.csv")
    print(f"wrote classification artifacts to {out}")


def cmd_saliency(args):
    geometry, store = _load(args)
    vocab = _vocab(args, required=False)
    head = _one_head(args, geometry)
    prof = saliency(store.circuit(head, args.policy))
    order = np.lexsort((np.arange(len(prof.sigma)), -prof.sigma))[: args.top]
    _emit({
        "head": str(head),
        "skewness": prof.skewness,
        "zero_norm_tokens": list(prof.zero_norm_tokens),
        "top": [
            {"id": int(i), "token": vocab[int(i)] if vocab else None, "sigma": float(prof.sigma[i])} for i in order
        ],
    }, args.out)


def _mapping_record(ms) -> dict:
    return {
        "head": str(ms.head),
        "entries": [
            {"id": e.source_id, "source": e.source, "sigma": e.sigma,
             "targets": [{"id": t[0], "token": t[1], "score": t[2]} for t in e.targets]}
            for e in ms.entries
        ],
    }


def cmd_salient_maps(args):
    geometry, store = _load(args)
    vocab = _vocab(args, required=False)
    head = _one_head(args, geometry)
    ms = salient_mappings(store.circuit(head, args.policy), args.k_tokens, args.n_targets, vocab)
    if args.prompt:
        sys.stdout.write(format_prompt(ms, args.n_targets) + "\n")
    else:
        _emit(_mapping_record(ms), args.out)


def cmd_describe(args):
    geometry, store = _load(args)
    vocab = _vocab(args)
    heads = _heads(args, geometry)
    endpoint = EndpointConfig(
        base_url=args.base_url, model=args.model_id, token_env=args.token_env, seed=args.seed,
        max_retries=args.max_retries, timeout=args.timeout, max_concurrent=args.workers,
    )
    transport = CannedTransport(args.canned) if args.canned else HTTPTransport(endpoint)
    responses = {}
    for h in heads:
        resp = describe_head(store.circuit(h, args.policy), endpoint, transport, vocab)
        if args.strict:
            resp = parse_response(resp.raw, strict=True)
        responses[h] = resp
    records = {str(h): r.to_record() for h, r in responses.items()}
    if args.report:
        report.append_descriptions(args.report, records)
    _emit({"descriptions": records, "identification_rate": {str(k): v for k, v in identification_rate(responses).items()}}, args.out)


def cmd_skewness(args):
    geometry, store = _load(args)
    out = {}
    for h in _heads(args, geometry):
        prof = saliency(store.circuit(h, args.policy))
        out[str(h)] = prof.skewness
    _emit(out, args.out)


def cmd_output_space(args):
    geometry, store = _load(args)
    out = {}
    for h in _heads(args, geometry):
        stats = ScanStats()
        frac = output_space_size(store.circuit(h, args.policy), args.block_rows, args.workers, stats)
        out[str(h)] = frac
        log.info("%s: output space %.4f (peak buffer %d entries)", h, frac, stats.peak_buffer_entries)
    _emit(out, args.out)


def cmd_baselines(args):
    """Random heads drawn from a layer's W_VO statistics, scored like real heads."""
    from .projector import random_baseline_heads

    geometry, store = _load(args)
    if not 0 <= args.layer < geometry.n_layers:
        raise UsageError(f"layer {args.layer} outside [0, {geometry.n_layers})")
    vocab = _vocab(args, required=bool(args.manifest or args.pairs))
    relations = _relations(args, vocab) if (args.manifest or args.pairs) else []
    rand = random_baseline_heads(store, args.layer, args.seed, args.n)
    base = store.circuit(HeadRef(args.layer, 0), args.policy)
    heads = []
    for i, w in enumerate(rand):
        c = base.with_vo(w)
        rec = {"index": i}
        prof = saliency(c)
        rec["skewness"] = prof.skewness
        if args.output_space:
            rec["output_space"] = output_space_size(c, args.block_rows, args.workers)
        rec["scores"] = {}
        for rel in relations:
            d = "suppress" if rel.spec.suppressive else "promote"
            rec["scores"][rel.name] = relation_score(c, rel, None, d, args.tau).score
        heads.append(rec)
    n_scores = sum(len(h["scores"]) for h in heads)
    n_cls = sum(v >= args.tau for h in heads for v in h["scores"].values())
    _emit({
        "layer": args.layer, "seed": args.seed, "n": len(heads), "tau": args.tau,
        "classified_fraction": n_cls / n_scores if n_scores else None,
        "heads": heads,
    }, args.out)


def cmd_toy(args):
    data = {}
    if args.toy_config:
        data = yaml.safe_load(Path(args.toy_config).read_text()) or {}
        if not isinstance(data, dict):
            raise DataError(f"{args.toy_config}: toy config must be a mapping")
    rep = run_battery(BatteryConfig.from_dict(data))
    _emit(rep.to_dict(), args.out)
    failed = [c for c in rep.checks if not c.passed]
    print(f"toy battery: {len(rep.checks) - len(failed)}/{len(rep.checks)} checks passed", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_DATA


def cmd_export(args):
    result = report.read_result(args.report)
    fmt = args.format
    if fmt == "json":
        report.write_result(result, args.out)
    elif fmt == "csv":
        report.scores_csv(result, args.out)
    elif fmt in ("grid-csv", "svg"):
        grid = category_grid(result, args.tau)
        (report.grid_csv if fmt == "grid-csv" else report.grid_svg)(grid, args.out)
    elif fmt == "stats":
        report.stats_json(summary_stats(result, args.tau), args.out)
    elif fmt == "counts":
        report.counts_csv(count_by_relation(result, args.tau, args.direction), args.out)
    elif fmt == "distribution":
        if not args.relation:
            raise UsageError("--format distribution needs --relation")
        report.distribution_csv(score_distribution(result, args.relation, args.direction), args.out)


# -- parser --------------------------------------------------------------------


def _model_args(p, required=True):
    p.add_argument("model", nargs=None if required else "?", help="safetensors file or shard directory")
    p.add_argument("--adapter", help="gpt2, gpt_neox, llama or generic (default: auto-detect)")
    p.add_argument("--geometry", help="YAML/JSON geometry overrides")
    p.add_argument("--policy", choices=("raw", "first-mlp"), help="embedding policy (default: the adapter's)")


def _relation_args(p):
    p.add_argument("--vocab", help="vocab.json or tokenizer.json")
    p.add_argument("--manifest", help="relation manifest (YAML/JSON)")
    p.add_argument("--pairs", help="a single TSV relation file instead of a manifest")
    p.add_argument("--relation", help="relation name (filters the manifest, or names --pairs)")
    p.add_argument("--category", default="custom")
    p.add_argument("--suppressive", action="store_true")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="worker threads")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("-o", "--out", default=argparse.SUPPRESS, help="output file (default: stdout)")

    parser = _Parser(prog="headmaps", description="Vocabulary-space analysis of attention-head OV circuits.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("inspect", parents=[common], help="dump model geometry")
    _model_args(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("score", parents=[common], help="relation score of one head")
    _model_args(p)
    _relation_args(p)
    p.add_argument("--head", required=True, help="L.H")
    p.add_argument("--k", type=int, help="top-k (default: the relation's k policy)")
    p.add_argument("--direction", choices=("promote", "suppress"), default="promote")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sweep", parents=[common], help="score every head on every relation")
    _model_args(p, required=False)
    p.add_argument("--config", help="sweep config file (YAML/JSON); flags override its fields")
    p.add_argument("--vocab")
    p.add_argument("--manifest")
    p.add_argument("--tau", type=float)
    p.add_argument("--k", action="append", metavar="NAME=K", help="per-relation k override (repeatable)")
    p.add_argument("--directions", choices=("promote", "suppress", "both"))
    p.add_argument("--heads", nargs="+", help="head selectors: L.H or whole layers L")
    p.add_argument("--block-rows", type=int)
    p.add_argument("--checkpoint-dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("classify", parents=[common], help="counts, category grid, stats and histograms from a report")
    p.add_argument("report")
    p.add_argument("--tau", type=float)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("saliency", parents=[common], help="per-token saliency of one head")
    _model_args(p)
    p.add_argument("--vocab")
    p.add_argument("--head", required=True)
    p.add_argument("--top", type=int, default=30)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("salient-maps", parents=[common], help="salient mappings of one head")
    _model_args(p)
    p.add_argument("--vocab")
    p.add_argument("--head", required=True)
    p.add_argument("--k-tokens", type=int, default=30)
    p.add_argument("--n-targets", type=int, default=5)
    p.add_argument("--prompt", action="store_true", help="print the description prompt instead of JSON")
    p.set_defaults(func=cmd_salient_maps)

    p = sub.add_parser("describe", parents=[common], help="describe heads through a chat-completion endpoint")
    _model_args(p)
    p.add_argument("--vocab")
    p.add_argument("--heads", nargs="+")
    p.add_argument("--base-url", default=EndpointConfig.base_url)
    p.add_argument("--model-id", default=EndpointConfig.model)
    p.add_argument("--token-env", default=EndpointConfig.token_env)
    p.add_argument("--max-retries", type=int, default=EndpointConfig.max_retries)
    p.add_argument("--timeout", type=float, default=EndpointConfig.timeout)
    p.add_argument("--canned", help="directory of canned responses keyed by request hash (no network)")
    p.add_argument("--report", help="sweep report to append descriptions to")
    p.add_argument("--strict", action="store_true", help="only an exact 'Unclear' means no pattern")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("skewness", parents=[common], help="input skewness of saliency per head")
    _model_args(p)
    p.add_argument("--heads", nargs="+")
    p.set_defaults(func=cmd_skewness)

    p = sub.add_parser("output-space", parents=[common], help="output-space size per head")
    _model_args(p)
    p.add_argument("--heads", nargs="+")
    p.add_argument("--block-rows", type=int, default=DEFAULT_BLOCK_ROWS)
    p.set_defaults(func=cmd_output_space)

    p = sub.add_parser("baselines", parents=[common], help="random-head baselines for one layer")
    _model_args(p)
    _relation_args(p)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--n", type=int, help="number of random heads (default: heads per layer)")
    p.add_argument("--output-space", action="store_true", help="also compute output-space size")
    p.add_argument("--block-rows", type=int, default=DEFAULT_BLOCK_ROWS)
    p.set_defaults(func=cmd_baselines)

    p = sub.add_parser("toy", parents=[common], help="run the planted-toy verification battery")
    p.add_argument("--toy-config", help="YAML/JSON battery config")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("export", parents=[common], help="re-export a sweep report")
    p.add_argument("report")
    p.add_argument("--format", required=True, choices=("json", "csv", "grid-csv", "svg", "stats", "counts", "distribution"))
    p.add_argument("--relation")
    p.add_argument("--direction", choices=("promote", "suppress"), default="promote")
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_export)
    return parser


# seed and workers stay None when not given so a sweep config file can supply them
_GLOBAL_DEFAULTS = {"seed": None, "workers": None, "verbose": False, "out": None}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for k, v in _GLOBAL_DEFAULTS.items():
            if not hasattr(args, k):
                setattr(args, k, v)
        if args.command in ("export", "sweep") and not args.out:
            parser.error(f"{args.command} needs --out")
        if args.workers is not None and args.workers < 1:
            parser.error("--workers must be >= 1")
    except SystemExit as exc:
        # argparse exits on --help (0) and on usage errors (1 via _Parser.error)
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.command != "sweep":
        args.seed = 0 if args.seed is None else args.seed
        args.workers = 1 if args.workers is None else args.workers
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"headmaps: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EndpointError as exc:
        print(f"headmaps: endpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (HeadmapsError, ValueError, KeyError, IndexError, yaml.YAMLError) as exc:
        print(f"headmaps: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        where = f" ({exc.filename})" if exc.filename else ""
        print(f"headmaps: I/O error: {exc.strerror or exc}{where}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
