"""Command-line entry point.

Commands: validate-data, stats, extract-demo, import-embeddings, train,
evaluate, analyze, export-pca. Results go to stdout, diagnostics to stderr.
Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric error.
Flag precedence: command line > config file > built-in defaults. `--seed`
fully determines every stochastic choice a command makes.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, kgdata, toy
from .errors import DataError, NumericError, UsageError
from .gnn import load_checkpoint, make_example, example_forward, save_checkpoint
from .kgdata import build_type_index, load_bundle, stats_dict, validate_inductive
from .semantic import AGGREGATIONS, DEFAULT_PROMPT_STRINGS, EmbeddingStore
from .subgraph import extract_enclosing
from .train import TrainConfig, fit, parse_config_file


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: _Parser) -> None:
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--inference-data", help="inductive counterpart directory (default: <data>_ind if present)")
    p.add_argument("--embeddings", help="embedding store directory")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--no-semantic", action="store_true", help="structure-only mode (zeroed semantic block)")
    p.add_argument("--aggregation", choices=AGGREGATIONS, help="prompt aggregation strategy")
    p.add_argument("--runs", type=int, default=5, help="evaluation runs to average")
    p.add_argument("--yago-mode", action="store_true",
                   help="leave-one-out inference over the test graph")


def build_parser() -> _Parser:
    parser = _Parser(prog="kglp", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("validate-data", "check the inductive split and label coverage"),
        ("stats", "per-split entity/relation/triple counts and density"),
        ("extract-demo", "dump one enclosing subgraph as JSON"),
        ("import-embeddings", "validate an embedding store against a dataset"),
        ("train", "train a model and write a checkpoint"),
        ("evaluate", "rank the test split and report MRR / Hits@K"),
        ("analyze", "evaluation plus type/structural sparsity buckets"),
        ("export-pca", "project final-layer candidate embeddings to 2-D CSV"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "extract-demo":
            p.add_argument("--u", required=True, help="head entity")
            p.add_argument("--v", required=True, help="tail entity")
            p.add_argument("--rel", help="target relation to mask (optional)")
            p.add_argument("--k", type=int, default=3, help="hop budget")
        if name in ("evaluate", "analyze", "export-pca"):
            p.add_argument("--checkpoint", required=True, help="checkpoint directory")
            p.add_argument("--records", help="write per-task JSON-lines here")
        if name == "export-pca":
            p.add_argument("--head", required=True)
            p.add_argument("--rel", required=True)
            p.add_argument("--tail", required=True)
            p.add_argument("--side", choices=(evaluation.HEAD, evaluation.TAIL), default=evaluation.TAIL)
        if name == "train":
            # TrainConfig fields are adjustable one-to-one.
            p.add_argument("--lr", type=float)
            p.add_argument("--epochs", type=int)
            p.add_argument("--patience", type=int)
            p.add_argument("--batch", type=int)
            p.add_argument("--margin", type=float)
            p.add_argument("--hops", type=int)
            p.add_argument("--negatives", type=int)
    return parser


def _resolve_dirs(args) -> tuple[Path, Path | None]:
    if not args.data:
        raise UsageError("--data is required for this command")
    data_dir = Path(args.data)
    if args.inference_data:
        return data_dir, Path(args.inference_data)
    if args.yago_mode:
        return data_dir, None
    sibling = data_dir.parent / (data_dir.name + "_ind")
    return data_dir, sibling if sibling.is_dir() else None


def _load(args):
    data_dir, inf_dir = _resolve_dirs(args)
    return load_bundle(data_dir, inf_dir)


def _train_config(args) -> TrainConfig:
    values: dict = {}
    if args.config:
        values.update(parse_config_file(args.config))
    for key in ("lr", "epochs", "patience", "batch", "margin", "hops", "negatives", "seed", "threads"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if args.aggregation:
        values["aggregation"] = args.aggregation
    if args.no_semantic:
        values["semantic_enabled"] = False
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**values)


def _load_store(args) -> EmbeddingStore | None:
    if not args.embeddings:
        return None
    return EmbeddingStore.load(args.embeddings)


def cmd_validate_data(args) -> int:
    bundle = _load(args)
    report = validate_inductive(bundle.train, bundle.test)
    print(kgdata.report_json(report, bundle.vocab, bundle.missing_labels))
    return 0


def cmd_stats(args) -> int:
    bundle = _load(args)
    out = {
        "train": stats_dict(bundle.train),
        "valid": stats_dict(bundle.valid),
        "test": stats_dict(bundle.test),
        "inference": stats_dict(bundle.inference),
        "labels": len(bundle.labels),
        "type_links": sum(len(v) for v in bundle.type_links.values()),
        "ontology_triples": len(bundle.ontology),
    }
    print(json.dumps(out, indent=2))
    return 0


def cmd_extract_demo(args) -> int:
    if args.data:
        bundle = _load(args)
        graph, vocab = bundle.train, bundle.vocab
    else:
        graph, vocab = toy.demo_graph(args.seed)
        print("no --data given: using the bundled toy graph", file=sys.stderr)
    for name in (args.u, args.v):
        if name not in vocab.entity_ids:
            raise DataError(f"unknown entity {name!r}")
    rel = None
    if args.rel is not None:
        if args.rel not in vocab.relation_ids:
            raise DataError(f"unknown relation {args.rel!r}")
        rel = vocab.relation_ids[args.rel]
    sg = extract_enclosing(graph, vocab.entity_ids[args.u], rel, vocab.entity_ids[args.v], args.k)
    print(json.dumps(sg.to_json_dict(vocab.entity_names, vocab.relation_names), indent=2))
    return 0


def cmd_import_embeddings(args) -> int:
    if not args.embeddings:
        raise UsageError("--embeddings is required")
    store = EmbeddingStore.load(args.embeddings)
    if store.manifest.mode not in ("mlm", "clm"):
        raise DataError(f"manifest mode must be mlm or clm, got {store.manifest.mode!r}")
    if store.manifest.prompts != DEFAULT_PROMPT_STRINGS:
        print("warning: store prompts differ from the default prompt set", file=sys.stderr)
    names = None
    if args.data:
        bundle = _load(args)
        names = [bundle.vocab.entity_names[e] for e in sorted(bundle.train.entities | bundle.inference.entities)]
    else:
        names = list(store.entities)
    cov = store.coverage(names)
    print(f"model: {store.manifest.model}")
    print(f"mode: {store.manifest.mode}")
    print(f"dim: {store.dim}")
    print(f"records: {len(store.vectors)}")
    print(f"coverage: {100.0 * cov:.2f}% of {len(names)} entities x {store.num_prompts} prompts")
    return 0


def cmd_train(args) -> int:
    bundle = _load(args)
    config = _train_config(args)
    store = _load_store(args)
    if config.semantic_enabled and store is None:
        raise UsageError("training with semantics needs --embeddings (or pass --no-semantic)")
    out_dir = Path(args.out) if args.out else Path("run")
    out_dir.mkdir(parents=True, exist_ok=True)
    model, records = fit(bundle, config, store, log_path=out_dir / "train_log.jsonl")
    save_checkpoint(out_dir / "checkpoint", model)
    print(json.dumps({
        "checkpoint": str(out_dir / "checkpoint"),
        "validation_events": len(records),
        "best_val_mrr": max((r.val_mrr for r in records), default=None),
    }, indent=2))
    return 0


def _evaluate(args, with_buckets: bool):
    bundle = _load(args)
    model = load_checkpoint(args.checkpoint)
    store = _load_store(args)
    if model.hyper.semantic_enabled and store is None:
        raise UsageError("this checkpoint needs --embeddings")
    type_index = build_type_index(bundle.type_links) if with_buckets else None
    report, all_records = evaluation.evaluate(
        model, store, bundle.inference, bundle.test.triples, bundle.vocab.entity_names,
        runs=args.runs, base_seed=args.seed, threads=args.threads,
        leave_one_out=args.yago_mode, type_index=type_index,
    )
    if args.records:
        with open(args.records, "w", encoding="utf-8") as f:
            for run_records in all_records:
                for r in run_records:
                    group = type_index.group(r.known_entity) if type_index else None
                    f.write(json.dumps(r.to_json_dict(bundle.vocab.entity_names,
                                                      bundle.vocab.relation_names, group)) + "\n")
    return report


def cmd_evaluate(args) -> int:
    report = _evaluate(args, with_buckets=False)
    print(report.to_json())
    print(report.table(), file=sys.stderr)
    return 0


def cmd_analyze(args) -> int:
    report = _evaluate(args, with_buckets=True)
    print(report.to_json())
    print(report.table(), file=sys.stderr)
    return 0


def cmd_export_pca(args) -> int:
    bundle = _load(args)
    model = load_checkpoint(args.checkpoint)
    store = _load_store(args)
    if model.hyper.semantic_enabled and store is None:
        raise UsageError("this checkpoint needs --embeddings")
    vocab = bundle.vocab
    for name in (args.head, args.tail):
        if name not in vocab.entity_ids:
            raise DataError(f"unknown entity {name!r}")
    if args.rel not in vocab.relation_ids:
        raise DataError(f"unknown relation {args.rel!r}")
    triple = kgdata.Triple(vocab.entity_ids[args.head], vocab.relation_ids[args.rel],
                           vocab.entity_ids[args.tail])
    graph = bundle.inference
    task = evaluation.generate_candidates(
        graph, triple, args.side, n=50,
        rng=evaluation.task_rng(args.seed, 0, triple, args.side),
    )
    anchor_local = 0 if args.side == evaluation.HEAD else 1

    names, vectors = [], []
    loo = (triple.as_tuple(),) if args.yago_mode else ()
    for entity in [triple.head if args.side == evaluation.HEAD else triple.tail] + task.candidates:
        cand = task.candidate_triple(entity)
        sg = extract_enclosing(graph, cand.head, cand.rel, cand.tail, model.hyper.k, extra_masked=loo)
        ex = make_example(sg, vocab.entity_names, model.hyper.num_relations)
        trace = example_forward(model, store, ex)
        local = anchor_local if sg.num_nodes > 1 else 0
        vectors.append(trace.layers[-1].H_out[local])
        names.append(vocab.entity_names[entity])
    coords, explained, degenerate = evaluation.pca_project(np.array(vectors))
    writer = csv.writer(sys.stdout)
    writer.writerow(["entity", "x", "y"])
    for name, (x, y) in zip(names, coords):
        writer.writerow([name, f"{x:.6f}", f"{y:.6f}"])
    msg = f"explained variance: {explained[0]:.3f}, {explained[1]:.3f}"
    if degenerate:
        msg += " (degenerate input)"
    print(msg, file=sys.stderr)
    return 0


COMMANDS = {
    "validate-data": cmd_validate_data,
    "stats": cmd_stats,
    "extract-demo": cmd_extract_demo,
    "import-embeddings": cmd_import_embeddings,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "export-pca": cmd_export_pca,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
