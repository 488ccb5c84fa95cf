"""Command-line interface: `extract` writes an embedding store from a
labels file; `rank-triples` scores verbalized triples by negated
perplexity. Exit codes: 0 ok, 1 usage error, 2 job/data error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .extract import ExtractionJob, JobError, extract, read_labels
from .perplexity import load_causal_backend, perplexity_rank
from .prompts import MODE_CLM, MODE_MLM


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plm-extract", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="write an embedding store from entity labels")
    p.add_argument("--model", required=True, help="model identifier or local path")
    p.add_argument("--mode", required=True, choices=(MODE_MLM, MODE_CLM))
    p.add_argument("--labels", required=True, help="labels.tsv (entity<TAB>label)")
    p.add_argument("--out", required=True, help="output store directory")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-length", type=int, default=None)

    p = sub.add_parser("rank-triples", help="score verbalized triples by negated perplexity")
    p.add_argument("--model", required=True, help="causal model identifier or local path")
    p.add_argument("--labels", required=True, help="labels.tsv (entity<TAB>label)")
    p.add_argument("--triples", required=True, help="TSV of head<TAB>relation<TAB>tail")
    p.add_argument("--out", default=None, help="write scores TSV here instead of stdout")
    return parser


def cmd_extract(args) -> int:
    job = ExtractionJob(
        model=args.model, mode=args.mode, labels=read_labels(args.labels),
        out_dir=args.out, batch_size=args.batch_size, max_length=args.max_length,
    )
    out = extract(job)
    n = len(job.labels) * len(job.prompts)
    print(f"wrote {n} records for {len(job.labels)} entities to {out}")
    return 0


def cmd_rank_triples(args) -> int:
    labels = read_labels(args.labels)
    triples = []
    path = Path(args.triples)
    if not path.is_file():
        raise JobError(f"triples file not found: {path}")
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise JobError(f"{path}:{lineno}: expected `head<TAB>relation<TAB>tail`")
        triples.append(tuple(parts))
    tokenizer, model = load_causal_backend(args.model)
    scored = perplexity_rank(tokenizer, model, triples, labels)
    lines = [f"{s.head}\t{s.rel}\t{s.tail}\t{s.score:.6f}" for s in scored]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        for line in lines:
            print(line)
    return 0


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        if args.command == "extract":
            return cmd_extract(args)
        return cmd_rank_triples(args)
    except JobError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
