"""Command-line entry point: ``peft-forge <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .audit import audit_report, count_trainable
from .data import SCHEMES, Dataset, export_canonical_json, linearize, sample_few_shot
from .errors import PeftForgeError
from .harness import (
    ExperimentSpec,
    aggregate,
    intermediate_run,
    load_dataset,
    multi_task_run,
    pretrain_backbone,
    prompt_length_sweep,
    read_results_jsonl,
    run_grid,
    save_checkpoint,
    sweep_table,
    train_run,
)
from .metrics import ALL_METRICS, evaluate_all, external_scores
from .model import resolve_dims
from .peft import FineTune, attach, config_from_dict, standard_configs

logger = logging.getLogger("peft_forge")


def _json_arg(text: str):
    """Inline JSON, or a path to a JSON file."""
    p = Path(text)
    if p.exists():
        return json.loads(p.read_text(encoding="utf-8"))
    return json.loads(text)


def _dims_arg(text: str):
    try:
        return resolve_dims(text)
    except PeftForgeError:
        return resolve_dims(_json_arg(text))


def _emit(obj, out: str | None = None) -> None:
    text = obj if isinstance(obj, str) else json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_count_params(args) -> int:
    dims = _dims_arg(args.dims)
    if args.standard:
        report = audit_report(standard_configs(dims), dims, args.base)
        _emit(report["text"] if args.text else report["rows"], args.out)
        return 0
    if not args.config:
        raise SystemExit("count-params: --config or --standard is required")
    cb = count_trainable(config_from_dict(_json_arg(args.config)), dims, args.base)
    _emit(cb.to_dict(), args.out)
    return 0


def cmd_linearize(args) -> int:
    ds = load_dataset(args.input)
    lines = [json.dumps({"id": i.id, "text": linearize(i)}) if args.jsonl else linearize(i) for i in ds]
    _emit("\n".join(lines), args.out)
    return 0


def cmd_sample(args) -> int:
    ds = load_dataset(args.input)
    picked = sample_few_shot(ds, args.shots, args.seed, args.scheme)
    if args.out:
        export_canonical_json(Dataset(picked, name=f"{ds.name}-{args.shots}shot"), args.out)
    else:
        print("\n".join(f"{i.stratum}\t{i.id}" for i in picked))
    logger.info("sampled %d instances", len(picked))
    return 0


def _read_lines(path) -> list:
    return Path(path).read_text(encoding="utf-8").splitlines()


def _reference_sets(paths, n: int) -> list:
    if len(paths) == 1 and paths[0].endswith(".json"):
        sets = json.loads(Path(paths[0]).read_text(encoding="utf-8"))
        sets = [[r] if isinstance(r, str) else list(r) for r in sets]
    else:
        streams = [_read_lines(p) for p in paths]
        for p, s in zip(paths, streams):
            if len(s) != n:
                raise SystemExit(f"eval: {p} has {len(s)} lines, candidates have {n}")
        sets = [[s[i] for s in streams if s[i].strip()] for i in range(n)]
    if len(sets) != n:
        raise SystemExit(f"eval: {len(sets)} reference sets for {n} candidates")
    return sets


def cmd_eval(args) -> int:
    cands = _read_lines(args.cands)
    refs = _reference_sets(args.refs, len(cands))
    metrics = tuple(args.metrics.split(",")) if args.metrics else ALL_METRICS
    report = evaluate_all(cands, refs, metrics)
    if args.external:
        report.merge(external_scores(args.external))
    _emit(report.to_dict(), args.out)
    return 0


def _spec(path, output_dir=None) -> ExperimentSpec:
    spec = ExperimentSpec.from_json(path)
    if output_dir:
        spec.output_dir = output_dir
    return spec


def cmd_train(args) -> int:
    spec = _spec(args.spec, args.output_dir)
    if args.save_checkpoint:
        spec.save_checkpoints = True
    result = train_run(spec, args.rep, args.seed)
    _emit(result.to_dict(), args.out)
    return 0 if not result.failed else 1


def cmd_grid(args) -> int:
    report = run_grid(_spec(args.spec, args.output_dir))
    print(report.summary())
    return 0


def cmd_multitask(args) -> int:
    a, b = _spec(args.spec_a, args.output_dir), _spec(args.spec_b)
    for rep in multi_task_run(a, b):
        print(rep.summary())
    return 0


def cmd_intermediate(args) -> int:
    first, second = _spec(args.first), _spec(args.second, args.output_dir)
    out = intermediate_run(first, second)
    print(out.zero_shot.summary())
    print(out.final.summary())
    return 0


def cmd_sweep(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
    reports = prompt_length_sweep(_spec(args.spec, args.output_dir), lengths)
    print(sweep_table(reports))
    return 0


def cmd_report(args) -> int:
    report = aggregate(read_results_jsonl(args.input), label=Path(args.input).stem)
    if args.json:
        _emit({k: v for k, v in report.to_dict().items() if k != "runs"}, args.out)
    else:
        _emit(report.summary(), args.out)
    return 0


def cmd_pretrain(args) -> int:
    targets = [load_dataset(t) for t in args.target]
    model, vocab, losses = pretrain_backbone(targets, _dims_arg(args.dims), args.steps, args.lr, args.batch_size,
                                             args.seed)
    save_checkpoint(attach(model, FineTune()), args.out, vocab, step=args.steps)
    print(f"pretrained {args.steps} steps, final loss {losses[-1]:.4f}; checkpoint at {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="peft-forge", description="PEFT methods, data-to-text pipeline and metrics.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("count-params", help="closed-form trainable-parameter count")
    s.add_argument("--config", help="PEFT config JSON (inline or file)")
    s.add_argument("--dims", default="t5-large", help="preset name or dims JSON")
    s.add_argument("--base", type=int, default=None, help="denominator for percentages")
    s.add_argument("--standard", action="store_true", help="report every standard configuration")
    s.add_argument("--text", action="store_true", help="with --standard, print the formatted table")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_count_params)

    s = sub.add_parser("linearize", help="linearize every instance of a dataset")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--jsonl", action="store_true")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_linearize)

    s = sub.add_parser("sample", help="stratified few-shot sample")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--shots", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scheme", choices=SCHEMES, default=None)
    s.add_argument("--out", help="write the sample as canonical JSON")
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("eval", help="score candidates against references")
    s.add_argument("--cands", required=True)
    s.add_argument("--refs", required=True, nargs="+", help="one file per reference stream, or one JSON list")
    s.add_argument("--metrics", help="comma-separated subset")
    s.add_argument("--external", help="external scorer JSON to merge")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("train", help="one (sampling_rep, seed) run")
    s.add_argument("--spec", required=True)
    s.add_argument("--rep", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output-dir")
    s.add_argument("--save-checkpoint", action="store_true")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("grid", help="sampling_reps x seeds grid")
    s.add_argument("--spec", required=True)
    s.add_argument("--output-dir")
    s.set_defaults(fn=cmd_grid)

    s = sub.add_parser("multitask", help="mixed two-dataset tuning")
    s.add_argument("--spec-a", required=True)
    s.add_argument("--spec-b", required=True)
    s.add_argument("--output-dir")
    s.set_defaults(fn=cmd_multitask)

    s = sub.add_parser("intermediate", help="tune on the first dataset, then the second")
    s.add_argument("--first", required=True)
    s.add_argument("--second", required=True)
    s.add_argument("--output-dir")
    s.set_defaults(fn=cmd_intermediate)

    s = sub.add_parser("sweep", help="prompt-length sweep")
    s.add_argument("--spec", required=True)
    s.add_argument("--lengths", default="10,30,50,60")
    s.add_argument("--output-dir")
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("report", help="aggregate a results JSONL file")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--json", action="store_true")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("pretrain", help="multi-task pretrain a backbone on synthetic tasks")
    s.add_argument("--target", nargs="+", default=["synthetic:mr"], help="corpora whose vocabulary must be covered")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--dims", default="toy")
    s.add_argument("--steps", type=int, default=3000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_pretrain)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except PeftForgeError as exc:
        print(f"peft-forge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
