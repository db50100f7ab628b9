"""Experiment protocols: few-shot grids, multi-task mixing, intermediate tuning,
prompt-length sweeps, and the on-disk checkpoint format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .data import (
    DELIMITERS,
    Dataset,
    Vocab,
    build_vocab,
    corpus_texts,
    import_canonical_json,
    import_e2e_csv,
    linearize,
    merge_datasets,
    sample_few_shot,
)
from .errors import CheckpointLoadError, ConfigurationError, CorruptionError, GridError
from .metrics import ALL_METRICS, MetricReport, evaluate_all
from .model import ArchitectureDims, Seq2SeqModel, resolve_dims
from .peft import (
    AttachedModel,
    FineTune,
    PeftConfig,
    PromptTuning,
    ScaledPromptTuning,
    attach,
    config_from_dict,
    default_learning_rate,
)
from .synthetic import make_kg_corpus, make_mr_corpus, make_pretraining_pairs
from .training import TrainSettings, dev_bleu, fit, generate, pretrain

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "peft-forge-checkpoint"
CHECKPOINT_VERSION = 1
WORKERS_ENV = "PEFTFORGE_WORKERS"


# --------------------------------------------------------------------------
# specs and results
# --------------------------------------------------------------------------


@dataclass
class ExperimentSpec:
    """One experiment cell: data, method, optimizer settings and replication counts.

    ``datasets`` entries are a canonical JSON path, a mapping of split name
    to E2E CSV path, or ``"synthetic:mr"`` / ``"synthetic:kg"`` (optionally
    suffixed ``:seed``). All entries are merged into one dataset.
    ``learning_rate=None`` picks the per-method default. ``backbone`` is an
    optional path to a FineTune checkpoint whose weights (and vocabulary)
    replace the randomly initialized backbone.
    """

    datasets: list
    peft: dict = field(default_factory=lambda: {"method": "scaled_prompt_tuning"})
    shots: Any = 8
    scheme: str | None = None
    sampling_reps: int = 3
    seeds: int = 3
    learning_rate: float | None = None
    max_steps: int = 2000
    batch_size: int = 8
    eval_every: int = 50
    dev_cap: int = 200
    max_decode_len: int = 64
    dims: Any = "toy"
    backbone: str | None = None
    backbone_seed: int = 0
    output_dir: str | None = None
    save_checkpoints: bool = False
    metrics: tuple = ALL_METRICS

    def __post_init__(self):
        if isinstance(self.datasets, (str, Mapping)):
            self.datasets = [self.datasets]
        self.datasets = list(self.datasets)
        self.metrics = tuple(self.metrics)
        self.validate()

    def validate(self) -> None:
        if not self.datasets:
            raise ConfigurationError("ExperimentSpec: at least one dataset is required")
        if self.sampling_reps < 1 or self.seeds < 1:
            raise ConfigurationError("ExperimentSpec: sampling_reps and seeds must be >= 1")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ConfigurationError(f"ExperimentSpec: learning rate must be > 0, got {self.learning_rate}")
        if self.shots != "all" and (not isinstance(self.shots, int) or self.shots < 1):
            raise ConfigurationError(f"ExperimentSpec: shots must be a positive int or 'all', got {self.shots!r}")
        if self.max_steps < 0 or self.batch_size < 1 or self.eval_every < 1 or self.dev_cap < 0:
            raise ConfigurationError("ExperimentSpec: max_steps >= 0, batch_size >= 1, eval_every >= 1, dev_cap >= 0")
        self.config  # validates the PEFT config

    @property
    def config(self) -> PeftConfig:
        return config_from_dict(self.peft)

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return float(self.learning_rate)
        names = " ".join(str(d).lower() for d in self.datasets)
        return default_learning_rate(self.config, "dart" if "dart" in names else "webnlg")

    def settings(self) -> TrainSettings:
        return TrainSettings(self.lr, self.max_steps, self.batch_size, self.eval_every, self.max_decode_len)

    def replace(self, **changes) -> "ExperimentSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["metrics"] = list(self.metrics)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"ExperimentSpec: unknown fields {sorted(unknown)}")
        return cls(**dict(d))

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        spec = cls.from_dict(doc)
        # relative dataset / backbone paths resolve against the spec file
        base = path.parent
        spec.datasets = [_resolve_entry(e, base) for e in spec.datasets]
        if spec.backbone and not Path(spec.backbone).is_absolute():
            spec.backbone = str(base / spec.backbone)
        return spec


def _resolve_entry(entry, base: Path):
    if isinstance(entry, str):
        if entry.startswith("synthetic:") or Path(entry).is_absolute():
            return entry
        return str(base / entry)
    return {k: (v if Path(v).is_absolute() else str(base / v)) for k, v in entry.items()}


@dataclass
class RunResult:
    """Outcome of one (sampling_rep, seed) run; ``wall_time`` is excluded from equality."""

    sampling_rep: int
    seed: int
    best_dev_bleu: float
    best_step: int
    test: dict
    losses: list
    dev_curve: list
    failed: bool = False
    failed_step: int | None = None
    n_train: int = 0
    label: str = ""
    wall_time: float = field(default=0.0, compare=False)

    @property
    def key(self) -> tuple:
        return (self.sampling_rep, self.seed)

    def metric_values(self) -> dict:
        out = {"dev_BLEU": self.best_dev_bleu}
        out.update(self.test.get("scores", {}))
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunResult":
        d = dict(d)
        d["dev_curve"] = [tuple(x) for x in d.get("dev_curve", [])]
        return cls(**d)


@dataclass
class GridReport:
    """Per-run results plus mean and standard error of every metric over non-failed runs."""

    runs: list
    mean: dict
    stderr: dict
    n_runs: int
    n_failed: int
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n_runs": self.n_runs,
            "n_failed": self.n_failed,
            "mean": self.mean,
            "stderr": self.stderr,
            "runs": [r.to_dict() for r in self.runs],
        }

    def summary(self) -> str:
        lines = [f"{self.label or 'grid'}: {self.n_runs} runs, {self.n_failed} failed"]
        for m in self.mean:
            lines.append(f"  {m:10s} {self.mean[m]:9.3f} +/- {self.stderr[m]:.3f}")
        return "\n".join(lines)


def aggregate(runs: Sequence[RunResult], label: str = "") -> GridReport:
    """Mean and standard error (``ddof=1``) per metric over the non-failed runs."""
    runs = sorted(runs, key=lambda r: r.key)
    ok = [r for r in runs if not r.failed]
    if not ok:
        raise GridError(f"all {len(runs)} runs failed")
    names = []
    for r in ok:
        names += [m for m in r.metric_values() if m not in names]
    mean, stderr = {}, {}
    for m in names:
        vals = np.array([r.metric_values()[m] for r in ok if m in r.metric_values()], dtype=np.float64)
        mean[m] = float(vals.mean())
        stderr[m] = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return GridReport(list(runs), mean, stderr, len(runs), len(runs) - len(ok), label)


# --------------------------------------------------------------------------
# data and model setup
# --------------------------------------------------------------------------


def load_dataset(entry) -> Dataset:
    """Load one ``datasets`` entry (see :class:`ExperimentSpec`)."""
    if isinstance(entry, Mapping):
        parts = [import_e2e_csv(p, split=s) for s, p in entry.items()]
        return merge_datasets(*parts)
    entry = str(entry)
    if entry.startswith("synthetic:"):
        bits = entry.split(":")
        seed = int(bits[2]) if len(bits) > 2 else 0
        if bits[1] == "mr":
            return make_mr_corpus(seed=seed)
        if bits[1] == "kg":
            return make_kg_corpus(seed=seed)
        raise ConfigurationError(f"unknown synthetic corpus {entry!r}")
    if entry.lower().endswith(".csv"):
        return import_e2e_csv(entry)
    return import_canonical_json(entry)


def load_spec_dataset(spec: ExperimentSpec) -> Dataset:
    sets = [load_dataset(e) for e in spec.datasets]
    return sets[0] if len(sets) == 1 else merge_datasets(*sets)


def check_delimiters(*datasets: Dataset) -> None:
    """Reference texts must not contain the reserved linearization delimiters."""
    for ds in datasets:
        for inst in ds:
            for ref in inst.references:
                clash = set(ref.split()) & set(DELIMITERS)
                if clash:
                    raise ConfigurationError(
                        f"dataset {ds.name!r} instance {inst.id}: reference uses reserved delimiter(s) {sorted(clash)}"
                    )


def shared_vocab(*datasets: Dataset) -> Vocab:
    check_delimiters(*datasets)
    texts = []
    for ds in datasets:
        texts += corpus_texts(ds)
    return build_vocab(texts)


def run_streams(sampling_rep: int, seed: int) -> dict:
    """Independent RNG streams derived from the run key."""
    ss = np.random.SeedSequence([int(seed), int(sampling_rep)])
    init, order = ss.spawn(2)
    return {"sample": 1000 + int(sampling_rep), "init": np.random.default_rng(init), "order": np.random.default_rng(order)}


def _vocab_for(spec: ExperimentSpec, *datasets: Dataset) -> Vocab:
    if spec.backbone:
        manifest = read_manifest(spec.backbone)
        vocab = Vocab.from_list(manifest["vocab"])
        missing = {t for ds in datasets for text in corpus_texts(ds) for t in text.split() if t not in vocab}
        if missing:
            logger.warning("%d corpus tokens are outside the backbone vocabulary and map to <unk>", len(missing))
        return vocab
    return shared_vocab(*datasets)


def build_backbone(spec: ExperimentSpec, vocab: Vocab) -> Seq2SeqModel:
    if spec.backbone:
        model, _, manifest = load_checkpoint(spec.backbone)
        if manifest["vocab_hash"] != vocab.digest():
            raise CheckpointLoadError(f"{spec.backbone}: vocabulary differs from the experiment vocabulary")
        return model
    dims = resolve_dims(spec.dims, vocab_size=len(vocab))
    return Seq2SeqModel(dims, seed=spec.backbone_seed)


def backbone_source(spec: ExperimentSpec) -> dict:
    return {"checkpoint": str(spec.backbone)} if spec.backbone else {"seed": int(spec.backbone_seed)}


def _train_subset(spec: ExperimentSpec, ds: Dataset, sampling_rep: int) -> list:
    if spec.shots == "all":
        return ds.split("train")
    return sample_few_shot(ds, spec.shots, run_streams(sampling_rep, 0)["sample"], spec.scheme)


def _dev(ds: Dataset, cap: int) -> list:
    return ds.split("dev")[:cap]


def evaluate_split(attached: AttachedModel, instances, vocab: Vocab, spec: ExperimentSpec) -> MetricReport:
    if not instances:
        return MetricReport(absent=list(spec.metrics))
    hyps = generate(attached, [linearize(i) for i in instances], vocab, spec.max_decode_len)
    return evaluate_all(hyps, [i.references for i in instances], spec.metrics)


def pretrain_backbone(targets: Sequence[Dataset], dims="toy", steps: int = 3000, lr: float = 1e-3,
                      batch_size: int = 16, seed: int = 0, n_mr: int = 1500, n_kg_per_category: int = 100) -> tuple:
    """Multi-task pretrain a backbone on tagged synthetic tasks.

    The vocabulary spans the pretraining pairs and every ``targets``
    corpus; target dev/test payloads are excluded from the pretraining
    draw. Returns ``(model, vocab, losses)`` with the backbone frozen.
    """
    held_out = [i.payload for ds in targets for i in ds if i.split != "train"]
    pairs = make_pretraining_pairs(n_mr, n_kg_per_category, seed=101 + seed, exclude=held_out)
    check_delimiters(*targets)
    texts = [t for pair in pairs for t in pair]
    for ds in targets:
        texts += corpus_texts(ds)
    vocab = build_vocab(texts)
    model = Seq2SeqModel(resolve_dims(dims, vocab_size=len(vocab)), seed=seed)
    losses = pretrain(model, pairs, vocab, steps, lr, batch_size, np.random.default_rng(seed))
    return model, vocab, losses


# --------------------------------------------------------------------------
# single runs and grids
# --------------------------------------------------------------------------


def _execute(spec, train_instances, dev_instances, vocab, sampling_rep, seed, attached=None, label=""):
    """Train one run. Returns (history, attached, wall time)."""
    streams = run_streams(sampling_rep, seed)
    if attached is None:
        attached = attach(build_backbone(spec, vocab), spec.config, streams["init"])
    t0 = time.perf_counter()
    hist = fit(attached, train_instances, dev_instances, vocab, spec.settings(), streams["order"])
    return hist, attached, time.perf_counter() - t0


def _result(hist, sampling_rep, seed, test_report, n_train, wall, label="") -> RunResult:
    return RunResult(
        sampling_rep=int(sampling_rep),
        seed=int(seed),
        best_dev_bleu=float(hist.best_bleu),
        best_step=int(hist.best_step),
        test=test_report.to_dict(),
        losses=[float(x) for x in hist.losses],
        dev_curve=[(int(s), float(b)) for s, b in hist.dev_bleu],
        failed=bool(hist.failed),
        failed_step=hist.failed_step,
        n_train=int(n_train),
        label=label,
        wall_time=float(wall),
    )


def _checkpoint_dir(spec: ExperimentSpec, tag: str, sampling_rep: int, seed: int) -> Path | None:
    if not spec.output_dir:
        return None
    return Path(spec.output_dir) / "checkpoints" / f"{tag}-rep{sampling_rep}-seed{seed}"


def train_run(spec: ExperimentSpec, sampling_rep: int, seed: int, vocab: Vocab | None = None,
              dataset: Dataset | None = None) -> RunResult:
    """Train and evaluate one (sampling_rep, seed) cell of ``spec``.

    The few-shot subset depends only on ``sampling_rep``; method
    initialization and batch order depend on both. Test metrics are
    computed at the best-dev-BLEU checkpoint.
    """
    ds = dataset if dataset is not None else load_spec_dataset(spec)
    vocab = vocab if vocab is not None else _vocab_for(spec, ds)
    train = _train_subset(spec, ds, sampling_rep)
    hist, attached, wall = _execute(spec, train, _dev(ds, spec.dev_cap), vocab, sampling_rep, seed)
    report = evaluate_split(attached, ds.split("test"), vocab, spec)
    ckpt = _checkpoint_dir(spec, "run", sampling_rep, seed)
    if ckpt is not None and spec.save_checkpoints:
        save_checkpoint(attached, ckpt, vocab, step=hist.best_step, dev_bleu=hist.best_bleu,
                        backbone=backbone_source(spec))
    return _result(hist, sampling_rep, seed, report, len(train), wall, ds.name)


def _run_keys(spec: ExperimentSpec) -> list:
    return [(r, s) for r in range(spec.sampling_reps) for s in range(spec.seeds)]


def _worker_count(n_jobs: int) -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, min(workers, n_jobs))


def _grid_job(args):
    spec_dict, vocab_items, rep, seed = args
    spec = ExperimentSpec.from_dict(spec_dict)
    return train_run(spec, rep, seed, Vocab.from_list(vocab_items))


def _map_runs(fn, jobs: list) -> list:
    workers = _worker_count(len(jobs))
    if workers == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def run_grid(spec: ExperimentSpec, vocab: Vocab | None = None, dataset: Dataset | None = None) -> GridReport:
    """Run every (sampling_rep, seed) pair and aggregate.

    Runs are independent; ``PEFTFORGE_WORKERS`` > 1 spreads them over
    worker processes without changing any number.
    """
    keys = _run_keys(spec)
    if dataset is not None or _worker_count(len(keys)) == 1:
        ds = dataset if dataset is not None else load_spec_dataset(spec)
        vocab = vocab if vocab is not None else _vocab_for(spec, ds)
        runs = [train_run(spec, r, s, vocab, ds) for r, s in keys]
    else:
        vocab = vocab if vocab is not None else _vocab_for(spec, load_spec_dataset(spec))
        runs = _map_runs(_grid_job, [(spec.to_dict(), vocab.to_list(), r, s) for r, s in keys])
    report = aggregate(runs, label=_label(spec))
    _persist(spec, runs, report)
    return report


def _label(spec: ExperimentSpec) -> str:
    return f"{spec.config.method}@{'+'.join(str(d) for d in spec.datasets)}"


def _persist(spec: ExperimentSpec, runs, report: GridReport, stem: str = "") -> None:
    if not spec.output_dir:
        return
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_results_jsonl(runs, out / f"{stem}results.jsonl")
    (out / f"{stem}grid_report.json").write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")


def write_results_jsonl(runs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in runs:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_results_jsonl(path) -> list:
    runs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                runs.append(RunResult.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ConfigurationError(f"{path} line {lineno}: not a RunResult record ({exc})") from None
    return runs


# --------------------------------------------------------------------------
# multi-task and intermediate protocols
# --------------------------------------------------------------------------


def multi_task_run(spec_a: ExperimentSpec, spec_b: ExperimentSpec | None = None) -> tuple:
    """Train one model per run on the mixed few-shot samples of both datasets.

    Optimizer settings and replication counts come from ``spec_a``. Returns
    one GridReport per dataset (a single-element tuple when ``spec_b`` is
    None, which reduces exactly to :func:`run_grid` on ``spec_a``).
    """
    specs = [spec_a] if spec_b is None else [spec_a, spec_b]
    if spec_b is not None and spec_a.shots != spec_b.shots:
        raise ConfigurationError(f"multi-task runs need equal shots, got {spec_a.shots} and {spec_b.shots}")
    sets = [load_spec_dataset(s) for s in specs]
    vocab = _vocab_for(spec_a, *sets)
    per_dataset: list = [[] for _ in specs]
    for rep, seed in _run_keys(spec_a):
        train, dev = [], []
        for spec, ds in zip(specs, sets):
            train += _train_subset(spec, ds, rep)
            dev += _dev(ds, spec.dev_cap)
        hist, attached, wall = _execute(spec_a, train, dev, vocab, rep, seed)
        for i, (spec, ds) in enumerate(zip(specs, sets)):
            report = evaluate_split(attached, ds.split("test"), vocab, spec)
            per_dataset[i].append(_result(hist, rep, seed, report, len(train), wall, ds.name))
    reports = []
    for i, (spec, runs) in enumerate(zip(specs, per_dataset)):
        label = _label(spec_a) if spec_b is None else f"multi-task:{_label(spec)}"
        rep = aggregate(runs, label=label)
        _persist(spec_a, runs, rep, stem="" if spec_b is None else f"multitask-{i}-")
        reports.append(rep)
    return tuple(reports)


@dataclass
class IntermediateReport:
    """Zero-shot transfer of each stage-1 checkpoint to B, and the stage-2 grid on B."""

    zero_shot: GridReport
    final: GridReport

    def to_dict(self) -> dict:
        return {"zero_shot": self.zero_shot.to_dict(), "final": self.final.to_dict()}


def intermediate_run(spec_first: ExperimentSpec, spec_second: ExperimentSpec, workdir=None) -> IntermediateReport:
    """Tune on A, then continue from the stage-1 best checkpoint on B.

    Stage 2 reloads the checkpoint from disk, so the zero-shot dev BLEU on
    B equals stage 2's step-0 dev BLEU. The vocabulary spans both corpora.
    """
    if spec_first.config != spec_second.config:
        raise ConfigurationError("intermediate tuning needs the same PEFT config in both stages")
    ds_a, ds_b = load_spec_dataset(spec_first), load_spec_dataset(spec_second)
    vocab = _vocab_for(spec_first, ds_a, ds_b)
    root = Path(workdir or spec_second.output_dir or spec_first.output_dir or ".peft-forge-intermediate")
    zero_runs, final_runs = [], []
    for rep, seed in _run_keys(spec_second):
        train_a = _train_subset(spec_first, ds_a, rep)
        hist_a, att_a, _ = _execute(spec_first, train_a, _dev(ds_a, spec_first.dev_cap), vocab, rep, seed)
        ckpt = root / "checkpoints" / f"stage1-rep{rep}-seed{seed}"
        save_checkpoint(att_a, ckpt, vocab, step=hist_a.best_step, dev_bleu=hist_a.best_bleu,
                        backbone=backbone_source(spec_first))
        _, att_b, _ = load_checkpoint(ckpt, vocab=vocab)
        dev_b = _dev(ds_b, spec_second.dev_cap)
        zero_dev = dev_bleu(att_b, dev_b, vocab, spec_second.max_decode_len)
        zero_test = evaluate_split(att_b, ds_b.split("test"), vocab, spec_second)
        zero_runs.append(RunResult(rep, seed, zero_dev, 0, zero_test.to_dict(), [], [(0, zero_dev)], n_train=0,
                                   label=f"zero-shot:{ds_b.name}"))
        train_b = _train_subset(spec_second, ds_b, rep)
        hist_b, att_b, wall = _execute(spec_second, train_b, dev_b, vocab, rep, seed, attached=att_b)
        report = evaluate_split(att_b, ds_b.split("test"), vocab, spec_second)
        final_runs.append(_result(hist_b, rep, seed, report, len(train_b), wall, ds_b.name))
    out = IntermediateReport(aggregate(zero_runs, "zero-shot"), aggregate(final_runs, "intermediate"))
    _persist(spec_second, zero_runs, out.zero_shot, stem="zero-shot-")
    _persist(spec_second, final_runs, out.final, stem="intermediate-")
    return out


def prompt_length_sweep(spec: ExperimentSpec, lengths: Sequence[int] = (10, 30, 50, 60)) -> dict:
    """One grid per prompt length; returns ``{length: GridReport}``."""
    cfg = spec.config
    if not isinstance(cfg, (PromptTuning, ScaledPromptTuning)):
        raise ConfigurationError(f"prompt-length sweep needs a prompt method, got {cfg.method}")
    out = {}
    for k in lengths:
        sub = spec.replace(peft={**cfg.to_dict(), "k": int(k)})
        if spec.output_dir:
            sub.output_dir = str(Path(spec.output_dir) / f"k{k}")
        out[int(k)] = run_grid(sub)
    return out


def sweep_table(reports: Mapping[int, GridReport]) -> str:
    lines = ["length      BLEU       TER"]
    for k, rep in sorted(reports.items()):
        lines.append(f"{k:6d} {rep.mean.get('BLEU', float('nan')):9.3f} {rep.mean.get('TER', float('nan')):9.3f}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(attached: AttachedModel, path, vocab: Vocab, step: int | None = None,
                    dev_bleu: float | None = None, backbone: Mapping | None = None) -> Path:
    """Write ``manifest.json`` and ``params.bin`` (little-endian float32) under ``path``.

    Method tensors are always stored; backbone tensors only under FineTune.
    Otherwise ``backbone`` (``{"seed": s}`` or ``{"checkpoint": path}``)
    records how to rebuild the frozen weights.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    full = isinstance(attached.config, FineTune)
    if not full and backbone is None:
        raise ConfigurationError("save_checkpoint: non-FineTune checkpoints need a backbone source")
    groups = [("method", attached.params)]
    if full:
        groups.insert(0, ("backbone", attached.backbone.params))
    entries, chunks, offset = [], [], 0
    for group, tensors in groups:
        for name, t in tensors.items():
            raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            entries.append({"name": name, "group": group, "shape": list(t.shape), "offset": offset,
                            "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": attached.backbone.dims.to_dict(),
        "config": attached.config.to_dict(),
        "vocab_hash": vocab.digest(),
        "vocab": vocab.to_list(),
        "step": step,
        "dev_bleu": None if dev_bleu is None or not math.isfinite(dev_bleu) else float(dev_bleu),
        "backbone": {"included": True} if full else dict(backbone),
        "dtype": "float32-le",
        "payload_bytes": len(payload),
        "sha256": _sha256(payload),
        "tensors": entries,
    }
    (path / "params.bin").write_bytes(payload)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise CheckpointLoadError(f"{path}: no manifest.json")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{mpath}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointLoadError(f"{mpath}: unsupported checkpoint format/version")
    return manifest


def _read_arrays(path: Path, manifest: dict) -> dict:
    payload = (path / "params.bin").read_bytes() if (path / "params.bin").exists() else None
    if payload is None:
        raise CorruptionError(f"{path}: params.bin missing")
    if len(payload) != manifest["payload_bytes"]:
        raise CorruptionError(f"{path}: payload has {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    if _sha256(payload) != manifest["sha256"]:
        raise CorruptionError(f"{path}: payload checksum mismatch")
    arrays = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 4 * count or e["offset"] + e["nbytes"] > len(payload):
            raise CorruptionError(f"{path}: tensor {e['name']} has an inconsistent byte range")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = (e["group"], arr.astype(np.float32))
    return arrays


def load_checkpoint(path, backbone: Seq2SeqModel | None = None, vocab: Vocab | None = None,
                    dims: ArchitectureDims | None = None, config: PeftConfig | None = None) -> tuple:
    """Rebuild ``(model, attached, manifest)`` from a checkpoint directory.

    Optional ``vocab`` / ``dims`` / ``config`` are checked against the
    manifest. ``backbone`` overrides the recorded backbone source for
    non-FineTune checkpoints.
    """
    path = Path(path)
    manifest = read_manifest(path)
    m_dims = ArchitectureDims.from_dict(manifest["dims"])
    m_cfg = config_from_dict(manifest["config"])
    if vocab is not None and vocab.digest() != manifest["vocab_hash"]:
        raise CheckpointLoadError(f"{path}: vocabulary hash mismatch")
    if dims is not None and dims != m_dims:
        raise CheckpointLoadError(f"{path}: dims mismatch: checkpoint {m_dims} vs expected {dims}")
    if config is not None and config != m_cfg:
        raise CheckpointLoadError(f"{path}: config mismatch: checkpoint {m_cfg} vs expected {config}")
    if _sha256("\n".join(manifest["vocab"]).encode("utf-8")) != manifest["vocab_hash"]:
        raise CorruptionError(f"{path}: stored vocabulary does not match its hash")
    arrays = _read_arrays(path, manifest)
    src = manifest["backbone"]
    if src.get("included"):
        model = Seq2SeqModel(m_dims, seed=0)
    elif backbone is not None:
        model = backbone
    elif "seed" in src:
        model = Seq2SeqModel(m_dims, seed=int(src["seed"]))
    elif "checkpoint" in src:
        model, _, _ = load_checkpoint(src["checkpoint"])
    else:
        raise CheckpointLoadError(f"{path}: manifest has no usable backbone source")
    if model.dims != m_dims:
        raise CheckpointLoadError(f"{path}: backbone dims {model.dims} differ from checkpoint dims {m_dims}")
    backbone_state = {n: a for n, (g, a) in arrays.items() if g == "backbone"}
    if src.get("included"):
        if set(backbone_state) != set(model.params):
            raise CorruptionError(f"{path}: backbone tensor names do not match the architecture")
        model.load_state_dict(backbone_state)
    attached = attach(model, m_cfg, 0)
    method_state = {n: a for n, (g, a) in arrays.items() if g == "method"}
    if set(method_state) != set(attached.params):
        raise CorruptionError(f"{path}: method tensor names do not match config {m_cfg.method}")
    attached.load_state_dict(method_state)
    return model, attached, manifest
