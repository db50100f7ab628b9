import json

import numpy as np
import pytest

from peft_forge import harness as H
from peft_forge.data import Dataset, Instance, build_vocab, export_canonical_json, merge_datasets
from peft_forge.errors import CheckpointLoadError, ConfigurationError, CorruptionError, GridError
from peft_forge.harness import ExperimentSpec, RunResult
from peft_forge.model import PRESETS, Seq2SeqModel, forward_logits, make_batch
from peft_forge.peft import FineTune, LoRA, ScaledPromptTuning, attach, trainable_count
from peft_forge.synthetic import make_kg_corpus, make_mr_corpus
from peft_forge.training import TrainSettings, fit

FAST = dict(shots=2, sampling_reps=1, seeds=1, max_steps=6, batch_size=4, eval_every=3, dev_cap=4,
            max_decode_len=6, dims="tiny", learning_rate=1e-2, metrics=("BLEU", "TER"))


@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpora")
    mr = make_mr_corpus(24, 4, 4, seed=0)
    mr2 = make_mr_corpus(24, 4, 4, seed=9)
    kg = make_kg_corpus(6, 2, 2, seed=0, categories=["Airport", "City"])
    paths = {}
    for name, ds in (("mr", mr), ("mr2", mr2), ("kg", kg)):
        paths[name] = str(root / f"{name}.json")
        export_canonical_json(ds, paths[name])
    return paths


def fast_spec(path, **kw):
    return ExperimentSpec(datasets=[path], peft=kw.pop("peft", {"method": "lora", "rank": 2}), **{**FAST, **kw})


def run(sampling_rep=0, seed=0, bleu=10.0, failed=False, ter=0.5):
    return RunResult(sampling_rep, seed, bleu, 3, {"scores": {"BLEU": bleu, "TER": ter}}, [1.0], [(0, bleu)],
                     failed=failed)


# -- spec ---------------------------------------------------------------------------


def test_spec_defaults_and_validation():
    spec = ExperimentSpec(datasets="synthetic:mr")
    assert (spec.sampling_reps, spec.seeds, spec.batch_size, spec.max_steps, spec.eval_every, spec.dev_cap) == (
        3, 3, 8, 2000, 50, 200)
    assert spec.lr == 0.5 and spec.config == ScaledPromptTuning()
    for bad in (dict(sampling_reps=0), dict(seeds=0), dict(learning_rate=0.0), dict(shots=0), dict(shots="some"),
                dict(peft={"method": "nope"}), dict(datasets=[])):
        with pytest.raises(ConfigurationError):
            ExperimentSpec(**{"datasets": "synthetic:mr", **bad})


def test_spec_dart_learning_rate():
    assert ExperimentSpec(datasets="data/dart.json", peft={"method": "lora"}).lr == 5e-4


def test_spec_json_round_trip(tmp_path):
    spec = ExperimentSpec(datasets=["a.json"], peft={"method": "lora", "rank": 4}, shots="all")
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    back = ExperimentSpec.from_json(path)
    assert back.datasets == [str(tmp_path / "a.json")]
    assert back.config == LoRA(rank=4) and back.shots == "all"


def test_spec_json_errors(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"datasets": ["a.json"], "epochs": 3}))
    with pytest.raises(ConfigurationError, match="epochs"):
        ExperimentSpec.from_json(path)
    path.write_text("{\n bad")
    with pytest.raises(ConfigurationError, match="line 2"):
        ExperimentSpec.from_json(path)


# -- aggregation -----------------------------------------------------------------------


def test_aggregate_constant_metric():
    rep = H.aggregate([run(r, s, bleu=42.0) for r in range(3) for s in range(3)])
    assert rep.mean["BLEU"] == 42.0 and rep.stderr["BLEU"] == 0.0 and rep.n_runs == 9


def test_aggregate_single_run():
    rep = H.aggregate([run(bleu=17.5)])
    assert rep.mean["BLEU"] == 17.5 and rep.stderr["BLEU"] == 0.0


def test_aggregate_stderr_and_reorder():
    runs = [run(0, i, bleu=v) for i, v in enumerate([10.0, 20.0, 30.0, 50.0])]
    a = H.aggregate(runs)
    b = H.aggregate(runs[::-1])
    vals = np.array([10.0, 20.0, 30.0, 50.0])
    assert a.mean["BLEU"] == pytest.approx(vals.mean())
    assert a.stderr["BLEU"] == pytest.approx(vals.std(ddof=1) / 2)
    assert a.mean == b.mean and a.stderr == b.stderr


def test_aggregate_excludes_failed_runs():
    rep = H.aggregate([run(0, 0, 10.0), run(0, 1, 90.0, failed=True)])
    assert rep.mean["BLEU"] == 10.0 and rep.n_failed == 1 and rep.n_runs == 2
    with pytest.raises(GridError):
        H.aggregate([run(failed=True)])


def test_run_result_json_round_trip(tmp_path):
    runs = [run(0, 0), run(1, 2, bleu=3.25)]
    path = tmp_path / "r.jsonl"
    H.write_results_jsonl(runs, path)
    assert H.read_results_jsonl(path) == runs
    path.write_text('{"not": "a run"}\n')
    with pytest.raises(ConfigurationError, match="line 1"):
        H.read_results_jsonl(path)


# -- datasets and streams ----------------------------------------------------------------


def test_load_dataset_variants(corpora, tmp_path):
    assert len(H.load_dataset(corpora["mr"])) == 32
    assert H.load_dataset("synthetic:kg:3").name
    with pytest.raises(ConfigurationError):
        H.load_dataset("synthetic:amr")
    csv = tmp_path / "e.csv"
    csv.write_text('mr,ref\n"name[Aromi], area[riverside]","Aromi is by the river."\n')
    assert H.load_dataset({"test": str(csv)}).instances[0].split == "test"


def test_delimiter_in_reference_rejected():
    from peft_forge.data import Triple

    bad = Dataset([Instance("x", (Triple("a", "b", "c"),), "s", ["a <S> b"], "train")], name="bad")
    with pytest.raises(ConfigurationError, match="delimiter"):
        H.shared_vocab(bad)


def test_run_streams_deterministic_and_distinct():
    a, b = H.run_streams(1, 2), H.run_streams(1, 2)
    assert a["sample"] == b["sample"] == 1001
    assert a["init"].random() == b["init"].random()
    assert H.run_streams(1, 3)["order"].random() != H.run_streams(1, 2)["order"].random()
    assert H.run_streams(1, 3)["sample"] == H.run_streams(1, 2)["sample"]


# -- single runs and grids ---------------------------------------------------------------


def test_train_run_deterministic(corpora):
    spec = fast_spec(corpora["mr"])
    a, b = H.train_run(spec, 0, 1), H.train_run(spec, 0, 1)
    assert a == b
    assert a.n_train == 2 * 6
    assert a.best_dev_bleu == max(v for _, v in a.dev_curve)
    assert [s for s, _ in a.dev_curve] == [0, 3, 6]
    assert len(a.losses) == 6 and set(a.test["scores"]) == {"BLEU", "TER"}


def test_train_run_seed_changes_run(corpora):
    spec = fast_spec(corpora["mr"])
    assert H.train_run(spec, 0, 0).losses != H.train_run(spec, 0, 1).losses


def test_divergent_run_marked_failed(corpora):
    res = H.train_run(fast_spec(corpora["mr"], learning_rate=1e30, peft={"method": "fine_tune"}), 0, 0)
    assert res.failed and res.failed_step is not None and res.failed_step <= 6


def test_spt_keeps_backbone_frozen_over_100_steps(corpora):
    ds = H.load_dataset(corpora["mr"])
    vocab = H.shared_vocab(ds)
    model = Seq2SeqModel(PRESETS["tiny"].replace(vocab_size=len(vocab)), seed=0)
    before = {n: p.data.copy() for n, p in model.params.items()}
    att = attach(model, ScaledPromptTuning(k=4))
    fit(att, ds.split("train"), [], vocab, TrainSettings(0.5, max_steps=100, eval_every=1000), np.random.default_rng(0))
    assert all(p.data.tobytes() == before[n].tobytes() for n, p in model.params.items())


def test_default_grid_runs_nine(corpora, tmp_path):
    spec = fast_spec(corpora["mr"], sampling_reps=3, seeds=3, max_steps=2, eval_every=2, output_dir=str(tmp_path))
    rep = H.run_grid(spec)
    assert rep.n_runs == 9 and len(rep.runs) == 9
    assert sorted(r.key for r in rep.runs) == [(r, s) for r in range(3) for s in range(3)]
    assert set(rep.mean) == {"dev_BLEU", "BLEU", "TER"} and set(rep.stderr) == set(rep.mean)
    again = H.run_grid(spec)
    assert again.runs == rep.runs and again.mean == rep.mean and again.stderr == rep.stderr
    lines = (tmp_path / "results.jsonl").read_text().splitlines()
    assert len(lines) == 9
    saved = json.loads((tmp_path / "grid_report.json").read_text())
    assert saved["n_runs"] == 9 and saved["mean"] == rep.mean
    assert H.aggregate(H.read_results_jsonl(tmp_path / "results.jsonl")).mean == rep.mean


def test_sampling_depends_only_on_rep(corpora):
    spec = fast_spec(corpora["mr"], max_steps=0)
    ds = H.load_dataset(corpora["mr"])
    assert H._train_subset(spec, ds, 0) == H._train_subset(spec, ds, 0)
    assert H._train_subset(spec, ds, 0) != H._train_subset(spec, ds, 1)


def test_workers_env_gives_identical_grid(corpora, monkeypatch):
    spec = fast_spec(corpora["mr"], sampling_reps=2, seeds=1, max_steps=2, eval_every=2)
    monkeypatch.setenv(H.WORKERS_ENV, "1")
    serial = H.run_grid(spec)
    monkeypatch.setenv(H.WORKERS_ENV, "2")
    assert H._worker_count(2) == 2 and H._worker_count(1) == 1
    parallel = H.run_grid(spec)
    assert parallel.runs == serial.runs and parallel.mean == serial.mean
    monkeypatch.setenv(H.WORKERS_ENV, "many")
    with pytest.raises(ConfigurationError):
        H._worker_count(3)


def test_overfit_eight_instances():
    ds = make_mr_corpus(8, 0, 0, seed=3)
    vocab = H.shared_vocab(ds)
    model = Seq2SeqModel(PRESETS["toy"].replace(vocab_size=len(vocab)), seed=0)
    att = attach(model, FineTune())
    hist = fit(att, ds.split("train"), [], vocab, TrainSettings(1e-3, max_steps=2000, eval_every=10_000),
               np.random.default_rng(0))
    assert min(hist.losses) < 0.1


# -- checkpoints -------------------------------------------------------------------------


def _attached(cfg, seed=0):
    vocab = build_vocab(["a b c d e f g"])
    model = Seq2SeqModel(PRESETS["tiny"].replace(vocab_size=len(vocab)), seed=seed)
    att = attach(model, cfg, rng=1)
    rng = np.random.default_rng(2)
    for p in att.trainable_tensors().values():
        p.data += rng.normal(0, 0.1, size=p.shape).astype(p.data.dtype)
    return att, vocab


@pytest.mark.parametrize("cfg", [LoRA(rank=2), FineTune(), ScaledPromptTuning(k=3)], ids=lambda c: c.method)
def test_checkpoint_round_trip_bitwise(cfg, tmp_path):
    att, vocab = _attached(cfg)
    H.save_checkpoint(att, tmp_path / "ck", vocab, step=5, dev_bleu=1.5, backbone={"seed": 0})
    model, back, manifest = H.load_checkpoint(tmp_path / "ck", vocab=vocab, config=cfg, dims=att.backbone.dims)
    for n, p in att.trainable_tensors().items():
        assert back.trainable_tensors()[n].data.tobytes() == p.data.tobytes()
    batch = make_batch([[4, 5, 6]], [[7, 8]])
    assert forward_logits(model, batch, back.hooks).data.tobytes() == \
        forward_logits(att.backbone, batch, att.hooks).data.tobytes()
    assert manifest["step"] == 5 and manifest["dev_bleu"] == 1.5


def test_checkpoint_method_only_payload(tmp_path):
    att, vocab = _attached(LoRA(rank=2))
    H.save_checkpoint(att, tmp_path / "ck", vocab, backbone={"seed": 0})
    manifest = H.read_manifest(tmp_path / "ck")
    assert manifest["payload_bytes"] == 4 * trainable_count(att)
    assert {e["group"] for e in manifest["tensors"]} == {"method"}
    assert (tmp_path / "ck" / "params.bin").stat().st_size == 4 * trainable_count(att)
    for e in manifest["tensors"]:
        assert {"name", "shape", "offset"} <= set(e)


def test_checkpoint_fine_tune_includes_backbone(tmp_path):
    att, vocab = _attached(FineTune())
    H.save_checkpoint(att, tmp_path / "ck", vocab)
    assert H.read_manifest(tmp_path / "ck")["payload_bytes"] == 4 * att.backbone.num_parameters()


def test_checkpoint_needs_backbone_source(tmp_path):
    att, vocab = _attached(LoRA(rank=2))
    with pytest.raises(ConfigurationError):
        H.save_checkpoint(att, tmp_path / "ck", vocab)


def test_checkpoint_tampered_byte(tmp_path):
    att, vocab = _attached(LoRA(rank=2))
    H.save_checkpoint(att, tmp_path / "ck", vocab, backbone={"seed": 0})
    blob = bytearray((tmp_path / "ck" / "params.bin").read_bytes())
    blob[7] ^= 0x01
    (tmp_path / "ck" / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(CorruptionError, match="checksum"):
        H.load_checkpoint(tmp_path / "ck")


def test_checkpoint_truncated_and_renamed(tmp_path):
    att, vocab = _attached(LoRA(rank=2))
    ck = H.save_checkpoint(att, tmp_path / "ck", vocab, backbone={"seed": 0})
    blob = (ck / "params.bin").read_bytes()
    (ck / "params.bin").write_bytes(blob[:-4])
    with pytest.raises(CorruptionError):
        H.load_checkpoint(ck)
    (ck / "params.bin").write_bytes(blob)
    manifest = json.loads((ck / "manifest.json").read_text())
    manifest["tensors"][0]["name"] = "lora.bogus"
    (ck / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CorruptionError):
        H.load_checkpoint(ck)


def test_checkpoint_mismatches(tmp_path):
    att, vocab = _attached(LoRA(rank=2))
    H.save_checkpoint(att, tmp_path / "ck", vocab, backbone={"seed": 0})
    with pytest.raises(CheckpointLoadError):
        H.load_checkpoint(tmp_path / "ck", vocab=build_vocab(["x y"]))
    with pytest.raises(CheckpointLoadError):
        H.load_checkpoint(tmp_path / "ck", config=LoRA(rank=3))
    with pytest.raises(CheckpointLoadError):
        H.load_checkpoint(tmp_path / "ck", dims=PRESETS["tiny"])
    with pytest.raises(CheckpointLoadError):
        H.load_checkpoint(tmp_path / "nowhere")


def test_frozen_backbone_survives_checkpoint_reload(tmp_path):
    att, vocab = _attached(LoRA(rank=2), seed=4)
    H.save_checkpoint(att, tmp_path / "ck", vocab, backbone={"seed": 4})
    model, _, _ = H.load_checkpoint(tmp_path / "ck")
    assert all(model.params[n].data.tobytes() == p.data.tobytes() for n, p in att.backbone.params.items())
    assert not any(p.trainable for p in model.params.values())


def test_train_run_saves_checkpoint(corpora, tmp_path):
    spec = fast_spec(corpora["mr"], output_dir=str(tmp_path), save_checkpoints=True)
    res = H.train_run(spec, 0, 0)
    manifest = H.read_manifest(tmp_path / "checkpoints" / "run-rep0-seed0")
    assert manifest["step"] == res.best_step and manifest["backbone"] == {"seed": 0}


# -- multi-task, intermediate, sweep ------------------------------------------------------


def test_multi_task_mixture_and_reports(corpora, tmp_path):
    a = fast_spec(corpora["mr"], output_dir=str(tmp_path))
    b = fast_spec(corpora["kg"])
    rep_a, rep_b = H.multi_task_run(a, b)
    assert rep_a.runs[0].n_train == 2 * (6 + 2)
    assert rep_a.runs[0].losses == rep_b.runs[0].losses
    assert rep_a.label != rep_b.label
    assert (tmp_path / "multitask-0-results.jsonl").exists() and (tmp_path / "multitask-1-results.jsonl").exists()


def test_multi_task_needs_equal_shots(corpora):
    with pytest.raises(ConfigurationError):
        H.multi_task_run(fast_spec(corpora["mr"]), fast_spec(corpora["kg"], shots=3))


def test_multi_task_single_reduces_to_grid(corpora):
    spec = fast_spec(corpora["mr"])
    (only,) = H.multi_task_run(spec)
    grid = H.run_grid(spec)
    assert only.runs == grid.runs and only.mean == grid.mean


def test_intermediate_continuity(corpora, tmp_path):
    first = fast_spec(corpora["mr"], peft={"method": "fine_tune"}, learning_rate=3e-3, max_steps=12, eval_every=4)
    second = fast_spec(corpora["mr2"], peft={"method": "fine_tune"}, learning_rate=3e-3, sampling_reps=2)
    out = H.intermediate_run(first, second, workdir=tmp_path)
    assert out.zero_shot.n_runs == out.final.n_runs == 2
    for z, f in zip(out.zero_shot.runs, out.final.runs):
        assert z.key == f.key
        assert f.dev_curve[0] == (0, z.best_dev_bleu)
    assert (tmp_path / "checkpoints" / "stage1-rep0-seed0" / "manifest.json").exists()


def test_intermediate_zero_steps_reduces_to_grid(corpora, tmp_path):
    first = fast_spec(corpora["mr"], max_steps=0)
    second = fast_spec(corpora["mr2"], sampling_reps=2)
    out = H.intermediate_run(first, second, workdir=tmp_path)
    vocab = H.shared_vocab(H.load_dataset(corpora["mr"]), H.load_dataset(corpora["mr2"]))
    grid = H.run_grid(second, vocab=vocab)
    assert out.final.runs == grid.runs and out.final.mean == grid.mean


def test_intermediate_symmetric_and_config_check(corpora, tmp_path):
    a, b = fast_spec(corpora["mr"], max_steps=2), fast_spec(corpora["mr2"], max_steps=2)
    fwd = H.intermediate_run(a, b, workdir=tmp_path / "ab")
    rev = H.intermediate_run(b, a, workdir=tmp_path / "ba")
    assert fwd.final.runs[0].label != rev.final.runs[0].label
    with pytest.raises(ConfigurationError):
        H.intermediate_run(a, b.replace(peft={"method": "ia3"}), workdir=tmp_path)


def test_prompt_length_sweep(corpora, tmp_path):
    spec = fast_spec(corpora["mr"], peft={"method": "scaled_prompt_tuning", "k": 2}, max_steps=2, eval_every=2,
                     learning_rate=0.5, output_dir=str(tmp_path))
    reports = H.prompt_length_sweep(spec, (1, 2, 3, 4))
    assert sorted(reports) == [1, 2, 3, 4]
    assert all((tmp_path / f"k{k}" / "grid_report.json").exists() for k in reports)
    table = H.sweep_table(reports)
    assert len(table.splitlines()) == 5
    again = H.prompt_length_sweep(spec.replace(output_dir=None), (1, 2, 3, 4))
    assert all(again[k].mean == reports[k].mean for k in reports)


def test_sweep_counts_linear_in_length():
    from peft_forge.audit import count_trainable

    dims = PRESETS["t5-large"]
    counts = [count_trainable(ScaledPromptTuning(k=k), dims).total for k in (10, 30, 50, 60)]
    assert counts == [k * 1024 + k for k in (10, 30, 50, 60)]


def test_sweep_rejects_non_prompt_method(corpora):
    with pytest.raises(ConfigurationError):
        H.prompt_length_sweep(fast_spec(corpora["mr"]))


def test_backbone_checkpoint_spec(corpora, tmp_path):
    ds = H.load_dataset(corpora["mr"])
    model, vocab, losses = H.pretrain_backbone([ds], dims="tiny", steps=3, batch_size=4, n_mr=20,
                                               n_kg_per_category=2)
    assert len(losses) == 3 and not any(p.trainable for p in model.params.values())
    H.save_checkpoint(attach(model, FineTune()), tmp_path / "bb", vocab, step=3)
    spec = fast_spec(corpora["mr"], backbone=str(tmp_path / "bb"), max_steps=2, eval_every=2)
    res = H.train_run(spec, 0, 0)
    assert not res.failed
    model.set_trainable(False)
    rebuilt = H.build_backbone(spec, vocab)
    assert all(rebuilt.params[n].data.tobytes() == p.data.tobytes() for n, p in model.params.items())
    assert H.backbone_source(spec) == {"checkpoint": str(tmp_path / "bb")}


def test_pretraining_excludes_held_out_payloads(corpora):
    from peft_forge.synthetic import make_pretraining_pairs
    from peft_forge.data import linearize

    ds = H.load_dataset(corpora["mr"])
    held = [i.payload for i in ds if i.split != "train"]
    pairs = make_pretraining_pairs(200, 2, seed=101, exclude=held)
    sources = {s for s, _ in pairs}
    for inst in ds:
        if inst.split != "train":
            assert not any(src.endswith(linearize(inst)) for src in sources)


def test_merge_datasets_for_spec(corpora):
    spec = fast_spec(corpora["mr"]).replace(datasets=[corpora["mr"], corpora["kg"]])
    assert len(H.load_spec_dataset(spec)) == len(merge_datasets(H.load_dataset(corpora["mr"]),
                                                                H.load_dataset(corpora["kg"])))
