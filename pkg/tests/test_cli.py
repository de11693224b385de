"""End-to-end CLI tests: flows, manifests, idempotence, exit codes."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from nasflat import cli
from nasflat.devicesets import DeviceSplit, LatencyTable
from nasflat import synthbench as sb
from nasflat import archspace as asp


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synthetic dataset + split + tiny pretrain, reused by the flows."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    assert run([
        "synth", "--space", "nb201", "--devices", "6", "--archs", "80",
        "--seed", "5", "--out-dir", str(data),
    ]) == 0
    split = root / "split.json"
    assert run([
        "partition", "--latency", str(data / "latency.csv"),
        "--m", "3", "--n", "2", "--seed", "1", "--out", str(split),
    ]) == 0
    config = root / "run.json"
    config.write_text(json.dumps({
        "version": 1,
        "train": {"epochs": 3, "source_samples": 60, "transfer_epochs": 6},
        "predictor": {},
    }))
    ckpt = root / "ckpt.json"
    assert run([
        "pretrain", "--config", str(config), "--latency", str(data / "latency.csv"),
        "--archs", str(data / "archs.jsonl"), "--split", str(split),
        "--seed", "3", "--out", str(ckpt),
    ]) == 0
    return root, data, split, config, ckpt


def test_synth_outputs_and_manifest(workspace):
    _, data, _, _, _ = workspace
    for name in ("archs.jsonl", "latency.csv", "zcp.csv", "devices.json", "manifest.json"):
        assert (data / name).exists()
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["master_seed"] == 5
    assert "timestamp" in manifest


def test_synth_idempotent(tmp_path):
    args = ["synth", "--space", "nb201", "--devices", "3", "--archs", "30", "--seed", "9"]
    assert run(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert run(args + ["--out-dir", str(tmp_path / "b")]) == 0
    for name in ("archs.jsonl", "latency.csv", "zcp.csv", "devices.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_missing_out_dir_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["synth", "--space", "nb201", "--devices", "3", "--archs", "10"])
    assert exc.value.code == 2


def test_partition_separates_planted_pairs(tmp_path):
    nb = asp.nb201_space()
    table = LatencyTable()
    devices = []
    for p in range(2):
        parent = sb.gen_device(300 + p * 10, nb, device_id=f"p{p}a", sigma=0.01)
        clone = sb.gen_device(
            301 + p * 10, nb, device_id=f"p{p}b", sigma=0.01,
            clone_of=parent, cost_jitter=0.02,
        )
        devices += [parent, clone]
    archs = sb.distinct_random_architectures(nb, 100, seed=1)
    table = sb.measure(archs, devices, nb)
    lat = tmp_path / "latency.csv"
    table.save_csv(lat)
    out = tmp_path / "split.json"
    assert run(["partition", "--latency", str(lat), "--m", "2", "--n", "2",
                "--seed", "0", "--out", str(out)]) == 0
    split = DeviceSplit.from_json(out.read_text())
    # correlated pairs must be separated across the two pools
    for p in range(2):
        assert (f"p{p}a" in split.source) != (f"p{p}b" in split.source)
    assert not set(split.source) & set(split.target)


def test_partition_oversized_request_fails_with_data_exit(workspace):
    root, data, _, _, _ = workspace
    code = run(["partition", "--latency", str(data / "latency.csv"),
                "--m", "5", "--n", "3", "--seed", "1", "--out", str(root / "x.json")])
    assert code == 3


def test_partition_output_revalidates(workspace):
    root, _, split, _, _ = workspace
    parsed = DeviceSplit.from_json(split.read_text())
    assert len(parsed.source) == 3 and len(parsed.target) == 2
    assert not set(parsed.source) & set(parsed.target)
    assert -1.0 <= parsed.objective <= 1.0


def test_sample_command_and_unknown_method(workspace, tmp_path):
    _, data, _, _, _ = workspace
    out = tmp_path / "sel.json"
    assert run(["sample", "--method", "cosine", "--archs", str(data / "archs.jsonl"),
                "--encoding", str(data / "zcp.csv"), "--n", "10", "--seed", "2",
                "--out", str(out)]) == 0
    sel = json.loads(out.read_text())
    assert len(sel["arch_ids"]) == 10
    with pytest.raises(SystemExit) as exc:
        run(["sample", "--method", "bogus", "--archs", str(data / "archs.jsonl"),
             "--n", "5", "--out", str(out)])
    assert exc.value.code == 2


def test_transfer_eval_flow_records_sample_count(workspace, tmp_path):
    root, data, split, config, ckpt = workspace
    tdir = root / "transfers"
    assert run([
        "transfer", "--config", str(config), "--latency", str(data / "latency.csv"),
        "--archs", str(data / "archs.jsonl"), "--split", str(split),
        "--checkpoint", str(ckpt), "--sampler", "cosine",
        "--sampler-encoding", str(data / "zcp.csv"),
        "--samples", "20", "--seed", "3", "--out-dir", str(tdir),
    ]) == 0
    ckpts = sorted(tdir.glob("transfer_*.json"))
    ckpts = [c for c in ckpts if not c.name.endswith(".meta.json")]
    assert len(ckpts) == 2  # both split targets

    prefix = root / "report"
    assert run([
        "eval", "--latency", str(data / "latency.csv"),
        "--archs", str(data / "archs.jsonl"), "--checkpoint", str(tdir),
        "--seed", "3", "--out-prefix", str(prefix),
    ]) == 0
    summary = json.loads(Path(str(prefix) + ".json").read_text())
    assert summary["target_samples_used"] == [20]
    assert "mean_spearman" in summary
    assert summary["per_device"][0]["n_heldout"] == 60  # 80 archs - 20 sampled
    csv_text = Path(str(prefix) + ".csv").read_text()
    assert csv_text.startswith("device_id,trial,spearman")
    scatter = Path(str(prefix) + ".scatter.csv").read_text().splitlines()
    assert scatter[0] == "device_id,arch_id,pred,truth"
    assert len(scatter) == 1 + 2 * 60


def test_eval_idempotent(workspace):
    root, data, _, _, _ = workspace
    tdir = root / "transfers"
    for tag in ("r1", "r2"):
        assert run([
            "eval", "--latency", str(data / "latency.csv"),
            "--archs", str(data / "archs.jsonl"), "--checkpoint", str(tdir),
            "--seed", "3", "--out-prefix", str(root / f"rep_{tag}"),
        ]) == 0
    assert (root / "rep_r1.csv").read_bytes() == (root / "rep_r2.csv").read_bytes()
    assert (root / "rep_r1.json").read_bytes() == (root / "rep_r2.json").read_bytes()


def test_search_flow_and_timing(workspace):
    root, data, _, _, _ = workspace
    ckpts = sorted((root / "transfers").glob("transfer_*.json"))
    ckpt = [c for c in ckpts if not c.name.endswith(".meta.json")][0]
    out = root / "results.csv"
    assert run([
        "search", "--archs", str(data / "archs.jsonl"), "--checkpoint", str(ckpt),
        "--latency", str(data / "latency.csv"),
        "--constraint-ms", "1e9", "--top-k", "5", "--seed", "7", "--out", str(out),
    ]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "rank,arch_id,accuracy,predicted_latency_ms"
    assert len(lines) == 6
    accs = [float(l.split(",")[2]) for l in lines[1:]]
    assert accs == sorted(accs, reverse=True)  # pure accuracy ranking
    timing = json.loads(Path(str(out) + ".timing.json").read_text())
    assert timing["predictor_time_s"] > 0
    assert timing["search_time_s"] > 0

    code = run([
        "search", "--archs", str(data / "archs.jsonl"), "--checkpoint", str(ckpt),
        "--latency", str(data / "latency.csv"),
        "--constraint-ms=-1e9", "--top-k", "5", "--seed", "7",
        "--out", str(root / "none.csv"),
    ])
    assert code == 3  # EmptyFeasibleSet is a data error


def test_thread_env_var_validation(workspace, monkeypatch):
    root, data, _, _, _ = workspace
    monkeypatch.setenv("NASFLAT_THREADS", "banana")
    code = run(["sample", "--method", "random", "--archs", str(data / "archs.jsonl"),
                "--n", "3", "--out", str(root / "s.json")])
    assert code == 2
    monkeypatch.setenv("NASFLAT_THREADS", "4")
    assert run(["sample", "--method", "random", "--archs", str(data / "archs.jsonl"),
                "--n", "3", "--out", str(root / "s.json")]) == 0
    manifest = json.loads((root / "s.json.manifest.json").read_text())
    assert manifest["threads"] == 4


def test_config_sampler_section_used_when_flags_absent(workspace, tmp_path):
    root, data, split, _, ckpt = workspace
    config = tmp_path / "run.json"
    config.write_text(json.dumps({
        "version": 1,
        "train": {"epochs": 1, "source_samples": 40, "transfer_epochs": 1},
        "sampler": {"method": "random", "samples": 6},
    }))
    tdir = tmp_path / "transfers"
    assert run([
        "transfer", "--config", str(config), "--latency", str(data / "latency.csv"),
        "--archs", str(data / "archs.jsonl"), "--split", str(split),
        "--checkpoint", str(ckpt), "--seed", "3", "--out-dir", str(tdir),
    ]) == 0
    metas = sorted(tdir.glob("transfer_*.json.meta.json"))
    extra = json.loads(metas[0].read_text())["extra"]
    assert extra["sampler"] == "random"
    assert extra["samples"] == 6


def test_bad_config_reports_json_pointer(workspace, tmp_path):
    root, data, split, _, ckpt = workspace
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"version": 1, "train": {"lr": -1}}))
    code = run([
        "pretrain", "--config", str(bad), "--latency", str(data / "latency.csv"),
        "--archs", str(data / "archs.jsonl"), "--split", str(split),
        "--out", str(tmp_path / "c.json"),
    ])
    assert code == 3


def test_missing_input_file_is_data_error(tmp_path):
    code = run(["partition", "--latency", str(tmp_path / "nope.csv"),
                "--m", "1", "--n", "1", "--out", str(tmp_path / "s.json")])
    assert code == 3
