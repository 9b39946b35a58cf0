import json

import numpy as np
import pytest

from context_forge.cli import build_config, build_parser, run
from context_forge.errors import ContractError
from context_forge.model import ContextModel

SMALL = ["--set", "data.height=32", "--set", "data.width=32", "--set", "data.word_count=[1,2]",
         "--set", "data.word_length=[1,3]"]
TINY_MODEL = ["--set", "model.dim=8", "--set", "model.heads=2", "--set", "model.post_depth=1",
              "--set", "model.patch=4", "--set", "model.dec_channels=4", "--set", "model.mlp_ratio=1.0"]


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run(["gen-data", "--count", "20", "--seed", "7", "--out", str(out)] + SMALL) == 0
    return out


def test_gen_data_is_byte_identical(dataset, tmp_path):
    again = tmp_path / "again"
    assert run(["gen-data", "--count", "20", "--seed", "7", "--out", str(again)] + SMALL) == 0
    assert tree_bytes(dataset) == tree_bytes(again)
    lines = (dataset / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 20 and sum(json.loads(l)["split"] == "val" for l in lines) == 2
    spec = json.loads((dataset / "spec.json").read_text())
    assert spec["seed"] == 7 and spec["height"] == 32


def test_eval_on_ground_truth_is_perfect(dataset, tmp_path):
    code = run(["eval", "--manifest", str(dataset / "manifest.jsonl"), "--predictions",
                str(dataset / "images"), "--out", str(tmp_path)])
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    (row,) = report.values()
    assert row["psnr"] == 99.0 and row["fgiou"] == 100.0 and row["count"] == 20
    assert row["frechet"] == pytest.approx(0.0, abs=1e-6)
    assert "PSNR" in (tmp_path / "table.txt").read_text()


def test_train_infer_eval_round_trip(dataset, tmp_path):
    manifest = str(dataset / "manifest.jsonl")
    run_dir = tmp_path / "run"
    code = run(["train", "--manifest", manifest, "--epochs", "1", "--seed", "1", "--out", str(run_dir),
                "--set", "train.val_limit=1"] + TINY_MODEL)
    assert code == 0
    model = ContextModel.load(run_dir / "model.ctckpt")
    assert model.config.dim == 8 and model.config.panel_h == 32
    lines = [json.loads(l) for l in (run_dir / "trainlog.jsonl").read_text().splitlines()]
    assert [l["step"] for l in lines if l["kind"] == "step"] == [0, 1, 2, 3]
    pred = tmp_path / "pred"
    ckpt = str(run_dir / "model.ctckpt")
    assert run(["infer", "--checkpoint", ckpt, "--manifest", manifest, "--split", "val", "--demos", "2",
                "--out", str(pred)]) == 0
    index = json.loads((pred / "results.json").read_text())
    assert len(index) == 2 and all(len(e["demo_ids"]) == 2 for e in index)
    assert all((pred / e["removal_path"]).exists() and (pred / e["seg_path"]).exists() for e in index)
    ev = tmp_path / "ev"
    assert run(["eval", "--checkpoint", ckpt, "--manifest", manifest, "--split", "val", "--double",
                "--out", str(ev)]) == 0
    assert json.loads((ev / "report.json").read_text())


def test_bench_reports_small_caa_delta(tmp_path, capsys):
    assert run(["bench", "--repeats", "1", "--out", str(tmp_path)]) == 0
    result = json.loads((tmp_path / "bench.json").read_text())
    assert result["params"] > 0 and result["forward_ms"] > 0
    assert 0 < result["caa_delta_pct"] < 10
    assert result["flops_caa_on"] > result["flops_caa_off"]


def test_usage_and_config_errors_exit_1(tmp_path, capsys):
    assert run(["gen-data", "--bogus", "--out", str(tmp_path)]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["gen-data", "--out", str(tmp_path), "--set", "data.nope=1"]) == 1
    assert run(["gen-data", "--out", str(tmp_path), "--set", "novalue"]) == 1
    assert run(["train", "--out", str(tmp_path)]) == 1
    assert run(["gen-data", "--out", str(tmp_path), "--set", "data.word_count=[3,1]"]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith(("error:", "failed:")) for line in err)


def test_runtime_failures_exit_2(tmp_path, dataset):
    assert run(["eval", "--manifest", str(tmp_path / "missing.jsonl"), "--predictions", str(tmp_path),
                "--out", str(tmp_path)]) == 2
    # a 12x12 panel cannot hold 5 words with a 40-level contrast margin
    assert run(["gen-data", "--count", "3", "--out", str(tmp_path / "g"), "--set", "data.height=12",
                "--set", "data.width=12", "--set", "data.word_count=[5,5]"]) == 2
    assert run(["train", "--manifest", str(dataset / "manifest.jsonl"), "--epochs", "2", "--lr", "1e30",
                "--out", str(tmp_path / "div"), "--set", "train.warmup_frac=0"] + TINY_MODEL) == 2


def test_help_lists_flags_with_defaults(capsys):
    assert run(["--help"]) == 0
    for cmd, flags in {"gen-data": ["--count", "--seed", "--out", "--config", "--set"],
                       "train": ["--ratio", "--self-prompt-p", "--mode", "--fusion", "--epochs"],
                       "infer": ["--demos", "--double", "--threshold", "--checkpoint"],
                       "bench": ["--repeats"]}.items():
        assert run([cmd, "--help"]) == 0
        text = capsys.readouterr().out
        for f in flags:
            assert f in text
        assert "default:" in text


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model.dim": 18, "train.lr": 0.01}))
    file_values = json.loads(path.read_text())
    cfg = build_config(file_values, {"train.lr": "0.5"})
    assert cfg["model"].dim == 18 and cfg["train"].lr == 0.5
    with pytest.raises(ContractError):
        build_config({"model.unknown": 1}, {})
    with pytest.raises(ContractError):
        build_config({"nosection": 1}, {})
    assert build_parser().parse_args(["gen-data", "--out", "x"]).count == 100
