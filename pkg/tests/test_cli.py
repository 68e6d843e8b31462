import json
import subprocess
import sys
from pathlib import Path

import pytest

from mixrec.cli import load_run_config, main, substream

GOLDEN = Path(__file__).parent / "data" / "match_24_36.json"
SUBCOMMANDS = ["gen-data", "match-blocks", "train-toy", "sample", "eval-pose", "eval-geom", "bias-demo"]


def tree(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_help_lists_subcommands():
    out = subprocess.run([sys.executable, "-m", "mixrec.cli", "--help"], capture_output=True, text=True, check=True).stdout
    assert all(name in out for name in SUBCOMMANDS)


def test_empty_dataset_exits_2(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["bias-demo", "--seed", "0", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2
    assert "mixrec: error" in capsys.readouterr().err


def test_config_schema(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "train": {"lr": 0.01}}))
    run = load_run_config(cfg)
    assert run["train"]["lr"] == 0.01 and run["train"]["steps"] == 3000 and run["eval"]["sample_steps"] == 50
    assert load_run_config(cfg, seed=7)["seed"] == 7
    cfg.write_text(json.dumps({"seed": 1, "train": {"learning_rate": 0.01}}))
    assert main(["bias-demo", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text(json.dumps({"model": {"dim": 16}}))
    assert main(["bias-demo", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text(json.dumps({"seed": 0, "model": {"dim": 15, "heads": 2}}))
    assert main(["train-toy", "--config", str(cfg), "--data", str(tmp_path), "--phase", "pretrain_branches",
                 "--out", str(tmp_path / "x.bin")]) == 2


def test_substreams_differ():
    assert substream(0, "train") != substream(0, "sample") != substream(1, "train")
    assert substream(3, "data") == substream(3, "data")


def test_match_blocks_output(tmp_path, capsys):
    assert main(["match-blocks", "24", "36", "--out", str(tmp_path / "a.json")]) == 0
    assert (tmp_path / "a.json").read_text() == GOLDEN.read_text()
    assert main(["match-blocks", "--trellis", "24", "--pi3", "36"]) == 0
    assert capsys.readouterr().out == GOLDEN.read_text()
    assert main(["match-blocks", "6", "9"]) == 1  # infeasible
    assert main(["match-blocks", "6"]) == 2


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the whole CLI twice with the same seeds; each run lands in its own directory."""
    runs = []
    for name in ("a", "b"):
        root = tmp_path_factory.mktemp(name)
        cfg = root / "run.json"
        cfg.write_text(json.dumps({
            "seed": 5,
            "model": {"dim": 16, "heads": 2},
            "data": {"dir": str(root / "data")},
            "train": {"pretrain_steps": 3, "steps": 3, "batch_size": 2},
            "eval": {"sample_steps": 3, "view_sets": 1, "icp_samples": 200},
        }))
        c = ["--config", str(cfg)]
        assert main(["gen-data", "--count", "2", "--first-seed", "4", "--out", str(root / "data")]) == 0
        assert main(["train-toy", *c, "--phase", "pretrain_branches", "--out", str(root / "pre.bin")]) == 0
        assert main(["train-toy", *c, "--phase", "mixed", "--pretrained", str(root / "pre.bin"),
                     "--out", str(root / "mix.bin"), "--report", str(root / "report.json")]) == 0
        assert main(["sample", *c, "--checkpoint", str(root / "mix.bin"), "--scene", "5", "--out", str(root / "sample")]) == 0
        assert main(["eval-pose", *c, "--checkpoint", str(root / "mix.bin"), "--out", str(root / "pose.json")]) == 0
        assert main(["eval-geom", *c, "--checkpoint", str(root / "mix.bin"), "--out", str(root / "geom.json")]) == 0
        assert main(["bias-demo", *c, "--out", str(root / "bias")]) == 0
        runs.append(root)
    return runs


def test_reruns_are_byte_identical(pipeline):
    a, b = (tree(r) for r in pipeline)
    # run.json and dataset dirs embed the tmp path; everything else must match byte for byte
    skip = {"run.json", "pre.bin", "mix.bin"}
    assert set(a) == set(b)
    for k in a:
        if k not in skip:
            assert a[k] == b[k], k
    # checkpoints embed the run config (with its path); the tensors must still agree
    from mixrec.io import load_checkpoint

    for name in ("pre.bin", "mix.bin"):
        sa, ma = load_checkpoint(pipeline[0] / name)
        sb, mb = load_checkpoint(pipeline[1] / name)
        assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
        assert ma["frozen"] == mb["frozen"]


def test_pipeline_outputs(pipeline):
    root = pipeline[0]
    assert json.loads((root / "data" / "dataset.json").read_text()) == {"count": 2, "first_seed": 4, "misaligned": False}
    trace = (root / "mix.csv").read_text().splitlines()
    assert trace[0] == "step,L_fm,L_pts,L_nml,lambda_pts,branch" and len(trace) == 4
    sample = json.loads((root / "sample" / "sample.json").read_text())
    assert sample["scene"] == 5 and sample["latent_shape"] == [8, 8, 8, 4] and len(sample["views"]) == 4
    pose = json.loads((root / "pose.json").read_text())
    assert pose["threshold_deg"] == 30.0 and len(pose["scenes"]) == 2
    assert all(0 <= pose["mean"][k] <= 100 for k in ("rra", "rta", "auc"))
    geom = json.loads((root / "geom.json").read_text())
    assert set(geom["mean"]) == {"cd_predicted_similarity", "cd_pose_alignment", "cd_orientation_trials", "pixel_error"}
    assert (root / "bias" / "bias.txt").read_text().startswith("scene 4")


def test_bias_demo_attention_mass(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--count", "1", "--out", str(data)]) == 0
    assert main(["bias-demo", "--seed", "0", "--data", str(data), "--views", "4", "--out", str(tmp_path / "b")]) == 0
    rep = json.loads((tmp_path / "b" / "bias.json").read_text())
    mass = rep["attention_mass"]
    assert mass["voxels"] > 0 and mass["biased"] > mass["unbiased"]
    assert all(0 <= b <= 5.0 for _, _, b in rep["bias"])
    listed = (tmp_path / "b" / "bias.txt").read_text().splitlines()[2]
    assert "patch" in listed and "no bias" not in listed


def test_file_mode_evaluation(pipeline, tmp_path):
    stem = pipeline[0] / "sample" / "aligned_0"
    out = tmp_path / "g.json"
    assert main(["eval-geom", "--pred", str(stem), "--gt", str(stem), "--align", "none", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["chamfer"] == 0.0 and rep["pixel_error"] < 1e-12
    poses = [{"q": [1, 0, 0, 0], "t": [0, 0, 0]}, {"q": [1, 0, 0, 0], "t": [1, 0, 0]}]
    (tmp_path / "p.json").write_text(json.dumps(poses))
    assert main(["eval-pose", "--pred", str(tmp_path / "p.json"), "--gt", str(tmp_path / "p.json"), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["auc"] == 100.0
    assert main(["eval-pose", "--pred", str(tmp_path / "p.json"), "--out", str(out)]) == 2


def test_mixed_needs_matching_pretrain(pipeline, tmp_path):
    root = pipeline[0]
    assert main(["train-toy", "--seed", "0", "--data", str(root / "data"), "--phase", "mixed", "--out", str(tmp_path / "m.bin")]) == 2
    # default model config differs from the dim-16 pretrain checkpoint
    assert main(["train-toy", "--seed", "0", "--data", str(root / "data"), "--phase", "mixed", "--pretrained",
                 str(root / "pre.bin"), "--out", str(tmp_path / "m.bin")]) == 2
    assert main(["sample", "--seed", "0", "--data", str(root / "data"), "--checkpoint", str(root / "pre.bin"),
                 "--out", str(tmp_path / "s")]) == 2
