"""Desk-scale overfit reference run: two-phase training on 8 synthetic scenes.

Writes tests/data/overfit_reference.json, which the acceptance suite reads.
Takes about 21 minutes on one core.

    python demos/reference_run.py [--out PATH]
"""
import argparse
import json
import time
from pathlib import Path

import torch

from mixrec.flow import SceneTensors, evaluate_toy, load_state, train_toy
from mixrec.model import MixModel, ModelConfig
from mixrec.synth_data import make_scene

SCENES = range(8)
PRETRAIN_STEPS = 1000
MIXED_STEPS = 3000
LR = 1e-3
SEED = 0


def _tail_mean(trace, key, branch, n=100):
    vals = [r[key] for r in trace if r["branch"] == branch][-n:]
    return sum(vals) / len(vals)


def run(progress=None) -> dict:
    torch.set_num_threads(1)
    data = [SceneTensors.from_scene(make_scene(s)) for s in SCENES]
    cfg = ModelConfig()
    t0 = time.time()
    pre = train_toy(data, cfg, "pretrain_branches", PRETRAIN_STEPS, LR, SEED, progress=progress)
    mixed = train_toy(data, cfg, "mixed", MIXED_STEPS, LR, SEED, pretrained=pre.state, progress=progress)
    train_seconds = time.time() - t0
    model = MixModel(cfg, "mixed", mixed.match)
    load_state(model, mixed.state)
    ev = evaluate_toy(model, data, SEED)
    return {
        "source": "fresh run",
        "scenes": list(SCENES),
        "pretrain_steps": PRETRAIN_STEPS,
        "mixed_steps": MIXED_STEPS,
        "lr": LR,
        "seed": SEED,
        "train_seconds": train_seconds,
        "trace_tail": {
            "pretrain_L_fm": _tail_mean(pre.trace, "L_fm", "gen"),
            "pretrain_L_pts": _tail_mean(pre.trace, "L_pts", "pi3"),
            "mixed_L_fm": _tail_mean(mixed.trace, "L_fm", "mixed"),
            "mixed_L_pts": _tail_mean(mixed.trace, "L_pts", "mixed"),
        },
        "eval": ev,
    }


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default=str(Path(__file__).parents[1] / "tests" / "data" / "overfit_reference.json"))
    args = p.parse_args()

    def show(r):
        if r["step"] % 250 == 0:
            print(r["branch"], r["step"], {k: round(r[k], 4) for k in ("L_fm", "L_pts") if r[k] == r[k]}, flush=True)

    result = run(show)
    result["source"] = "committed reference run"
    Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(json.dumps(result["eval"], indent=2))
