"""
Paired ablations
================

Train a base arm and an arm that changes one declared setting, evaluate both
with the same probe and attention suite, and write ablation_report.json.
Averaging over seeds is left to the caller; here one seed keeps it short.

    python3 demos/04_ablation_pair.py --steps 200 --out demo_out/ablation
"""

import argparse
import json

import numpy as np
import torch

from comit.align import OracleTeacher
from comit.baselines import AblationSpec, EvalSuite, run_ablation_pair
from comit.datagen import generate
from comit.model import BackboneConfig
from comit.trainer import TrainConfig

p = argparse.ArgumentParser()
p.add_argument("--steps", type=int, default=200)
p.add_argument("--out", default="demo_out/ablation")
args = p.parse_args()
torch.set_num_threads(1)

scenes = generate(2000, seed=0)
data = torch.from_numpy(np.stack([s.canvas for s in scenes]))
teacher = OracleTeacher().table(scenes)
probe_scenes = generate(600, seed=5)
suite = EvalSuite(probe_scenes, (range(0, 400), range(400, 500), range(500, 600)), generate(100, seed=6),
                  probe_kwargs={"lr": 1e-3, "max_epochs": 20, "patience": 5})

base = None
for spec in (AblationSpec("no-srepa", "srepa_off"), AblationSpec("no-locals", "locals_off")):
    report, base = run_ablation_pair(spec, BackboneConfig(), TrainConfig(), data, teacher, suite,
                                     steps=args.steps, out_dir=f"{args.out}/{spec.name}", base=base)
    print(json.dumps({"name": report["name"], "deltas": report["deltas"]}, indent=2))
