import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from comit.align import OracleTeacher
from comit.baselines import (
    AblationSpec, ConfigDriftError, EvalSuite, check_drift, run_ablation_pair,
)
from comit.datagen import generate
from comit.trainer import TrainConfig, Trainer, uint8_to_float

from conftest import tiny_config


def tcfg(**kw):
    return TrainConfig(batch_size=4, warmup_steps=5, proj_hidden=16, teacher_dim=64, **kw)


def test_spec_apply_and_drift():
    m, t = tiny_config(), tcfg()
    for spec in (AblationSpec("a", "srepa_off"), AblationSpec("b", "locals_off"),
                 AblationSpec("c", "bottleneck", "S")):
        diff = check_drift(spec, (m, t), spec.apply(m, t))
        assert diff and diff <= {"train.lambda_srepa", "train.k_max", "train.p_global",
                                 "model.levels", "model.message_length"}
    spec = AblationSpec("a", "srepa_off")
    with pytest.raises(ConfigDriftError):
        check_drift(spec, (m, t), (m, replace(t, lambda_srepa=0.0, lr_base=1e-3)))
    with pytest.raises(ValueError):
        AblationSpec("x", "bottleneck")
    with pytest.raises(ValueError):
        AblationSpec("x", "dropout")


def test_srepa_off_loss_algebra():
    scenes = generate(4, seed=0)
    table = OracleTeacher().table(scenes)
    _, t = AblationSpec("a", "srepa_off").apply(tiny_config(), tcfg())
    tr = Trainer(tiny_config(), t)
    out = tr.losses(uint8_to_float(torch.from_numpy(np.stack([s.canvas for s in scenes]))), table[torch.arange(4)])
    assert out["total"].item() == (out["fm"] + 0.5 * out["repa"]).item()


def test_ablation_report(tmp_path):
    scenes = generate(40, seed=0)
    data = torch.from_numpy(np.stack([s.canvas for s in scenes]))
    table = OracleTeacher().table(scenes)
    suite = EvalSuite(scenes, (range(0, 24), range(24, 32), range(32, 40)), scenes[:4],
                      probe_kwargs={"max_epochs": 1, "model_dim": 32, "heads": 4})
    report, base = run_ablation_pair(AblationSpec("no-srepa", "srepa_off"), tiny_config(), tcfg(),
                                     data, table, suite, steps=2, out_dir=tmp_path)
    saved = json.loads((tmp_path / "ablation_report.json").read_text())
    assert saved == json.loads(json.dumps(report))
    assert set(report) == {"name", "kind", "bottleneck", "steps", "delta", "base", "ablated", "deltas"}
    assert report["delta"] == {"train.lambda_srepa": [0.5, 0.0]}
    for arm in ("base", "ablated"):
        assert set(report[arm]) == {"probe_accuracy", "probe_best_step", "miou", "unique_tokens"}
    assert report["deltas"]["miou"] == report["base"]["miou"] - report["ablated"]["miou"]
    # the base arm can be shared with a second ablation, but not under a different config
    report2, _ = run_ablation_pair(AblationSpec("no-locals", "locals_off"), tiny_config(), tcfg(),
                                   data, table, suite, steps=2, base=base)
    assert report2["base"] == report["base"]
    with pytest.raises(ConfigDriftError):
        run_ablation_pair(AblationSpec("no-locals", "locals_off"), tiny_config(), tcfg(lr_base=1e-3),
                          data, table, suite, steps=2, base=base)
