import numpy as np
import pytest
import torch

from comit.datagen import generate
from comit.probes import (
    ProbeConfig, ProbeExample, ProbeNet, both_in_top5, dominant_category, load_token_dir, make_examples,
    pairs_accuracy, probe_config_for, random_pairs_baseline, relation_accuracy, sample_candidates,
    top1_accuracy, train_probe,
)
from comit.quantizer import write_message_dump


def small(task, **kw):
    base = dict(task=task, model_dim=32, heads=4, seq_len=4, vocab_size=20, lr=1e-3, batch_size=32,
                max_epochs=40, patience=5)
    base.update(kw)
    return ProbeConfig(**base)


def test_head_shapes():
    p = ProbeNet(small("single-label"))
    assert p(torch.zeros(3, 4, dtype=torch.long)).shape == (3, 20)
    r = ProbeNet(small("relational"))
    ids = torch.zeros(3, 4, dtype=torch.long)
    assert r(ids, torch.zeros(3, 3, dtype=torch.long)).shape == (3,)
    assert r(ids, torch.zeros(3, 10, 3, dtype=torch.long)).shape == (3, 10)
    with pytest.raises(ValueError):
        p(torch.zeros(3, 5, dtype=torch.long))
    with pytest.raises(ValueError):
        ProbeConfig(depth=3, vocab_size=4)
    with pytest.raises(ValueError):
        ProbeConfig(task="counting", vocab_size=4)


def test_fsq_embedding_and_order_sensitivity():
    torch.manual_seed(0)
    p = ProbeNet(small("single-label", levels=(8, 8, 5, 5), vocab_size=None)).eval()
    ids = torch.tensor([[1, 200, 900, 1500]])
    assert not torch.allclose(p(ids), p(ids.flip(-1)))


def test_metric_references():
    labels = torch.arange(20).repeat(5)
    assert top1_accuracy(torch.zeros(100, 20), labels) == pytest.approx(1 / 20)
    assert random_pairs_baseline() == pytest.approx(0.0526, abs=1e-4)
    assert random_pairs_baseline(5) == 1.0
    # five classes: any top-5 holds every label
    t = torch.zeros(4, 5)
    t[:, :2] = 1
    assert pairs_accuracy(torch.randn(4, 5), t) == 1.0
    rng = np.random.default_rng(0)
    hits = []
    for _ in range(20000):
        t = torch.zeros(1, 20)
        t[0, rng.choice(20, 2, replace=False)] = 1
        hits.append(both_in_top5(torch.from_numpy(rng.standard_normal((1, 20))), t).item())
    assert abs(np.mean(hits) - random_pairs_baseline()) < 0.006
    assert relation_accuracy(torch.tensor([[2.0, 1.0, 0.0], [1.0, 1.0, 0.0]])) == 0.5
    s = torch.from_numpy(rng.standard_normal((20000, 10)))
    assert abs(relation_accuracy(s) - 0.1) < 0.01
    with pytest.raises(ValueError):
        top1_accuracy(torch.zeros(0, 20), torch.zeros(0, dtype=torch.long))


def test_top5_monotone():
    rng = np.random.default_rng(1)
    t = torch.zeros(500, 20)
    for i in range(500):
        t[i, rng.choice(20, 2, replace=False)] = 1
    logits = torch.from_numpy(rng.standard_normal((500, 20))).float()
    base = pairs_accuracy(logits, t)
    assert pairs_accuracy(logits + 10 * t, t) == 1.0
    assert pairs_accuracy(logits + 0.5 * t, t) >= base


def _oracle_examples(n, seed, task="single-label"):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        if task == "single-label":
            c = int(rng.integers(20))
            out.append(ProbeExample(np.array([c, c, c, c]), c, i))
        else:
            a, b = sorted(rng.choice(20, 2, replace=False).tolist())
            out.append(ProbeExample(np.array([a, b, a, b]), (a, b), i))
    return out


def test_oracle_tokens_reach_perfect_accuracy():
    _, res = train_probe(small("single-label"), _oracle_examples(400, 0), _oracle_examples(100, 1),
                         _oracle_examples(100, 2))
    assert res.accuracy == 1.0
    _, res = train_probe(small("multi-label"), _oracle_examples(600, 0, "m"), _oracle_examples(100, 1, "m"),
                         _oracle_examples(100, 2, "m"))
    assert res.accuracy > 0.95
    assert res.best_step > 0 and res.history


def test_constant_tokens_stay_near_chance():
    ex = lambda n, s: [ProbeExample(np.zeros(4, int), int(c), i)
                       for i, c in enumerate(np.random.default_rng(s).integers(0, 20, n))]
    _, res = train_probe(small("single-label", max_epochs=5), ex(400, 0), ex(200, 1), ex(400, 2))
    assert res.accuracy < 0.15


def test_examples_from_scenes():
    scenes = generate(30, seed=0)
    ids = np.zeros((30, 4), dtype=np.int64)
    single = make_examples(ids, scenes, "single-label")
    assert len(single) == 30
    s = scenes[0]
    assert single[0].label == s.objects[int(np.argmax([o.mask.sum() for o in s.objects]))].category
    assert dominant_category(s) == single[0].label
    rel = make_examples(ids, scenes, "relational")
    assert len(rel) == sum(len(s.objects) > 1 for s in scenes)
    with pytest.raises(ValueError):
        make_examples(ids, scenes, "multi-label")


def test_candidate_sampling():
    ex = [ProbeExample(np.zeros(4, int), [(i, 0, (i + 1) % 20)], i) for i in range(20)]
    rng = np.random.default_rng(0)
    c = sample_candidates(ex, ex, 9, rng)
    assert c.shape == (20, 10, 3)
    for row, e in zip(c.tolist(), ex):
        assert tuple(row[0]) in e.label
        negs = [tuple(t) for t in row[1:]]
        assert len(set(negs)) == 9 and not set(negs) & set(e.label)
    with pytest.raises(ValueError):
        sample_candidates(ex[:5], ex[:5], 9, rng)


def test_relational_ordering_invariance():
    torch.manual_seed(0)
    r = ProbeNet(small("relational")).eval()
    ids = torch.randint(0, 20, (2, 4))
    trip = torch.randint(0, 4, (2, 10, 3))
    full = r(ids, trip)
    perm = torch.randperm(10)
    assert torch.allclose(r(ids, trip[:, perm]), full[:, perm], atol=1e-6)


def test_token_dir(tmp_path):
    for i in range(3):
        write_message_dump(tmp_path / f"{i}.comt", np.arange(4) + i, 1600)
    (tmp_path / "tokenizer.json").write_text('{"levels": [8, 8, 5, 5]}')
    toks, info = load_token_dir(tmp_path)
    assert set(toks) == {0, 1, 2} and info["vocab_size"] == 1600 and info["length"] == 4
    cfg = probe_config_for(info, "single-label")
    assert cfg.levels == (8, 8, 5, 5)
    with pytest.raises(FileNotFoundError):
        load_token_dir(tmp_path / "nope")
