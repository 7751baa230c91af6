"""
What do the tokens know?
========================

Freeze a trained tokenizer, encode sprites with the global crop, and train
small two-layer probes on the token ids for three questions: which shape
dominates, which pair of shapes is present (on category pairs never seen in
training), and which relation holds between two objects.

    python3 demos/02_probe_messages.py demo_out/checkpoint
"""

import sys

import numpy as np
import torch

from comit.datagen import generate, generate_scene, images_tensor, pair_disjoint_split
from comit.policies import encode_global
from comit.probes import ProbeConfig, make_examples, random_pairs_baseline, train_probe
from comit.trainer import load_model

torch.set_num_threads(1)
model = load_model(sys.argv[1] if len(sys.argv) > 1 else "demo_out/checkpoint")
mcfg = model.config
probe_kw = dict(seq_len=mcfg.message_length, levels=mcfg.levels, lr=1e-3, max_epochs=30, patience=5)


def tokens(scenes):
    return encode_global(model, images_tensor(scenes)).numpy()


# classification of the largest object
scenes = generate(3000, seed=7)
ids = tokens(scenes)
ex = make_examples(ids, scenes, "single-label")
_, res = train_probe(ProbeConfig("single-label", **probe_kw), ex[:2000], ex[2000:2500], ex[2500:])
print(f"single-label top-1 {res.accuracy:.3f}   (chance 0.050)")

# pairs: no category pair is shared between train and test
two = [generate_scene(np.random.default_rng([11, i]), n_objects=2) for i in range(3000)]
tr, te = pair_disjoint_split(two, 0.3, seed=0)
ids2 = tokens(two)
ex2 = make_examples(ids2, two, "multi-label")
train = [ex2[i] for i in tr]
_, res = train_probe(ProbeConfig("multi-label", **probe_kw), train[300:], train[:300], [ex2[i] for i in te])
print(f"pair top-5      {res.accuracy:.3f}   (chance {random_pairs_baseline():.4f})")

# relations against nine distractor triplets
ex3 = make_examples(ids, scenes, "relational")
n = len(ex3)
_, res = train_probe(ProbeConfig("relational", **probe_kw), ex3[:int(.7 * n)], ex3[int(.7 * n):int(.85 * n)],
                     ex3[int(.85 * n):])
print(f"relational      {res.accuracy:.3f}   (chance 0.100)")
