"""
Where do the tokens look?
=========================

Each message slot attends to image patches while the decoder denoises. Keep
the 30% most-attended patches of the best slot and compare them with the
object masks. Then use the messages themselves as retrieval keys.

    python3 demos/03_attention_and_neighbors.py demo_out/checkpoint
"""

import sys

import numpy as np
import torch

from comit.analysis import AttnAnalysisConfig, miou_best_token, nearest_neighbors, token_attention_maps
from comit.datagen import CATEGORIES, generate, images_tensor
from comit.policies import encode_global
from comit.quantizer import LatentMessage
from comit.trainer import load_model

torch.set_num_threads(1)
model = load_model(sys.argv[1] if len(sys.argv) > 1 else "demo_out/checkpoint")
mcfg = model.config

scenes = generate(200, seed=3)
images = images_tensor(scenes)
ids = encode_global(model, images)
maps = token_attention_maps(model, images, LatentMessage.from_ids(ids, mcfg.fsq), config=AttnAnalysisConfig())
masks = [s.patch_mask(mcfg.patch_size) for s in scenes]
miou, per = miou_best_token(maps.numpy(), masks, 30.0)
print(f"best-token mIoU over {len(scenes)} images: {miou:.3f}")
print("most useful slots:", np.bincount([slot for _, slot in per], minlength=mcfg.message_length).tolist())

# nearest neighbours in message space; similar scenes should share categories
def names(i):
    return ", ".join(CATEGORIES[c] for c in scenes[i].categories)


idx, sims = nearest_neighbors(ids[:5].numpy(), ids.numpy(), mcfg.fsq, k=4)
for q, (row, s) in enumerate(zip(idx, sims)):
    print(f"query [{names(q)}]")
    for j, v in zip(row[1:], s[1:]):
        print(f"    {v:.3f}  [{names(j)}]")
