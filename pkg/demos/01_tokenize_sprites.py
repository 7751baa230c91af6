"""
Tokenizing sprites crop by crop
===============================

Train a desk-sized tokenizer for a few minutes, then watch the message change
as the encoder looks at one crop after another.

    python3 demos/01_tokenize_sprites.py --steps 300 --out demo_out
"""

import argparse
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from comit.align import OracleTeacher
from comit.analysis import psnr, to_uint8, uncertainty_panel
from comit.datagen import generate, images_tensor
from comit.flow import GuidanceConfig, decode
from comit.model import BackboneConfig
from comit.policies import PolicySpec, encode_global, run_policy
from comit.quantizer import LatentMessage
from comit.trainer import TrainConfig, Trainer

p = argparse.ArgumentParser()
p.add_argument("--steps", type=int, default=300)
p.add_argument("--out", default="demo_out")
args = p.parse_args()
out = Path(args.out)
out.mkdir(exist_ok=True)
torch.set_num_threads(1)

# The data: 64x64 canvases holding one to three coloured shapes.
scenes = generate(2000, seed=0)
data = torch.from_numpy(np.stack([s.canvas for s in scenes]))

# The oracle teacher stands in for a frozen vision model; its features feed
# both alignment losses.
teacher = OracleTeacher().table(scenes)

# One network both encodes and decodes. Training draws a random crop count per
# batch and only backpropagates through the last encoding step.
tr = Trainer(BackboneConfig(), TrainConfig(batch_size=32, warmup_steps=100))
tr.fit(data, teacher, steps=args.steps, log_every=50)
model = tr.ema.eval()

# Global-crop encodings of unseen images, decoded with the default sampler.
test = images_tensor(generate(8, seed=123))
ids = encode_global(model, test)
print("message ids of the first image:", ids[0].tolist())
recon = decode(model, LatentMessage.from_ids(ids, model.config.fsq), GuidanceConfig(),
               torch.Generator().manual_seed(0))
print(f"global-crop PSNR: {psnr(recon, test):.2f} dB")

# Now let policies pick the crops. Each panel strip shows the input, a one-step
# preview after every crop, and a full decode at the end.
for kind in ("raster", "adaptive"):
    spec = PolicySpec(kind, n_local=3)
    res = run_policy(test[0], spec, model, seed=0)
    print(kind, "crop centers:", [tuple(round(v, 3) for v in c) for c in res.plan.centers])
    strip = uncertainty_panel(model, test[0], res.trace, res.plan)
    Image.fromarray(strip).save(out / f"strip_{kind}.png")

Image.fromarray(np.concatenate([to_uint8(x) for x in recon], axis=1)).save(out / "reconstructions.png")
tr.save(out / "checkpoint")
print("wrote", out)
