"""``comit`` command-line interface.

Every subcommand resolves its settings as built-in default < JSON config file
(``--config``) < explicit flag, writes a ``manifest.json`` into its run
directory, and derives per-module seeds from one global ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from . import __version__

log = logging.getLogger("comit")

DEFAULT_ROOT = "runs"


def derive_seed(seed: int, module: str) -> int:
    """Stable 31-bit seed for ``module`` derived from the global seed."""
    h = hashlib.sha256(f"{seed}:{module}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def output_root() -> Path:
    return Path(os.environ.get("COMIT_HOME", DEFAULT_ROOT))


def write_manifest(run_dir: Path, command: str, config: dict, started: float) -> dict:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": config.get("seed"),
        "version": __version__,
        "output_dir": ".",
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


# -- subcommand defaults ------------------------------------------------------------

DEFAULTS = {
    "make-data": {"n": 10000, "seed": 0, "out": None, "val_fraction": 0.1, "test_fraction": 0.1,
                  "pair_eval_fraction": 0.3},
    "train": {"data": None, "out": None, "preset": "desk", "steps": None, "epochs": 1.0, "batch_size": 32,
              "lr": 3e-4, "warmup": 100, "lambda_repa": 0.5, "lambda_srepa": 0.5, "p_cfg": 0.18,
              "p_global": 0.55, "k_max": 9, "crop_size": 24, "teacher_features": None, "seed": 0,
              "resume": False},
    "encode": {"checkpoint": None, "data": None, "ids": None, "limit": None, "policy": "global",
               "with_global": True, "n_local": None, "grid": 3, "crop_size": 24, "seed": 0, "out": None,
               "raw_weights": False},
    "decode": {"checkpoint": None, "message": None, "plan": None, "nfe": 10, "cfg": 7.5, "seed": 0,
               "out": None, "raw_weights": False},
    "probe": {"tokens": None, "data": None, "task": "single-label", "negatives": 9, "lr": 1e-4,
              "epochs": 100, "patience": 10, "batch_size": 64, "seed": 0, "out": None},
    "analyze-attn": {"checkpoint": None, "data": None, "ids": None, "limit": 200, "q": 30.0, "layer": None,
                     "t": 0.1, "seed": 0, "out": None, "raw_weights": False},
    "neighbors": {"tokens": None, "k": 5, "query": None, "exclude_self": False, "out": None, "seed": 0},
    "reconstruct-grid": {"checkpoint": None, "data": None, "ids": None, "policy": "adaptive",
                         "with_global": True, "n_local": None, "grid": 3, "crop_size": 24, "seed": 0,
                         "out": None, "raw_weights": False},
}

REQUIRED = {
    "make-data": (), "train": ("data",), "encode": ("checkpoint", "data"), "decode": ("checkpoint", "message"),
    "probe": ("tokens", "data"), "analyze-attn": ("checkpoint", "data"), "neighbors": ("tokens",),
    "reconstruct-grid": ("checkpoint", "data"),
}


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _ids(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="comit", description="Crop-based discrete image tokenizer tools.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def cmd(name, help):
        s = sub.add_parser(name, help=help, argument_default=None)
        s.add_argument("--config", help="JSON file with settings; flags override it")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output location (defaults under $COMIT_HOME)")
        return s

    s = cmd("make-data", "generate the sprite dataset")
    s.add_argument("--n", type=int)
    s.add_argument("--val-fraction", type=float)
    s.add_argument("--test-fraction", type=float)
    s.add_argument("--pair-eval-fraction", type=float)

    s = cmd("train", "train a tokenizer")
    s.add_argument("--data")
    s.add_argument("--preset", choices=["desk", "B", "L", "XL"])
    s.add_argument("--steps", type=int)
    s.add_argument("--epochs", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--warmup", type=int)
    s.add_argument("--lambda-repa", type=float)
    s.add_argument("--lambda-srepa", type=float)
    s.add_argument("--p-cfg", type=float)
    s.add_argument("--p-global", type=float)
    s.add_argument("--k-max", type=int)
    s.add_argument("--crop-size", type=int)
    s.add_argument("--teacher-features", help="precomputed teacher features (.safetensors + .json)")
    s.add_argument("--resume", type=_bool, nargs="?", const=True)

    def policy_flags(s):
        s.add_argument("--checkpoint")
        s.add_argument("--data")
        s.add_argument("--ids", type=_ids, help="comma-separated image ids")
        s.add_argument("--policy", choices=["global", "random", "raster", "adaptive"])
        s.add_argument("--with-global", type=_bool, nargs="?", const=True)
        s.add_argument("--n-local", type=int)
        s.add_argument("--grid", type=int)
        s.add_argument("--crop-size", type=int)
        s.add_argument("--raw-weights", type=_bool, nargs="?", const=True)

    s = cmd("encode", "encode images into COMT message dumps")
    policy_flags(s)
    s.add_argument("--limit", type=int)

    s = cmd("decode", "decode a COMT message into a PNG")
    s.add_argument("--checkpoint")
    s.add_argument("--message")
    s.add_argument("--plan", help="crop-plan JSON; its global offset conditions the decoder")
    s.add_argument("--nfe", type=int)
    s.add_argument("--cfg", type=float)
    s.add_argument("--raw-weights", type=_bool, nargs="?", const=True)

    s = cmd("probe", "train and evaluate a frozen-token probe")
    s.add_argument("--tokens", help="directory of COMT dumps")
    s.add_argument("--data")
    s.add_argument("--task", choices=["single-label", "multi-label", "relational"])
    s.add_argument("--negatives", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--batch-size", type=int)

    s = cmd("analyze-attn", "best-token attention IoU against object masks")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--ids", type=_ids)
    s.add_argument("--limit", type=int)
    s.add_argument("--q", type=float)
    s.add_argument("--layer", type=int)
    s.add_argument("--t", type=float)
    s.add_argument("--raw-weights", type=_bool, nargs="?", const=True)

    s = cmd("neighbors", "nearest neighbours in message space")
    s.add_argument("--tokens")
    s.add_argument("--k", type=int)
    s.add_argument("--query", type=_ids)
    s.add_argument("--exclude-self", type=_bool, nargs="?", const=True)

    s = cmd("reconstruct-grid", "per-crop reconstruction strips")
    policy_flags(s)
    return p


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then any flag given on the command line."""
    cfg = dict(DEFAULTS[command])
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        file_cfg = {k.replace("-", "_"): v for k, v in json.loads(path.read_text()).items()}
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise ValueError(f"unknown keys in {path}: {sorted(unknown)}")
        cfg.update(file_cfg)
    for k, v in vars(args).items():
        if k in cfg and v is not None:
            cfg[k] = v
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise ValueError(f"{command}: missing required setting(s) {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


def run_dir_for(command: str, cfg: dict) -> Path:
    if cfg.get("out"):
        return Path(cfg["out"])
    return output_root() / f"{command}-{config_hash(cfg)[:10]}"


# -- helpers ---------------------------------------------------------------------------

def _checkpoint(path) -> Path:
    p = Path(path)
    if not (p / "config.json").exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return p


def _load_model(cfg):
    from .trainer import load_model
    return load_model(_checkpoint(cfg["checkpoint"]), ema=not cfg.get("raw_weights", False))


def _image_ids(data: Path, cfg) -> list[int]:
    if cfg.get("ids") is not None:
        ids = list(cfg["ids"])
    else:
        ids = sorted(int(f.stem) for f in (data / "images").glob("*.png"))
    if cfg.get("limit") is not None:
        ids = ids[:cfg["limit"]]
    return ids


def _load_image(data: Path, i: int) -> torch.Tensor:
    f = data / "images" / f"{i:06d}.png"
    if not f.exists():
        raise FileNotFoundError(f"image not found: {f}")
    arr = np.array(Image.open(f).convert("RGB"))
    return torch.from_numpy(arr).permute(2, 0, 1).float() / 127.5 - 1.0


def _policy(cfg):
    from .policies import PolicySpec
    return PolicySpec(kind=cfg["policy"], with_global=cfg["with_global"], n_local=cfg["n_local"],
                      grid=cfg["grid"], crop_size=cfg["crop_size"])


# -- commands ----------------------------------------------------------------------------

def cmd_make_data(cfg, run_dir: Path):
    from .datagen import InfeasibleSplitError, generate, pair_disjoint_split, save_dataset
    n = cfg["n"]
    scenes = generate(n, seed=derive_seed(cfg["seed"], "datagen"))
    rng = np.random.default_rng(derive_seed(cfg["seed"], "splits"))
    perm = rng.permutation(n)
    n_val, n_test = int(n * cfg["val_fraction"]), int(n * cfg["test_fraction"])
    splits = {"val": sorted(perm[:n_val].tolist()), "test": sorted(perm[n_val:n_val + n_test].tolist()),
              "train": sorted(perm[n_val + n_test:].tolist())}
    two = [i for i, s in enumerate(scenes) if len(set(s.categories)) == 2]
    try:
        tr, ev = pair_disjoint_split([scenes[i] for i in two], cfg["pair_eval_fraction"],
                                     seed=derive_seed(cfg["seed"], "pairs"))
        splits["pairs_train"] = [two[i] for i in tr]
        splits["pairs_eval"] = [two[i] for i in ev]
    except InfeasibleSplitError as e:
        log.warning("no pair-disjoint split for %d two-category scenes: %s", len(two), e)
    save_dataset(run_dir, scenes, splits)
    print(f"wrote {n} scenes to {run_dir}")


def cmd_train(cfg, run_dir: Path):
    from .align import FileTeacher, OracleTeacher
    from .datagen import load_dataset, load_split
    from .model import BackboneConfig
    from .trainer import TrainConfig, Trainer

    data_dir = Path(cfg["data"])
    scenes = load_dataset(data_dir)
    try:
        idx = load_split(data_dir, "train")
    except FileNotFoundError:
        idx = list(range(len(scenes)))
    scenes = [scenes[i] for i in idx]
    data = torch.from_numpy(np.stack([s.canvas for s in scenes]))
    mcfg = BackboneConfig.preset(cfg["preset"])
    seed = derive_seed(cfg["seed"], "train")
    if cfg["teacher_features"]:
        ft = FileTeacher(cfg["teacher_features"])
        teacher = ft.table(idx)
        tdim, sdim = ft.dim, ft.spatial_dim
    else:
        tdim = sdim = 64
        teacher = OracleTeacher(tdim, sdim, mcfg.patch_size, seed=derive_seed(cfg["seed"], "teacher")).table(scenes)
    tcfg = TrainConfig(lr_base=cfg["lr"], warmup_steps=cfg["warmup"], epochs=cfg["epochs"], max_steps=cfg["steps"],
                       batch_size=cfg["batch_size"], lambda_repa=cfg["lambda_repa"],
                       lambda_srepa=cfg["lambda_srepa"], p_cfg=cfg["p_cfg"], p_global=cfg["p_global"],
                       k_max=cfg["k_max"], crop_size=cfg["crop_size"], teacher_dim=tdim,
                       teacher_spatial_dim=sdim, seed=seed)
    ckpt = run_dir / "checkpoint"
    if cfg["resume"] and (ckpt / "config.json").exists():
        tr = Trainer.load(ckpt, mcfg)
    else:
        tr = Trainer(mcfg, tcfg)
    steps = tcfg.total_steps(len(scenes))
    run_dir.mkdir(parents=True, exist_ok=True)
    tr.fit(data, teacher, steps=steps, metrics_path=run_dir / "metrics.jsonl")
    tr.save(ckpt)
    print(f"trained {tr.step} steps; checkpoint at {ckpt}")


def cmd_encode(cfg, run_dir: Path):
    from .policies import run_policy
    from .quantizer import write_message_dump
    model = _load_model(cfg)
    spec = _policy(cfg)
    data = Path(cfg["data"])
    run_dir.mkdir(parents=True, exist_ok=True)
    mcfg = model.config
    (run_dir / "tokenizer.json").write_text(json.dumps(
        {"levels": list(mcfg.levels), "length": mcfg.message_length, "vocab_size": mcfg.fsq.vocab_size}))
    ids = _image_ids(data, cfg)
    for i in ids:
        res = run_policy(_load_image(data, i), spec, model, seed=derive_seed(cfg["seed"], f"encode:{i}"))
        write_message_dump(run_dir / f"{i:06d}.comt", res.message.ids.tolist(), mcfg.fsq.vocab_size)
        (run_dir / f"{i:06d}.plan.json").write_text(res.plan.to_json())
    print(f"encoded {len(ids)} images into {run_dir}")


def cmd_decode(cfg, run_dir: Path, out_png: Path):
    from .analysis import to_uint8
    from .flow import GuidanceConfig, decode
    from .geometry import CropPlan
    from .quantizer import LatentMessage, read_message_dump
    model = _load_model(cfg)
    msg_path = Path(cfg["message"])
    if not msg_path.exists():
        raise FileNotFoundError(f"message dump not found: {msg_path}")
    ids, vocab = read_message_dump(msg_path)
    mcfg = model.config
    if vocab != mcfg.fsq.vocab_size or ids.size != mcfg.message_length:
        raise ValueError(f"{msg_path} holds {ids.size} ids over {vocab} codes; "
                         f"the model expects {mcfg.message_length} over {mcfg.fsq.vocab_size}")
    offset = [0.0, 0.0]
    plan_path = Path(cfg["plan"]) if cfg["plan"] else msg_path.with_name(msg_path.stem + ".plan.json")
    if plan_path.exists():
        offset = list(CropPlan.from_json(plan_path.read_text()).global_offset)
    gen = torch.Generator().manual_seed(derive_seed(cfg["seed"], "decode"))
    msg = LatentMessage.from_ids(torch.from_numpy(ids), mcfg.fsq)
    x = decode(model, msg, GuidanceConfig(weight=cfg["cfg"], nfe=cfg["nfe"]), gen, global_offset=offset)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x[0])).save(out_png)
    print(f"wrote {out_png}")


def _probe_splits(task, image_ids, scenes_by_id, seed):
    from .datagen import pair_disjoint_split
    rng = np.random.default_rng(seed)
    if task == "multi-label":
        ids = [i for i in image_ids if len(set(scenes_by_id[i].categories)) == 2]
        tr, ev = pair_disjoint_split([scenes_by_id[i] for i in ids], 0.3, seed=seed)
        tr = [ids[j] for j in tr]
        ev = [ids[j] for j in ev]
        tr = [tr[j] for j in rng.permutation(len(tr))]
        n_val = max(1, len(tr) // 10)
        return tr[n_val:], tr[:n_val], ev
    ids = [image_ids[j] for j in rng.permutation(len(image_ids))]
    n_val = n_test = max(1, len(ids) * 15 // 100)
    return ids[n_val + n_test:], ids[:n_val], ids[n_val:n_val + n_test]


def cmd_probe(cfg, run_dir: Path):
    from .datagen import load_dataset
    from .probes import load_token_dir, make_examples, probe_config_for, train_probe, write_results
    tokens, info = load_token_dir(cfg["tokens"])
    scenes = load_dataset(cfg["data"])
    by_id = {i: s for i, s in enumerate(scenes)}
    missing = [i for i in tokens if i not in by_id]
    if missing:
        raise KeyError(f"token dumps for unknown image ids {missing[:5]}")
    seed = derive_seed(cfg["seed"], "probe")
    tr, va, te = _probe_splits(cfg["task"], sorted(tokens), by_id, seed)
    ex = lambda ids: make_examples(np.stack([tokens[i] for i in ids]), [by_id[i] for i in ids], cfg["task"], ids)
    pcfg = probe_config_for(info, cfg["task"], lr=cfg["lr"], max_epochs=cfg["epochs"], patience=cfg["patience"],
                            batch_size=cfg["batch_size"], negatives=cfg["negatives"], seed=seed)
    _, res = train_probe(pcfg, ex(tr), ex(va), ex(te))
    run_dir.mkdir(parents=True, exist_ok=True)
    write_results(run_dir / "results.json", res)
    print(json.dumps(res.to_dict()))


def cmd_analyze_attn(cfg, run_dir: Path):
    from .analysis import AttnAnalysisConfig, miou_best_token, token_attention_maps
    from .datagen import load_dataset
    from .policies import encode_global
    from .quantizer import LatentMessage
    model = _load_model(cfg)
    mcfg = model.config
    data = Path(cfg["data"])
    scenes = load_dataset(data)
    ids = _image_ids(data, cfg)
    acfg = AttnAnalysisConfig(layer=cfg["layer"], denoise_t=cfg["t"], threshold_q=cfg["q"],
                              seed=derive_seed(cfg["seed"], "analysis"))
    images = torch.stack([_load_image(data, i) for i in ids]) if ids else torch.zeros(0)
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    if ids:
        msg = LatentMessage.from_ids(encode_global(model, images), mcfg.fsq)
        maps = token_attention_maps(model, images, msg, config=acfg).numpy()
        miou, per = miou_best_token(maps, [scenes[i].patch_mask(mcfg.patch_size) for i in ids], acfg.threshold_q)
        rows = [(i, tok, iou) for i, (iou, tok) in zip(ids, per)]
    else:
        miou = float("nan")
    with open(run_dir / "iou.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "best_token", "iou"])
        w.writerows(rows)
    summary = {"miou": miou, "images": len(rows), "layer": acfg.resolve_layer(mcfg.depth), "t": acfg.denoise_t,
               "q": acfg.threshold_q}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))


def cmd_neighbors(cfg, run_dir: Path):
    from .analysis import nearest_neighbors
    from .probes import load_token_dir
    from .quantizer import FsqSpec
    tokens, info = load_token_dir(cfg["tokens"])
    if info.get("levels") is None:
        raise ValueError("neighbors needs tokenizer.json with FSQ levels next to the dumps")
    spec = FsqSpec(tuple(info["levels"]))
    gallery_ids = sorted(tokens)
    gallery = np.stack([tokens[i] for i in gallery_ids])
    queries = cfg["query"] if cfg["query"] is not None else gallery_ids
    k = cfg["k"] + (1 if cfg["exclude_self"] else 0)
    out = {}
    for q in queries:
        if q not in tokens:
            raise KeyError(f"no token dump for query image {q}")
        idx, sims = nearest_neighbors(tokens[q], gallery, spec, min(k, len(gallery_ids)))
        ranked = [(gallery_ids[j], float(s)) for j, s in zip(idx, sims)]
        if cfg["exclude_self"]:
            ranked = [r for r in ranked if r[0] != q]
        out[str(q)] = [{"id": i, "similarity": s} for i, s in ranked[:cfg["k"]]]
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "neighbors.json").write_text(json.dumps(out, indent=2))
    print(f"wrote neighbours for {len(out)} queries to {run_dir / 'neighbors.json'}")


def cmd_reconstruct_grid(cfg, run_dir: Path):
    from .analysis import uncertainty_panel
    from .policies import run_policy
    model = _load_model(cfg)
    spec = _policy(cfg)
    data = Path(cfg["data"])
    ids = list(cfg["ids"]) if cfg["ids"] is not None else []
    run_dir.mkdir(parents=True, exist_ok=True)
    for i in ids:
        seed = derive_seed(cfg["seed"], f"panel:{i}")
        image = _load_image(data, i)
        res = run_policy(image, spec, model, seed=seed)
        strip = uncertainty_panel(model, image, res.trace, res.plan, seed=seed)
        Image.fromarray(strip).save(run_dir / f"strip_{i:06d}.png")
    print(f"wrote {len(ids)} strips to {run_dir}")


COMMANDS = {
    "make-data": cmd_make_data, "train": cmd_train, "encode": cmd_encode, "decode": cmd_decode,
    "probe": cmd_probe, "analyze-attn": cmd_analyze_attn, "neighbors": cmd_neighbors,
    "reconstruct-grid": cmd_reconstruct_grid,
}


def main(argv: Optional[list] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    started = time.time()
    try:
        cfg = resolve(args.command, args)
        torch.manual_seed(derive_seed(cfg.get("seed", 0), "torch"))
        np.random.seed(derive_seed(cfg.get("seed", 0), "numpy"))
        if args.command == "decode":
            out = Path(cfg["out"]) if cfg["out"] else run_dir_for("decode", cfg) / "decoded.png"
            if out.suffix.lower() != ".png":
                out = out / "decoded.png"
            run_dir = out.parent
            cmd_decode(cfg, run_dir, out)
        else:
            run_dir = run_dir_for(args.command, cfg)
            COMMANDS[args.command](cfg, run_dir)
        write_manifest(run_dir, args.command, cfg, started)
    except (FileNotFoundError, ValueError, KeyError) as e:
        print(f"comit {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
