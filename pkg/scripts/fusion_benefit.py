"""Does late fusion beat either modality when each one carries half the evidence?

Generates a complementary synthetic corpus per seed (audio tells laughs from
smiles, video tells smiling from not smiling), trains both modality networks,
then the fusion head on their frozen outputs, and reports test UAR for all three.

    python scripts/fusion_benefit.py --seeds 0 1 2 --out runs/fusion_benefit
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np
import torch

from sldetect import data, evaluation, models, synth, train


def uar(model, clips):
    pred = train.predict_clips(model, clips).logits.argmax(1).numpy()
    return evaluation.metrics(evaluation.confusion(pred, clips.labels)).uar


def run_seed(seed, args, out: Path) -> dict:
    root = out / f"corpus_{seed}"
    spec = synth.SynthSpec(seed=seed, n_laugh=args.per_class, n_smile=args.per_class, n_none=args.per_class,
                           n_sources=args.sources, informativeness=args.mode)
    synth.gen_corpus(spec, root)
    windows = data.prepare(root, seed=seed)
    clips = data.build_clips(root, windows)
    split = np.array([w.split.value for w in windows])
    tr, va, te = (clips.subset(np.flatnonzero(split == s)) for s in ("train", "val", "test"))
    nets = {}
    for mod in ("audio", "video"):
        nets[mod] = models.build_modality_net(mod, models.ModelConfig(), seed=seed)
        cfg = train.TrainConfig(modality=mod, epochs=args.epochs, lr0=args.lr, seed=seed)
        train.train_modality(cfg, nets[mod], tr, va)
    fused, _ = train.train_fusion(train.TrainConfig.fusion(epochs=args.fusion_epochs, lr0=args.fusion_lr, seed=seed),
                                  nets["audio"], nets["video"], tr, va)
    return {"seed": seed, "audio": uar(nets["audio"], te), "video": uar(nets["video"], te), "fusion": uar(fused, te)}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--sources", type=int, default=10)
    p.add_argument("--mode", choices=synth.MODES, default="complementary")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--fusion-epochs", type=int, default=30)
    p.add_argument("--fusion-lr", type=float, default=0.05)
    p.add_argument("--out", default="runs/fusion_benefit")
    args = p.parse_args()
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    print(f"{'seed':>4} {'audio':>7} {'video':>7} {'fusion':>7} {'secs':>6}")
    for seed in args.seeds:
        t0 = time.perf_counter()
        row = run_seed(seed, args, out)
        rows.append(row)
        print(f"{seed:>4} {row['audio']:7.3f} {row['video']:7.3f} {row['fusion']:7.3f} {time.perf_counter() - t0:6.0f}")
    margin = [r["fusion"] - max(r["audio"], r["video"]) for r in rows]
    print(f"fusion minus best single modality: mean {np.mean(margin):+.3f}, min {np.min(margin):+.3f}")
    (out / "results.json").write_text(json.dumps({"args": vars(args), "rows": rows}, indent=2) + "\n")


if __name__ == "__main__":
    main()
