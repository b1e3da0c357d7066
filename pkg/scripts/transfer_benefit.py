"""Compare the three training regimes from the same proxy-pretrained checkpoint.

For each seed: pretrain an audio (or video) network on the synthetic word-class
proxy task, then train on a smile/laugh corpus from scratch, with full
fine-tuning and with last-layers fine-tuning. Prints validation UAR per epoch.

    python scripts/transfer_benefit.py --modality audio --seeds 0 1 2
"""

import argparse
import json
from pathlib import Path

import numpy as np
import torch

from sldetect import data, models, synth, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--modality", choices=("audio", "video"), default="audio")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--per-class", type=int, default=60)
    p.add_argument("--sources", type=int, default=6)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--proxy-epochs", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--out", default="runs/transfer_benefit")
    args = p.parse_args()
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    results = []
    for seed in args.seeds:
        root = out / f"corpus_{seed}"
        synth.gen_corpus(synth.SynthSpec(seed=seed, n_laugh=args.per_class, n_smile=args.per_class,
                                         n_none=args.per_class, n_sources=args.sources), root)
        windows = data.prepare(root, seed=seed)
        clips = data.build_clips(root, windows, (args.modality,))
        split = np.array([w.split.value for w in windows])
        tr, va = (clips.subset(np.flatnonzero(split == s)) for s in ("train", "val"))

        px, py = synth.gen_proxy_task(args.modality, 5, 40, seed=seed)
        proxy = models.build_modality_net(args.modality, models.ModelConfig(n_classes=5), seed=seed)
        pre = train.proxy_pretrain(proxy, torch.from_numpy(px), py,
                                   train.TrainConfig(modality=args.modality, epochs=args.proxy_epochs,
                                                     lr0=args.lr, seed=seed))
        ckpt = out / f"proxy_{seed}.slck"
        models.save_model(ckpt, proxy, args.modality)
        print(f"seed {seed}: proxy loss {pre.losses[0]:.3f} -> {pre.losses[-1]:.3f}")

        for regime in train.REGIMES:
            net = models.build_modality_net(args.modality, models.ModelConfig(), seed=seed)
            cfg = train.TrainConfig(modality=args.modality, epochs=args.epochs, lr0=args.lr, seed=seed, regime=regime,
                                    pretrained_checkpoint=None if regime == "scratch" else str(ckpt))
            res = train.train_modality(cfg, net, tr, va)
            curve = [r.val_uar for r in res.log.records]
            results.append({"seed": seed, "regime": regime, "val_uar": curve})
            print(f"  {regime:<15} " + " ".join(f"{u:.2f}" for u in curve))

    for regime in train.REGIMES:
        final = [r["val_uar"][-1] for r in results if r["regime"] == regime]
        print(f"{regime:<15} final val UAR {np.mean(final):.3f} +- {np.std(final):.3f}")
    (out / "results.json").write_text(json.dumps({"args": vars(args), "runs": results}, indent=2) + "\n")


if __name__ == "__main__":
    main()
