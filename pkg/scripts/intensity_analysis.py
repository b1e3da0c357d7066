"""Intensity-level analysis of trained models on a synthetic corpus.

Trains audio, video and fusion models, then for each one writes the
intensity-stratified heatmap (CSV and SVG) of its test predictions and a t-SNE
projection of its embeddings. Finally applies the two-class remap over the
three heatmaps and prints mean and spread.

    python scripts/intensity_analysis.py --seed 0 --out runs/intensity
"""

import argparse
import json
from pathlib import Path

import numpy as np
import torch

from sldetect import data, embed, evaluation, models, synth, train
from sldetect.corpus import CLASSES


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-class", type=int, default=120)
    p.add_argument("--sources", type=int, default=8)
    p.add_argument("--mode", choices=synth.MODES, default="both")
    p.add_argument("--video-cue", type=float, default=0.5, help="weaker cues leave room for intensity confusions")
    p.add_argument("--audio-cue", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--out", default="runs/intensity")
    args = p.parse_args()
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    spec = synth.SynthSpec(seed=args.seed, n_laugh=args.per_class, n_smile=args.per_class, n_none=args.per_class,
                           n_sources=args.sources, informativeness=args.mode,
                           audio_cue=args.audio_cue, video_cue=args.video_cue)
    root = out / "corpus"
    synth.gen_corpus(spec, root)
    windows = data.prepare(root, seed=args.seed)
    clips = data.build_clips(root, windows)
    split = np.array([w.split.value for w in windows])
    tr, va, te = (clips.subset(np.flatnonzero(split == s)) for s in ("train", "val", "test"))

    nets = {}
    for mod in ("audio", "video"):
        nets[mod] = models.build_modality_net(mod, models.ModelConfig(), seed=args.seed)
        train.train_modality(train.TrainConfig(modality=mod, epochs=args.epochs, lr0=args.lr, seed=args.seed),
                             nets[mod], tr, va)
    nets["fusion"], _ = train.train_fusion(train.TrainConfig.fusion(lr0=0.05, seed=args.seed),
                                           nets["audio"], nets["video"], tr, va)

    labels = [CLASSES[int(i)] for i in te.labels]
    heatmaps = []
    for name, net in nets.items():
        o = train.predict_clips(net, te)
        pred = o.logits.argmax(1).numpy()
        hm = evaluation.intensity_heatmap(pred, labels, te.intensities, te.ids)
        heatmaps.append(hm)
        (out / f"heatmap_{name}.csv").write_text(hm.to_csv())
        (out / f"heatmap_{name}.svg").write_text(hm.to_svg(name))
        report = evaluation.metrics(evaluation.confusion(pred, te.labels))
        vectors = o.embedding.numpy().astype(np.float64)
        proj = embed.tsne(vectors, embed.TsneConfig(perplexity=min(30.0, (len(vectors) - 1) / 3), seed=args.seed))
        csv_text, svg_text = embed.export_projection(proj, labels, te.intensities, title=name)
        (out / f"tsne_{name}.csv").write_text(csv_text)
        (out / f"tsne_{name}.svg").write_text(svg_text)
        print(f"{name:<7} test UAR {report.uar:.3f}  t-SNE KL {proj.kl_initial:.2f} -> {proj.kl:.2f}")
        for key, row, ok in zip(evaluation.HEATMAP_ROWS, hm.percentages, hm.supported):
            if ok:
                print(f"    {key:<13} " + " ".join(f"{v:5.1f}" for v in row))

    remap = evaluation.remap_two_class(heatmaps)
    print(f"two-class remap: {remap.mean:.2f} % +- {remap.std:.2f} % "
          f"(laugh recall alone {remap.baseline_mean:.2f} % +- {remap.baseline_std:.2f} %)")
    (out / "remap.json").write_text(json.dumps(remap.to_dict(), indent=2) + "\n")


if __name__ == "__main__":
    main()
