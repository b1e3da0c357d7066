"""Command-line entry point: ``python -m sldetect <command> ...``.

Each command writes its outputs plus a ``manifest.json`` into one run directory,
``$SL_RUNS_DIR/<name>`` (default ``runs/<name>``) unless ``--out`` is given.
Failures exit with status 2 and print a single line ``error: CODE: message``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import re
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import data, embed, evaluation, models, nnsub, synth, train
from .corpus import CLASSES, class_counts

PREDICTION_HEADER = ["id", "label", "intensity", "prediction", "p_laugh", "p_smile", "p_none"]


class CliError(Exception):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


def error_code(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.code
    return re.sub(r"(?<!^)(?=[A-Z])", "_", type(exc).__name__).upper()


# --------------------------------------------------------------------------- run directories


def runs_root() -> Path:
    return Path(os.environ.get("SL_RUNS_DIR", "runs"))


def run_dir(args) -> Path:
    out = Path(args.out) if args.out else runs_root() / (args.name or args.command)
    out.mkdir(parents=True, exist_ok=True)
    return out


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, args, inputs: dict, outputs: list[Path]) -> Path:
    manifest = {
        "command": args.command,
        "config": args.config,
        "seed": args.seed,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": {str(Path(p).relative_to(out)) if Path(p).is_relative_to(out) else str(p): sha256_file(p)
                    for p in sorted(outputs)},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _require(path, what: str) -> Path:
    if path is None:
        raise CliError("MISSING_ARGUMENT", f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise CliError("MISSING_INPUT", f"{what} {p} does not exist")
    return p


def _splits(args) -> list:
    path = Path(args.splits) if args.splits else Path(args.corpus) / "splits.csv"
    if not path.exists():
        raise CliError("MISSING_INPUT", f"split manifest {path} not found; run `prepare` first")
    return data.load_splits(path)


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> tuple[dict, list]:
    fields = {}
    if args.spec:
        fields = json.loads(_require(args.spec, "spec file").read_text())
    if args.seed is not None:
        fields["seed"] = args.seed
    if args.mode:
        fields["informativeness"] = args.mode
    spec = synth.SynthSpec.from_dict(fields)
    out = run_dir(args)
    synth.gen_corpus(spec, out)
    written = [p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"]
    return {"spec": args.spec}, written


def cmd_prepare(args) -> tuple[dict, list]:
    corpus = _require(args.corpus, "--corpus")
    windows = data.prepare(corpus, seed=args.seed or 0)
    out = Path(args.out) if args.out else corpus
    out.mkdir(parents=True, exist_ok=True)
    path = out / "splits.csv"
    data.save_splits(path, windows)
    summary = {split: {k.value: v for k, v in class_counts(data.windows_for(windows, split)).as_dict().items()}
               for split in ("train", "val", "test")}
    counts = _write(out / "split_counts.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    args.out = str(out)
    return {"corpus": corpus}, [path, counts]


def _train_config(args, modality: str) -> train.TrainConfig:
    kw = dict(modality=modality, seed=args.seed or 0, scale=args.scale, regime=args.regime,
              pretrained_checkpoint=args.pretrained)
    for name in ("epochs", "batch_size", "lr0", "lr_min"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    if modality == "fusion":
        kw.pop("modality")
        return train.TrainConfig.fusion(**kw)
    return train.TrainConfig(**kw)


def cmd_train(args) -> tuple[dict, list]:
    if args.modality not in ("audio", "video"):
        raise CliError("BAD_ARGUMENT", "use train-fusion for the fusion head")
    corpus = _require(args.corpus, "--corpus")
    windows = _splits(args)
    config = _train_config(args, args.modality)
    if config.regime != "scratch":
        _require(config.pretrained_checkpoint, "--pretrained")
    mcfg = models.ModelConfig(scale=args.scale)
    model = models.build_modality_net(args.modality, mcfg, config.seed)
    clips = data.build_clips(corpus, windows, (args.modality,))
    split_of = np.array([w.split.value for w in windows])
    result = train.train_modality(config, model, clips.subset(np.flatnonzero(split_of == "train")),
                                  clips.subset(np.flatnonzero(split_of == "val")))
    card = {"modality": args.modality, "model": mcfg.to_dict(), "seed": config.seed, "regime": config.regime}
    paths = train.write_run(run_dir(args), config, result.log, model, args.modality, card)
    return {"corpus": corpus, "pretrained": config.pretrained_checkpoint}, list(paths.values())


def cmd_pretrain_proxy(args) -> tuple[dict, list]:
    if args.modality not in ("audio", "video"):
        raise CliError("BAD_ARGUMENT", "proxy pretraining needs --modality audio or video")
    seed = args.seed or 0
    x, y = synth.gen_proxy_task(args.modality, args.classes, args.per_class, seed)
    mcfg = models.ModelConfig(scale=args.scale, n_classes=args.classes)
    model = models.build_modality_net(args.modality, mcfg, seed)
    config = train.TrainConfig(modality=args.modality, epochs=args.epochs or 20, seed=seed,
                               lr0=args.lr0 or 0.01, batch_size=args.batch_size or 16)
    result = train.proxy_pretrain(model, torch.from_numpy(x), y, config)
    out = run_dir(args)
    ckpt = out / "proxy.slck"
    card = {"modality": args.modality, "model": mcfg.to_dict(), "seed": seed, "regime": "proxy",
            "proxy_classes": args.classes}
    models.save_model(ckpt, model, args.modality, card)
    log = _write(out / "log.jsonl", "".join(json.dumps({"epoch": i, "train_loss": v}) + "\n"
                                           for i, v in enumerate(result.losses)))
    return {}, [ckpt, models.model_card_path(ckpt), log]


def cmd_train_fusion(args) -> tuple[dict, list]:
    corpus = _require(args.corpus, "--corpus")
    a_path = _require(args.audio_checkpoint, "--audio-checkpoint")
    v_path = _require(args.video_checkpoint, "--video-checkpoint")
    audio, a_card = train.load_checkpoint(a_path)
    video, v_card = train.load_checkpoint(v_path)
    if a_card["modality"] != "audio" or v_card["modality"] != "video":
        raise train.CheckpointMismatch("expected an audio and a video checkpoint")
    windows = _splits(args)
    clips = data.build_clips(corpus, windows)
    split_of = np.array([w.split.value for w in windows])
    config = _train_config(args, "fusion")
    net, result = train.train_fusion(config, audio, video, clips.subset(np.flatnonzero(split_of == "train")),
                                     clips.subset(np.flatnonzero(split_of == "val")))
    # a fusion of two scratch models counts as "scratch" in the report naming
    regime = "scratch" if a_card.get("regime") == v_card.get("regime") == "scratch" else "fine-tuned"
    card = {"modality": "fusion", "seed": config.seed, "regime": regime, "audio": a_card, "video": v_card}
    paths = train.write_run(run_dir(args), config, result.log, net, "fusion", card)
    return {"corpus": corpus, "audio_checkpoint": a_path, "video_checkpoint": v_path}, list(paths.values())


def predictions_csv(clips: data.ClipSet, probs: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_HEADER)
    for i in range(len(clips)):
        inten = clips.intensities[i]
        w.writerow([clips.ids[i], CLASSES[int(clips.labels[i])].value, inten.value if inten else "",
                    CLASSES[int(probs[i].argmax())].value] + [f"{p:.6f}" for p in probs[i]])
    return buf.getvalue()


def read_predictions(text: str) -> tuple[list, list, list, list]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(PREDICTION_HEADER) - set(rows[0]):
        raise CliError("BAD_INPUT", "predictions file lacks the expected columns")
    return ([r["prediction"] for r in rows], [r["label"] for r in rows],
            [r["intensity"] or None for r in rows], [r["id"] for r in rows])


def cmd_eval(args) -> tuple[dict, list]:
    ckpt = _require(args.checkpoint, "--checkpoint")
    corpus = _require(args.corpus, "--corpus")
    model, card = train.load_checkpoint(ckpt)
    if args.splits or (corpus / "splits.csv").exists():
        windows = data.windows_for(_splits(args), args.split)
    elif args.split == "all":
        windows = data.prepare(corpus, seed=args.seed or 0)
    else:
        raise CliError("MISSING_INPUT", f"no split manifest for --split {args.split}; run `prepare` or use --split all")
    if not windows:
        raise CliError("EMPTY_SPLIT", f"split {args.split} has no windows")
    modality = card["modality"]
    needed = ("audio", "video") if modality == "fusion" else (modality,)
    clips = data.build_clips(corpus, windows, needed)
    out_t = train.predict_clips(model, clips)
    probs = out_t.probabilities.numpy().astype(np.float64)
    preds = probs.argmax(axis=1)
    report = evaluation.metrics(evaluation.confusion(preds, clips.labels))
    dataset = args.dataset or corpus.name
    meta = {"modality": modality, "regime": card.get("regime", "scratch"), "dataset": dataset,
            "split": args.split,
            "config": evaluation.config_name(modality, card.get("regime", "scratch"), dataset)}
    out = run_dir(args)
    written = [
        _write(out / "metrics.json", json.dumps(dict(report.to_dict(), meta=meta), indent=2, sort_keys=True) + "\n"),
        _write(out / "metrics.csv", report.to_csv()),
        _write(out / "predictions.csv", predictions_csv(clips, probs)),
        _write(out / "embeddings.csv", embed.EmbeddingSet(
            out_t.embedding.numpy().astype(np.float64), [CLASSES[int(i)] for i in clips.labels],
            clips.intensities, clips.ids).to_csv()),
    ]
    return {"checkpoint": ckpt, "corpus": corpus}, written


def cmd_heatmap(args) -> tuple[dict, list]:
    src = _require(args.predictions, "--predictions")
    preds, labels, intens, ids = read_predictions(src.read_text())
    hm = evaluation.intensity_heatmap(preds, labels, intens, ids)
    out = run_dir(args)
    return {"predictions": src}, [_write(out / "heatmap.csv", hm.to_csv()),
                                  _write(out / "heatmap.svg", hm.to_svg(args.title or src.parent.name))]


def cmd_remap(args) -> tuple[dict, list]:
    if not args.heatmaps:
        raise CliError("MISSING_ARGUMENT", "--heatmaps needs at least one heatmap CSV")
    hms = [evaluation.IntensityHeatmap.from_csv(_require(p, "heatmap").read_text()) for p in args.heatmaps]
    result = evaluation.remap_two_class(hms)
    out = run_dir(args)
    return ({f"heatmap{i}": p for i, p in enumerate(args.heatmaps)},
            [_write(out / "remap.json", json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")])


def cmd_tsne(args) -> tuple[dict, list]:
    src = _require(args.embeddings, "--embeddings")
    emb = embed.EmbeddingSet.from_csv(src.read_text())
    n = emb.vectors.shape[0]
    perplexity = args.perplexity if args.perplexity is not None else min(30.0, (n - 1) / 3)
    cfg = embed.TsneConfig(perplexity=perplexity, iterations=args.iterations, seed=args.seed or 0)
    proj = embed.tsne(emb, cfg)
    csv_text, svg_text = embed.export_projection(proj, emb.labels, emb.intensities, title=args.title or "")
    out = run_dir(args)
    kl = _write(out / "projection_kl.json", json.dumps({"kl_initial": proj.kl_initial, "kl": proj.kl}) + "\n")
    return {"embeddings": src}, [_write(out / "projection.csv", csv_text), _write(out / "projection.svg", svg_text), kl]


def cmd_report(args) -> tuple[dict, list]:
    if not args.metrics:
        raise CliError("MISSING_ARGUMENT", "--metrics needs at least one metrics.json")
    reports = {}
    for p in args.metrics:
        d = json.loads(_require(p, "metrics file").read_text())
        name = d.get("meta", {}).get("config") or Path(p).parent.name
        if name in reports:
            raise CliError("DUPLICATE_CONFIG", f"configuration {name} appears twice")
        reports[name] = evaluation.MetricsReport.from_dict(d)
    out = run_dir(args)
    return ({f"metrics{i}": p for i, p in enumerate(args.metrics)},
            [_write(out / "table.csv", evaluation.report_table(reports, args.average))])


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "pretrain-proxy": cmd_pretrain_proxy,
    "train-fusion": cmd_train_fusion,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "remap": cmd_remap,
    "tsne": cmd_tsne,
    "report": cmd_report,
}


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sldetect", description="Smile and laugh detection pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option values; explicit flags take precedence")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory (default: $SL_RUNS_DIR/<name>)")
    common.add_argument("--name", help="run name under the runs root")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    p = add("synth", "generate a synthetic corpus")
    p.add_argument("--spec", help="JSON file with synthetic corpus fields")
    p.add_argument("--mode", choices=synth.MODES, help="modality informativeness")

    p = add("prepare", "window and split a corpus")
    p.add_argument("--corpus", required=False)

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--corpus")
    training.add_argument("--splits", help="split manifest (default: <corpus>/splits.csv)")
    training.add_argument("--scale", choices=models.SCALES, default="tiny")
    training.add_argument("--epochs", type=int)
    training.add_argument("--batch-size", type=int)
    training.add_argument("--lr0", type=float)
    training.add_argument("--lr-min", type=float)

    p = sub.add_parser("train", parents=[common, training], help="train one modality network")
    p.add_argument("--modality", choices=("audio", "video", "fusion"), default="audio")
    p.add_argument("--regime", choices=train.REGIMES, default="scratch")
    p.add_argument("--pretrained", help="checkpoint for the fine-tuning regimes")

    p = sub.add_parser("pretrain-proxy", parents=[common, training], help="pretrain on a synthetic word-class task")
    p.add_argument("--modality", choices=("audio", "video"), default="audio")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=40)

    p = sub.add_parser("train-fusion", parents=[common, training], help="train the late-fusion head")
    p.add_argument("--audio-checkpoint")
    p.add_argument("--video-checkpoint")
    p.set_defaults(regime="scratch", pretrained=None)

    p = add("eval", "score a checkpoint on a split or a whole corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--splits")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--dataset", help="dataset tag used in configuration names (default: corpus directory name)")

    p = add("heatmap", "intensity heatmap from a predictions file")
    p.add_argument("--predictions")
    p.add_argument("--title")

    p = add("remap", "two-class remap analysis over heatmaps")
    p.add_argument("--heatmaps", nargs="+")

    p = add("tsne", "2-D projection of an embeddings file")
    p.add_argument("--embeddings")
    p.add_argument("--perplexity", type=float)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--title")

    p = add("report", "results table over configurations")
    p.add_argument("--metrics", nargs="+")
    p.add_argument("--average", choices=("macro", "micro", "weighted"), default="macro")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = json.loads(_require(args.config, "--config").read_text())
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(values) - known
        if unknown:
            raise CliError("BAD_CONFIG", f"unknown config keys {sorted(unknown)}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    torch.set_num_threads(1)
    try:
        args = parse_args(argv)
        inputs, outputs = COMMANDS[args.command](args)
        out = Path(args.out) if args.out else runs_root() / (args.name or args.command)
        write_manifest(out, args, inputs, outputs)
    except SystemExit:
        raise
    except Exception as exc:  # reported as one machine-parsable line
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {error_code(exc)}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
