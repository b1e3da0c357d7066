import hashlib

import numpy as np
import pytest
import torch

from sldetect import data, evaluation, media, models, synth, train
from sldetect.corpus import Label, parse_annotations
from sldetect.evaluation import HEATMAP_ROWS
from sldetect.synth import SpecError, SynthSpec


def digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    corpus = synth.gen_corpus(SynthSpec(seed=1, n_sources=3), root)
    return root, corpus


def test_annotation_count(small_corpus):
    root, corpus = small_corpus
    lines = (root / "annotations.tsv").read_text().splitlines()
    assert len(lines) == 1 + 20  # header plus one line per labeled segment
    segs = parse_annotations((root / "annotations.tsv").read_text())
    assert sorted(s.expression.value for s in segs) == ["laugh"] * 10 + ["smile"] * 10
    # None segments are derived from the gaps
    assert data.CorpusDir(root).corpus().windows() and len(corpus.segments) == 20


def test_same_seed_byte_identical(small_corpus, tmp_path):
    root, _ = small_corpus
    synth.gen_corpus(SynthSpec(seed=1, n_sources=3), tmp_path)
    assert digest(tmp_path) == digest(root)


def test_different_seed_differs(small_corpus, tmp_path):
    root, _ = small_corpus
    synth.gen_corpus(SynthSpec(seed=2, n_sources=3), tmp_path)
    assert digest(tmp_path)["annotations.tsv"] != digest(root)["annotations.tsv"]


def test_media_durations_match_annotations(small_corpus):
    root, corpus = small_corpus
    for source, total_ms in corpus.durations_ms.items():
        audio = media.read_wav(root / "audio" / f"{source}.wav")
        video = media.read_gv01(root / "video" / f"{source}.gv01")
        assert abs(len(audio.samples) / audio.rate * 1000 - total_ms) <= 1000 / audio.rate
        assert abs(video.frames.shape[0] / video.fps * 1000 - total_ms) <= 1000 / video.fps
        ends = [s.end_ms for s in corpus.segments if s.source_id == source]
        assert max(ends, default=0) <= total_ms


def test_mouth_height_increases_with_rank():
    for cue in (0.5, 1.0, 2.0):
        for kind in ("laugh", "smile"):
            h = [synth.mouth_height(kind, r, cue) for r in range(4)]
            assert all(a < b for a, b in zip(h, h[1:]))
        assert synth.mouth_height("closed", 0, cue) < synth.mouth_height("smile", 0, cue)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_laugh": -1},
        {"n_sources": 0},
        {"laugh_ms": (100, 2000)},
        {"smile_ms": (1500, 1400)},
        {"laugh_intensity": (0.5, 0.5)},
        {"smile_intensity": (0.5, 0.5, 0.5, -0.5)},
        {"audio_cue": -1.0},
        {"informativeness": "neither"},
    ],
)
def test_spec_errors(kwargs):
    with pytest.raises(SpecError):
        SynthSpec(**kwargs)


def test_spec_dict_round_trip():
    spec = SynthSpec(seed=4, informativeness="complementary", laugh_ms=(300, 900))
    assert SynthSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(SpecError):
        SynthSpec.from_dict({"colour": 1})


def test_complementary_video_hides_laugh_vs_smile():
    spec = SynthSpec(seed=0, n_sources=1, n_laugh=3, n_smile=3, n_none=0, noise_floor=0.0,
                     informativeness="complementary", laugh_intensity=(0, 0, 1), smile_intensity=(0, 0, 0, 1))
    corpus = synth.generate(spec)
    frames = corpus.video["src000"].frames
    open_area = {Label.LAUGH: [], Label.SMILE: []}
    for s in corpus.segments:
        f0, f1 = s.start_ms * 25 // 1000 + 1, s.end_ms * 25 // 1000 - 1
        open_area[s.expression].append(float((frames[f0:f1] > 0.6).mean()))
    # high laughs and high smiles share the same static mouth shape
    assert np.allclose(open_area[Label.LAUGH], np.mean(open_area[Label.SMILE]), rtol=0.1)


# --------------------------------------------------------------------------- proxy task


@pytest.mark.parametrize("modality, shape", [("audio", (1, 19520)), ("video", (1, 30, 96, 96))])
def test_proxy_task_shapes(modality, shape):
    x, y = synth.gen_proxy_task(modality, n_classes=4, n_per_class=3, seed=0)
    assert x.shape == (12,) + shape and x.dtype == np.float32
    assert sorted(np.bincount(y).tolist()) == [3, 3, 3, 3]
    assert np.allclose(x.reshape(12, -1).mean(axis=1), 0, atol=1e-5)


def test_proxy_task_needs_four_classes():
    with pytest.raises(SpecError):
        synth.gen_proxy_task("audio", n_classes=3)


# --------------------------------------------------------------------------- heatmap fixtures


def test_fixture_perfect_case():
    hm = synth.gen_heatmap_fixture(0, 1.0)
    for i, key in enumerate(HEATMAP_ROWS):
        assert hm.percentages[i, synth._CORRECT_COLUMN[key]] == 100.0


def test_fixture_rounding():
    hm = synth.gen_heatmap_fixture(0, {"laugh-high": 0.75}, {"laugh-high": 4})
    assert hm.counts[HEATMAP_ROWS.index("laugh-high")].tolist() == [3, 1, 0]
    assert hm.supported.sum() == 1


def test_fixture_is_seeded():
    a, b = synth.gen_heatmap_fixture(9, 0.4), synth.gen_heatmap_fixture(9, 0.4)
    assert np.array_equal(a.counts, b.counts)


def test_fixture_remap_hand_computed():
    # laugh rows 8/10 each; smile-high 5/5; smile-medium 3/5 with its two misses
    # routed to the laugh column, which the two-class rule also accepts
    hm = synth.gen_heatmap_fixture(0, {"laugh-high": 0.8, "laugh-medium": 0.8, "laugh-low": 0.8,
                                       "smile-high": 1.0, "smile-medium": 0.6},
                                   {"laugh-high": 10, "laugh-medium": 10, "laugh-low": 10,
                                    "smile-high": 5, "smile-medium": 5})
    remapped, baseline = evaluation.remapped_laugh_accuracy(hm)
    assert remapped == pytest.approx(100 * (24 + 5 + 5) / 40, abs=1e-12)
    assert baseline == pytest.approx(80.0, abs=1e-12)


# --------------------------------------------------------------------------- chance level


def test_zero_cue_gives_chance_uar(tmp_path):
    torch.set_num_threads(1)
    spec = SynthSpec(seed=5, n_sources=6, n_laugh=100, n_smile=100, n_none=100, audio_cue=0.0, video_cue=0.0)
    synth.gen_corpus(spec, tmp_path)
    windows = data.prepare(tmp_path, seed=5)
    assert len(windows) == 300
    clips = data.build_clips(tmp_path, windows, modalities=("audio",))
    split = np.array([w.split.value for w in windows])
    tr, va, te = (clips.subset(np.flatnonzero(split == s)) for s in ("train", "val", "test"))
    net = models.build_audio_net(models.ModelConfig(), seed=5)
    train.train_modality(train.TrainConfig(epochs=4, lr0=0.01, seed=5), net, tr, va)
    pred = train.predict_clips(net, te).logits.argmax(1).numpy()
    uar = evaluation.metrics(evaluation.confusion(pred, te.labels)).uar
    assert 0.23 <= uar <= 0.43
