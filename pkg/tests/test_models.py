import pytest
import torch

from sldetect import models, nnsub
from sldetect.models import ConfigError, ModelConfig, MstcnConfig


@pytest.fixture(scope="module")
def tiny():
    return ModelConfig()


def test_tiny_widths(tiny):
    assert tiny.widths == (8, 16, 32, 64)
    assert tiny.mstcn_channels == 96
    assert ModelConfig(scale="paper").mstcn_channels == 768


@pytest.mark.parametrize(
    "kwargs",
    [
        {"scale": "huge"},
        {"mstcn": MstcnConfig(channels=100)},
        {"mstcn": MstcnConfig(kernel_sizes=(3, 4, 5))},
        {"mstcn": MstcnConfig(blocks=3)},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_config_dict_round_trip():
    cfg = ModelConfig(scale="paper", mstcn=MstcnConfig(dropout=0.1))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_audio_shapes(tiny):
    net = models.build_audio_net(tiny, seed=0).eval()
    with torch.no_grad():
        out = net(torch.randn(4, 1, 19520))
    assert out.logits.shape == (4, 3) and out.embedding.shape == (4, 96)
    assert torch.allclose(out.probabilities.sum(dim=1), torch.ones(4), atol=1e-6)
    assert models.expected_lengths(tiny) == {"frontend": 4880, "stages": 610, "pooled": 30}


def test_video_shapes(tiny):
    net = models.build_video_net(tiny, seed=0).eval()
    with torch.no_grad():
        out = net(torch.randn(2, 1, 30, 96, 96))
    assert out.logits.shape == (2, 3) and out.embedding.shape == (2, 96)
    assert torch.allclose(out.probabilities.sum(dim=1), torch.ones(2), atol=1e-6)


@pytest.mark.parametrize("modality, shape", [("audio", (2, 1, 19520)), ("video", (2, 1, 30, 96, 96))])
def test_static_shapes_match_traced(tiny, modality, shape):
    net = models.build_modality_net(modality, tiny, seed=1).eval()
    record = {}
    out = nnsub.infer_shape(net, shape, record)
    traced = nnsub.trace_shapes(net, torch.randn(shape))
    assert out == (2, 3)
    for name, s in traced.items():
        assert record[name] == s, name


def test_video_intermediate_extents(tiny):
    net = models.build_video_net(tiny, seed=0)
    record = {}
    nnsub.infer_shape(net, (1, 1, 30, 96, 96), record)
    assert record["frontend.conv"] == (1, 8, 30, 48, 48)
    assert record["pool"][-2:] == (24, 24)
    assert record["mstcn"] == (1, 96, 30)


def test_mstcn_preserves_time(tiny):
    block = models.build_mstcn(64, tiny, seed=0).eval()
    for t in (30, 7, 61):
        assert block(torch.randn(2, 64, t)).shape == (2, 96, t)


def test_receptive_fields():
    dilations = ModelConfig().mstcn.dilations
    # third block (dilation 4)
    assert [models.receptive_field(k, dilations[2]) for k in (3, 5, 7)] == [9, 17, 25]
    assert [models.receptive_field(k, dilations[3]) for k in (3, 5, 7)] == [17, 33, 49]


def test_mstcn_gradient_check():
    cfg = ModelConfig(mstcn=MstcnConfig(dropout=0.0, channels=6, dilations=(1, 2, 4, 8)))
    block = models.build_mstcn(3, cfg, seed=2).double().eval()
    x = torch.randn(2, 3, 12, dtype=torch.float64)
    w = torch.randn(2, 6, 12, dtype=torch.float64)
    params = {k: p for k, p in block.named_parameters() if k.startswith("block0.") or k.startswith("block3.")}
    errors = nnsub.check_gradients(lambda: (block(x) * w).sum(), {"x": x, **params})
    assert max(errors.values()) < 1e-4


def test_same_seed_same_parameters(tiny):
    a = models.build_video_net(tiny, seed=5)
    b = models.build_video_net(tiny, seed=5)
    c = models.build_video_net(tiny, seed=6)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_fusion_head_parameter_count():
    head = models.build_fusion_head()
    assert nnsub.count_parameters(head) == 10_243 == 6 * 1024 + 1024 + 1024 * 3 + 3
    # the fixed PReLU slope is a buffer, not a parameter
    assert "act.weight" in dict(head.named_buffers())


def test_fuse_forward_shape():
    head = models.build_fusion_head(seed=0)
    p = torch.softmax(torch.randn(5, 3), 1)
    out = models.ModalityOutput(p.log(), p, p)
    assert models.fuse_forward(head, out, out).shape == (5, 3)


def test_freeze_partition(tiny):
    net = models.build_audio_net(tiny)
    groups = models.parameter_groups(net)
    total = nnsub.count_parameters(net)
    models.freeze(net, "all_but_mstcn_and_head")
    trainable = nnsub.count_parameters(net, trainable_only=True)
    assert trainable == groups["mstcn"] + groups["head"]
    assert total - trainable == groups["frontend"] + groups["backbone"]
    models.freeze(net, "none")
    assert nnsub.count_parameters(net, trainable_only=True) == total


def test_freeze_all_blocks_updates(tiny):
    net = models.build_audio_net(tiny)
    before = [p.clone() for p in net.parameters()]
    models.freeze(net, "all")
    nnsub.set_train_mode(net)
    x = torch.randn(2, 1, 19520)
    nnsub.sgd_step(net.parameters(), 1.0)
    with torch.no_grad():
        net(x)
    assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))


def test_fusion_net_freezes_modalities(tiny):
    net = models.FusionNet(models.build_audio_net(tiny), models.build_video_net(tiny), models.build_fusion_head())
    assert nnsub.count_parameters(net, trainable_only=True) == 10_243


def test_checkpoint_round_trip_bit_identical(tiny, tmp_path):
    net = models.build_audio_net(tiny, seed=3)
    # give batch-norm non-trivial running statistics
    net.train()
    with torch.no_grad():
        net(torch.randn(3, 1, 19520))
    net.eval()
    x = torch.randn(2, 1, 19520)
    with torch.no_grad():
        ref = net(x).logits
    path = tmp_path / "a.slck"
    models.save_model(path, net, "audio", {"modality": "audio", "model": tiny.to_dict(), "seed": 3})
    other = models.build_audio_net(tiny, seed=99).eval()
    models.load_model(other, path, "audio")
    with torch.no_grad():
        assert torch.equal(other(x).logits, ref)
    assert models.read_card(path)["seed"] == 3
    assert all(name.startswith("audio.") for name in nnsub.read_checkpoint(path))


def test_proxy_checkpoint_loads_all_but_head(tiny, tmp_path):
    proxy = models.build_audio_net(ModelConfig(n_classes=6), seed=1)
    path = tmp_path / "proxy.slck"
    models.save_model(path, proxy, "audio")
    net = models.build_audio_net(tiny, seed=2)
    skipped = models.load_model(net, path, "audio", skip=("head.",))
    assert set(skipped) == {"head.weight", "head.bias"}
    with pytest.raises(nnsub.CheckpointError):
        models.load_model(models.build_audio_net(tiny), path, "audio")
