import struct

import numpy as np
import pytest
import torch

from echo_esc.errors import ConfigHashMismatch, CorruptCheckpoint, EmbeddingDimMismatch, UnknownBackbone
from echo_esc.model import (
    EMBEDDING_DIMS,
    Backbone,
    BackboneSpec,
    CheckpointMeta,
    HeadSpec,
    Stage,
    build_model,
    encode_checkpoint,
    head_parameter_count,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    swap_head,
)

TINY = BackboneSpec("TINY_CNN")


def _params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def test_seeded_build_is_deterministic():
    a, b = build_model(TINY, HeadSpec(2), 7), build_model(TINY, HeadSpec(2), 7)
    c = build_model(TINY, HeadSpec(2), 8)
    pa, pb, pc = _params(a), _params(b), _params(c)
    assert all(torch.equal(pa[k], pb[k]) for k in pa)
    assert not all(torch.equal(pa[k], pc[k]) for k in pa if pa[k].is_floating_point())


def test_build_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_model(TINY, HeadSpec(3), 1)
    assert torch.equal(torch.rand(3), expected)


def test_forward_shapes_and_softmax():
    m = build_model(TINY, HeadSpec(5), 0).eval()
    x = torch.rand(32, 3, 64, 64)
    out = m(x)
    assert out.probs.shape == (32, 5)
    assert torch.allclose(out.probs.sum(1), torch.ones(32), atol=1e-5)
    assert out.hidden.shape == (32, 256) and out.embedding.shape == (32, 64)
    assert torch.isfinite(out.hidden).all() and torch.isfinite(out.embedding).all()


@pytest.mark.parametrize("name", [b.value for b in Backbone if b is not Backbone.TINY_CNN])
def test_head_parameter_count(name):
    spec = BackboneSpec(name)
    d = spec.embedding_dim
    assert d == EMBEDDING_DIMS[Backbone(name)]
    expected = 512 * (d + 1) + 256 * 513 + 10 * 257
    assert head_parameter_count(d, 10) == expected


def test_resnet18_head_and_embedding():
    m = build_model(BackboneSpec("RESNET18"), HeadSpec(10), 0).eval()
    assert sum(p.numel() for p in m.head.parameters()) == 512 * 513 + 256 * 513 + 10 * 257
    with torch.no_grad():
        out = m(torch.rand(2, 3, 64, 64))
    assert out.embedding.shape == (2, 512)


def test_spec_errors():
    with pytest.raises(UnknownBackbone):
        BackboneSpec("VGG16")
    with pytest.raises(EmbeddingDimMismatch):
        BackboneSpec("RESNET50", embedding_dim=512)
    with pytest.raises(ValueError):
        HeadSpec(1)


def test_swap_head_backbone_bit_exact():
    coarse = build_model(TINY, HeadSpec(3), 0)
    # perturb so the check is not against a fresh init
    with torch.no_grad():
        for p in coarse.backbone.parameters():
            p.add_(torch.randn_like(p) * 0.01)
    fine = swap_head(coarse, 10, 0)
    cb, fb = coarse.backbone.state_dict(), fine.backbone.state_dict()
    assert cb.keys() == fb.keys()
    for k in cb:
        assert cb[k].numpy().tobytes() == fb[k].numpy().tobytes()
    assert fine.num_classes == 10
    x = torch.rand(4, 3, 32, 32)
    coarse.eval(), fine.eval()
    with torch.no_grad():
        assert torch.equal(coarse(x).embedding, fine(x).embedding)


def test_swap_same_size_redraws_head_and_leaves_source_alone():
    m = build_model(TINY, HeadSpec(4), 0)
    before = _params(m)
    s = swap_head(m, 4, 0)
    assert not torch.equal(m.head.out.weight, s.head.out.weight)
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())
    # the copy is independent
    with torch.no_grad():
        s.backbone.features[0].weight.add_(1.0)
    assert torch.equal(before["backbone.features.0.weight"], m.backbone.features[0].weight)


def _meta(stage=Stage.FINE, **kw):
    base = dict(stage=stage, backbone=TINY.to_dict(), num_classes=3, config_hash="cfg-1",
                label_space=["a", "b", "c"], ontology_hash="ont-1", best_epoch=4, best_val_loss=0.25, seed=0)
    base.update(kw)
    return CheckpointMeta(**base)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = build_model(TINY, HeadSpec(3), 3)
    m.train()
    m(torch.rand(8, 3, 32, 32))  # move batch-norm running stats off their init
    save_checkpoint(m, tmp_path / "a.ckpt", _meta())
    loaded, meta = load_checkpoint(tmp_path / "a.ckpt", expected_config_hash="cfg-1")
    assert meta.best_epoch == 4 and meta.stage is Stage.FINE and meta.label_space == ["a", "b", "c"]
    for k, v in m.state_dict().items():
        w = loaded.state_dict()[k]
        assert v.dtype == w.dtype and v.numpy().tobytes() == w.numpy().tobytes()
    save_checkpoint(loaded, tmp_path / "b.ckpt", meta)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_hash_guards(tmp_path):
    m = build_model(TINY, HeadSpec(3), 0)
    save_checkpoint(m, tmp_path / "c.ckpt", _meta(Stage.COARSE))
    with pytest.warns(UserWarning, match="ontology hash"):
        load_checkpoint(tmp_path / "c.ckpt", expected_ontology_hash="other")
    with pytest.raises(ConfigHashMismatch):
        load_checkpoint(tmp_path / "c.ckpt", expected_ontology_hash="other", strict=True)
    with pytest.raises(ConfigHashMismatch):
        load_checkpoint(tmp_path / "c.ckpt", expected_config_hash="cfg-2", strict=True)


def test_coarse_meta_requires_ontology():
    with pytest.raises(ValueError):
        _meta(Stage.COARSE, ontology_hash=None)


@pytest.mark.parametrize("cut", [4, 20, -1, -500])
def test_truncated_checkpoint(tmp_path, cut):
    data = encode_checkpoint(build_model(TINY, HeadSpec(3), 0), _meta())
    (tmp_path / "t.ckpt").write_bytes(data[:cut])
    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(tmp_path / "t.ckpt")


def test_flipped_payload_byte(tmp_path):
    data = bytearray(encode_checkpoint(build_model(TINY, HeadSpec(3), 0), _meta()))
    data[-10] ^= 0xFF
    (tmp_path / "f.ckpt").write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "f.ckpt")


def test_wrong_magic(tmp_path):
    (tmp_path / "w.ckpt").write_bytes(struct.pack("<8sIQ", b"NOTACKPT", 1, 0))
    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(tmp_path / "w.ckpt")


def test_checkpoint_is_little_endian_and_named(tmp_path):
    data = encode_checkpoint(build_model(TINY, HeadSpec(3), 0), _meta())
    magic, version, hlen = struct.unpack_from("<8sIQ", data)
    assert magic == b"ECHOCKPT" and version == 1
    import json

    header = json.loads(data[20:20 + hlen])
    names = [t["name"] for t in header["tensors"]]
    assert "head.out.weight" in names and "backbone.features.0.weight" in names
    assert all(t["dtype"] in ("<f4", "<i8") for t in header["tensors"])
    assert np.frombuffer(data[20 + hlen:], dtype=np.uint8).size == header["payload_nbytes"]
