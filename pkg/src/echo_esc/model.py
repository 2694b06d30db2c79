"""Backbone + classifier head network, head swapping and checkpoint files."""
from __future__ import annotations

import copy
import enum
import hashlib
import json
import struct
import threading
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from . import _io
from .errors import (
    ConfigHashMismatch,
    CorruptCheckpoint,
    EmbeddingDimMismatch,
    PretrainedWeightsUnavailable,
    UnknownBackbone,
)

HIDDEN_SIZES = (512, 256)

# torchvision constructors draw from the global RNG; serialize seeded builds
_INIT_LOCK = threading.Lock()


class Backbone(str, enum.Enum):
    RESNET18 = "RESNET18"
    RESNET50 = "RESNET50"
    EFFICIENTNET_B0 = "EFFICIENTNET_B0"
    EFFICIENTNET_B1 = "EFFICIENTNET_B1"
    TINY_CNN = "TINY_CNN"


EMBEDDING_DIMS = {
    Backbone.RESNET18: 512,
    Backbone.RESNET50: 2048,
    Backbone.EFFICIENTNET_B0: 1280,
    Backbone.EFFICIENTNET_B1: 1280,
    Backbone.TINY_CNN: 64,
}


@dataclass(frozen=True)
class BackboneSpec:
    name: Backbone
    pretrained: bool = False
    embedding_dim: int | None = None
    weights_path: str | None = None
    weights_sha256: str | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "name", Backbone(str(getattr(self.name, "value", self.name)).upper()))
        except ValueError:
            raise UnknownBackbone(f"unknown backbone {self.name!r}") from None
        expected = EMBEDDING_DIMS[self.name]
        if self.embedding_dim is None:
            object.__setattr__(self, "embedding_dim", expected)
        elif self.embedding_dim != expected:
            raise EmbeddingDimMismatch(
                f"{self.name.value} produces {expected}-d embeddings, spec says {self.embedding_dim}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["name"] = self.name.value
        return d


@dataclass(frozen=True)
class HeadSpec:
    num_classes: int
    hidden_sizes: tuple[int, ...] = HIDDEN_SIZES

    def __post_init__(self):
        if tuple(self.hidden_sizes) != HIDDEN_SIZES:
            raise ValueError(f"classifier head hidden sizes are fixed at {HIDDEN_SIZES}")
        if self.num_classes < 2:
            raise ValueError("classifier head needs at least 2 classes")


class TinyCNN(nn.Module):
    """Four conv/BN/ReLU/max-pool blocks and global average pooling -> 64-d."""

    def __init__(self, in_channels=3, widths=(16, 32, 64, 64)):
        super().__init__()
        blocks = []
        prev = in_channels
        for w in widths:
            blocks += [
                nn.Conv2d(prev, w, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            prev = w
        self.features = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return torch.flatten(self.pool(self.features(x)), 1)


def _torchvision_backbone(name: Backbone) -> nn.Module:
    import torchvision.models as tvm

    if name is Backbone.RESNET18:
        net = tvm.resnet18(weights=None)
        net.fc = nn.Identity()
    elif name is Backbone.RESNET50:
        net = tvm.resnet50(weights=None)
        net.fc = nn.Identity()
    elif name is Backbone.EFFICIENTNET_B0:
        net = tvm.efficientnet_b0(weights=None)
        net.classifier = nn.Identity()
    elif name is Backbone.EFFICIENTNET_B1:
        net = tvm.efficientnet_b1(weights=None)
        net.classifier = nn.Identity()
    else:
        raise UnknownBackbone(name)
    return net


def _load_pretrained(net: nn.Module, spec: BackboneSpec) -> None:
    if not spec.weights_path:
        raise PretrainedWeightsUnavailable(
            f"{spec.name.value}: pretrained=true needs weights_path (weights are never downloaded)")
    path = Path(spec.weights_path)
    if not path.exists():
        raise PretrainedWeightsUnavailable(f"{path} does not exist")
    if spec.weights_sha256:
        actual = hashlib.sha256(path.read_bytes()).hexdigest()
        if actual != spec.weights_sha256.lower():
            raise PretrainedWeightsUnavailable(f"{path}: sha256 {actual} != {spec.weights_sha256}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    # drop the original ImageNet classifier
    state = {k: v for k, v in state.items() if not k.startswith(("fc.", "classifier."))}
    missing, _ = net.load_state_dict(state, strict=False)
    if missing:
        raise PretrainedWeightsUnavailable(f"{path}: missing parameters {missing[:5]}...")


class ClassifierHead(nn.Module):
    def __init__(self, in_dim: int, num_classes: int):
        super().__init__()
        self.hidden1 = nn.Linear(in_dim, HIDDEN_SIZES[0])
        self.hidden2 = nn.Linear(HIDDEN_SIZES[0], HIDDEN_SIZES[1])
        self.out = nn.Linear(HIDDEN_SIZES[1], num_classes)

    def forward(self, z):
        h = torch.relu(self.hidden2(torch.relu(self.hidden1(z))))
        return self.out(h), h


class ModelOutput(NamedTuple):
    probs: torch.Tensor
    logits: torch.Tensor
    hidden: torch.Tensor  # 256-unit penultimate activation
    embedding: torch.Tensor  # backbone output


class EchoNet(nn.Module):
    def __init__(self, backbone_spec: BackboneSpec, backbone: nn.Module, head: ClassifierHead):
        super().__init__()
        self.backbone_spec = backbone_spec
        self.backbone = backbone
        self.head = head

    @property
    def num_classes(self) -> int:
        return self.head.out.out_features

    def forward(self, x) -> ModelOutput:
        z = self.backbone(x)
        logits, h = self.head(z)
        return ModelOutput(torch.softmax(logits, dim=1), logits, h, z)


def init_head(head: ClassifierHead, seed: int, stream: int = 0) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every head weight and bias.

    ``stream`` separates the build-time head from heads created by
    :func:`swap_head`, so a swap with the build seed still re-draws.
    """
    state = np.random.SeedSequence([int(seed), int(stream)]).generate_state(1, np.uint64)[0]
    g = torch.Generator().manual_seed(int(state))
    with torch.no_grad():
        for layer in (head.hidden1, head.hidden2, head.out):
            bound = 1.0 / float(layer.in_features) ** 0.5
            layer.weight.uniform_(-bound, bound, generator=g)
            layer.bias.uniform_(-bound, bound, generator=g)


def _new_backbone(spec: BackboneSpec, seed: int) -> nn.Module:
    with _INIT_LOCK, torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        if spec.name is Backbone.TINY_CNN:
            return TinyCNN()
        return _torchvision_backbone(spec.name)


def _new_head(in_dim: int, num_classes: int, seed: int, stream: int) -> ClassifierHead:
    # nn.Linear draws its default init from the global generator; keep that untouched
    with _INIT_LOCK, torch.random.fork_rng(devices=[]):
        clf = ClassifierHead(in_dim, num_classes)
    init_head(clf, seed, stream)
    return clf


def build_model(backbone: BackboneSpec, head: HeadSpec, seed: int) -> EchoNet:
    net = _new_backbone(backbone, seed)
    if backbone.pretrained:
        _load_pretrained(net, backbone)
    return EchoNet(backbone, net, _new_head(backbone.embedding_dim, head.num_classes, seed, 0))


def swap_head(model: EchoNet, new_num_classes: int, seed: int) -> EchoNet:
    """Copy of ``model`` with the same backbone tensors and a freshly initialized head."""
    HeadSpec(new_num_classes)
    clf = _new_head(model.backbone_spec.embedding_dim, new_num_classes, seed, 1)
    fresh = EchoNet(model.backbone_spec, copy.deepcopy(model.backbone), clf)
    fresh.train(model.training)
    return fresh


def head_parameter_count(embedding_dim: int, num_classes: int) -> int:
    return sum((i + 1) * o for i, o in
               zip((embedding_dim, *HIDDEN_SIZES), (*HIDDEN_SIZES, num_classes)))


# --- checkpoints ---

class Stage(str, enum.Enum):
    COARSE = "COARSE"
    FINE = "FINE"
    BASELINE = "BASELINE"


@dataclass
class CheckpointMeta:
    stage: Stage
    backbone: dict
    num_classes: int
    config_hash: str
    label_space: list[str] = field(default_factory=list)
    ontology_hash: str | None = None
    best_epoch: int = 0
    best_val_loss: float = float("nan")
    seed: int = 0

    def __post_init__(self):
        self.stage = Stage(self.stage)
        if self.stage is Stage.COARSE and not self.ontology_hash:
            raise ValueError("coarse-stage checkpoints must record the ontology hash")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        return d


@dataclass
class CheckpointBundle:
    meta: CheckpointMeta
    backbone_params: dict[str, np.ndarray]
    head_params: dict[str, np.ndarray]


MAGIC = b"ECHOCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def encode_checkpoint(model: EchoNet, meta: CheckpointMeta) -> bytes:
    """Container: magic, version, JSON header length, JSON header, raw tensor payload."""
    index, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = _io.canonical_json({
        "meta": meta.to_dict(),
        "tensors": index,
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + payload


def save_checkpoint(model: EchoNet, path, meta: CheckpointMeta) -> Path:
    path = Path(path)
    _io.atomic_write_bytes(path, encode_checkpoint(model, meta))
    return path


def read_checkpoint(path) -> CheckpointBundle:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CorruptCheckpoint(f"{path}: truncated prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise CorruptCheckpoint(f"{path}: not an ECHO checkpoint (magic={magic!r}, version={version})")
    body = data[_PREFIX.size:]
    if len(body) < hlen:
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(body[:hlen].decode("utf-8"))
        meta = CheckpointMeta(**header["meta"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: bad header ({exc})") from exc
    payload = body[hlen:]
    if len(payload) != header["payload_nbytes"] or \
            hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpoint(f"{path}: payload truncated or corrupted")
    backbone, head = {}, {}
    for t in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=t["offset"]).reshape(t["shape"])
        prefix, _, rest = t["name"].partition(".")
        (backbone if prefix == "backbone" else head)[rest] = arr
    return CheckpointBundle(meta, backbone, head)


def load_checkpoint(path, *, expected_config_hash=None, expected_ontology_hash=None,
                    strict=False) -> tuple[EchoNet, CheckpointMeta]:
    bundle = read_checkpoint(path)
    meta = bundle.meta
    for what, expected, actual in (("config", expected_config_hash, meta.config_hash),
                                   ("ontology", expected_ontology_hash, meta.ontology_hash)):
        if expected is not None and expected != actual:
            msg = f"{path}: {what} hash {actual} does not match expected {expected}"
            if strict:
                raise ConfigHashMismatch(msg)
            warnings.warn(msg, stacklevel=2)
    spec = BackboneSpec(**meta.backbone)
    model = EchoNet(spec, _new_backbone(spec, 0), _new_head(spec.embedding_dim, meta.num_classes, 0, 0))
    state = {f"backbone.{k}": torch.from_numpy(v.copy()) for k, v in bundle.backbone_params.items()}
    state.update({f"head.{k}": torch.from_numpy(v.copy()) for k, v in bundle.head_params.items()})
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CorruptCheckpoint(f"{path}: parameters do not fit {spec.name.value}: {exc}") from exc
    model.eval()
    return model, meta
