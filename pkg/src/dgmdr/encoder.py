"""Feature extractors, the frozen-oracle / trainable-target pair, and the classifier."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_FORMAT_VERSION = 1


class FeatureExtractor(nn.Module):
    """Maps a (B, 3, H, W) batch to (B, feature_dim) pooled features."""

    architecture_id: str = "abstract"
    feature_dim: int

    def flat_parameters(self) -> torch.Tensor:
        return flat_parameters(self.parameters())


class TinyCNN(FeatureExtractor):
    """Small conv net for desk-scale runs.

    A 4x average-pool stem makes 224x224 inputs cheap on a CPU.
    """

    architecture_id = "tiny_cnn"

    def __init__(self, width: int = 16):
        super().__init__()
        self.width = width
        self.feature_dim = 4 * width
        self.body = nn.Sequential(
            nn.AvgPool2d(4),
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class ResNet50Extractor(FeatureExtractor):
    """torchvision ResNet-50 trunk with the fc layer removed (d = 2048).

    No weights are bundled; load a state dict through ``oracle_checkpoint``.
    """

    architecture_id = "resnet50"

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        net.fc = nn.Identity()
        self.net = net
        self.feature_dim = 2048

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


ARCHITECTURES: dict[str, Callable[..., FeatureExtractor]] = {
    "tiny_cnn": TinyCNN,
    "resnet50": ResNet50Extractor,
}


def build_extractor(architecture: str, **kwargs) -> FeatureExtractor:
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}; known: {sorted(ARCHITECTURES)}")
    factory = ARCHITECTURES[architecture]
    if architecture == "tiny_cnn":
        return factory(width=kwargs.get("width", 16))
    return factory()


def register_architecture(name: str, factory: Callable[..., FeatureExtractor]) -> None:
    ARCHITECTURES[name] = factory


class Classifier(nn.Module):
    """Affine map from features to class logits; no softmax."""

    def __init__(self, feature_dim: int, num_classes: int, seed: int = 0):
        super().__init__()
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.linear = nn.Linear(feature_dim, num_classes)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.linear.weight.copy_(torch.randn(num_classes, feature_dim, generator=gen) * 0.01)
            self.linear.bias.zero_()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return classify(self, z)


def classify(g: Classifier, z_f: torch.Tensor) -> torch.Tensor:
    if z_f.dim() != 2 or z_f.shape[1] != g.feature_dim:
        raise ValueError(f"classifier expects (B, {g.feature_dim}) features, got {tuple(z_f.shape)}")
    return g.linear(z_f)


@dataclass
class OraclePair:
    oracle: FeatureExtractor
    target: FeatureExtractor

    def __post_init__(self):
        if self.oracle.feature_dim != self.target.feature_dim:
            raise ValueError("oracle and target feature dims differ")

    @property
    def feature_dim(self) -> int:
        return self.target.feature_dim


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def init_target_from_oracle(oracle: FeatureExtractor) -> OraclePair:
    """Deep-copy the oracle into a trainable target and freeze the oracle."""
    target = copy.deepcopy(oracle)
    for p in target.parameters():
        p.requires_grad_(True)
    target.train()
    return OraclePair(oracle=freeze(oracle), target=target)


def extract_features(pair: OraclePair, batch: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (Z_f, Z_f0); the oracle runs without gradient tracking."""
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    z_f = pair.target(batch)
    with torch.no_grad():
        z_f0 = pair.oracle(batch)
    return z_f, z_f0


# -- flat parameter views, checksums, checkpoints ---------------------------

def flat_parameters(params: Iterable[torch.Tensor]) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in params])


def load_flat_parameters(modules: Iterable[nn.Module], flat) -> None:
    flat = torch.as_tensor(np.asarray(flat))
    offset = 0
    with torch.no_grad():
        for m in modules:
            for p in m.parameters():
                n = p.numel()
                if offset + n > flat.numel():
                    raise ValueError("flat parameter vector too short")
                p.copy_(flat[offset:offset + n].view_as(p))
                offset += n
    if offset != flat.numel():
        raise ValueError(f"flat parameter vector has {flat.numel()} entries, model needs {offset}")


def parameter_checksum(*modules: nn.Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, p in m.named_parameters():
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: Path, architecture_id: str, params: np.ndarray, feature_dim: int,
                    num_classes: int, extra: Optional[dict] = None) -> None:
    """Write an .npz holding metadata plus a flat float parameter vector."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture_id": architecture_id,
        "feature_dim": int(feature_dim),
        "num_classes": int(num_classes),
    }
    meta.update(extra or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, params=np.asarray(params), meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))


def load_checkpoint(path: Path) -> tuple[dict, np.ndarray]:
    try:
        with np.load(Path(path)) as data:
            meta = json.loads(data["meta"].tobytes().decode())
            params = data["params"].copy()
    except (OSError, KeyError, ValueError) as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"checkpoint {path} has unsupported format_version {meta.get('format_version')}")
    return meta, params


def load_extractor_weights(extractor: FeatureExtractor, path: Path) -> None:
    """Load oracle weights from our .npz checkpoint or a torch state dict."""
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"oracle checkpoint {path} not found")
    if path.suffix == ".npz":
        meta, params = load_checkpoint(path)
        if meta["architecture_id"] != extractor.architecture_id:
            raise ValueError(f"checkpoint is {meta['architecture_id']}, extractor is {extractor.architecture_id}")
        n = sum(p.numel() for p in extractor.parameters())
        load_flat_parameters([extractor], params[:n])
        return
    state = torch.load(path, map_location="cpu", weights_only=True)
    target = extractor.net if hasattr(extractor, "net") else extractor
    state = {k: v for k, v in state.items() if not k.startswith("fc.")}
    missing, unexpected = target.load_state_dict(state, strict=False)
    if unexpected or [k for k in missing if not k.startswith("fc.")]:
        raise ValueError(f"state dict mismatch: missing={missing} unexpected={unexpected}")
