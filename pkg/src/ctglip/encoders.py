"""Vision encoder, organ-level pooling, projection head and text encoders."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .synthdata import OrganMask, Volume, mix_seed


class EncoderConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    d: int = 128
    hidden: int = 768
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or any(c <= 0 for c in self.channels):
            raise EncoderConfigError("channels must be a non-empty list of positive ints")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise EncoderConfigError("kernel must be a positive odd integer")
        if self.d < 2 or self.hidden < 1:
            raise EncoderConfigError("d must be >= 2 and hidden >= 1")

    @property
    def out_channels(self) -> int:
        return self.channels[0]

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["channels"] = list(self.channels)
        return doc


def _conv_block(cin: int, cout: int, k: int) -> nn.Sequential:
    # conv -> instance norm -> leaky relu, twice; no batch statistics, so a
    # volume's features do not depend on what else is in the batch
    return nn.Sequential(
        nn.Conv3d(cin, cout, k, padding=k // 2),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01),
        nn.Conv3d(cout, cout, k, padding=k // 2),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01),
    )


class VisionEncoder(nn.Module):
    """Small U-shaped 3D CNN returning a full-resolution feature map."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        k = cfg.kernel
        self.down = nn.ModuleList([_conv_block(cfg.in_channels, ch[0], k)])
        for cin, cout in zip(ch[:-1], ch[1:]):
            self.down.append(_conv_block(cin, cout, k))
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for cin, cout in zip(ch[:0:-1], ch[-2::-1]):
            self.up.append(nn.ConvTranspose3d(cin, cout, 2, stride=2))
            self.fuse.append(_conv_block(2 * cout, cout, k))

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    def check_shape(self, spatial: Sequence[int]) -> None:
        s = self.cfg.stride
        if any(int(n) % s for n in spatial):
            raise EncoderConfigError(
                f"volume shape {tuple(spatial)} is not divisible by the encoder stride {s}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_shape(x.shape[-3:])
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                x = F.max_pool3d(x, 2)
            x = block(x)
            skips.append(x)
        for up, fuse, skip in zip(self.up, self.fuse, reversed(skips[:-1])):
            x = fuse(torch.cat([skip, up(x)], dim=1))
        return x


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, hidden: int = 768, d: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class GroundedModel(nn.Module):
    """Encoder + projection head + voxelwise segmentation head."""

    def __init__(self, cfg: EncoderConfig, num_classes: int):
        super().__init__()
        self.cfg = cfg
        self.num_classes = num_classes
        self.encoder = VisionEncoder(cfg)
        self.head = ProjectionHead(cfg.out_channels, cfg.hidden, cfg.d)
        self.seg_head = nn.Conv3d(cfg.out_channels, num_classes, 1)

    def forward(self, volumes: torch.Tensor) -> torch.Tensor:
        return self.encoder(volumes)


def build_model(cfg: EncoderConfig, num_classes: int, seed: int = 0, dtype=torch.float32) -> GroundedModel:
    """Construct a model whose initial weights depend only on ``seed``."""
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(mix_seed(seed, 0x5EED) & 0x7FFFFFFFFFFFFFFF)
        model = GroundedModel(cfg, num_classes)
    finally:
        torch.random.set_rng_state(state)
    return model.to(dtype)


def volume_tensor(volume: Volume | np.ndarray, dtype=torch.float32) -> torch.Tensor:
    voxels = volume.voxels if isinstance(volume, Volume) else volume
    return torch.as_tensor(np.asarray(voxels), dtype=dtype)[None, None]


def encode_volume(enc: VisionEncoder, volume: Volume | np.ndarray) -> torch.Tensor:
    """Feature map ``(C, D, H, W)`` for a single volume."""
    dtype = next(enc.parameters()).dtype
    x = volume_tensor(volume, dtype)
    if not torch.isfinite(x).all():
        raise ValueError("volume contains non-finite values")
    return enc(x)[0]


def _labels(mask: OrganMask | np.ndarray | torch.Tensor) -> torch.Tensor:
    labels = mask.labels if isinstance(mask, OrganMask) else mask
    return torch.as_tensor(np.asarray(labels) if not torch.is_tensor(labels) else labels).long()


def pool_regions(fm: torch.Tensor, mask) -> tuple[list[int], torch.Tensor]:
    """Mean feature vector over each nonzero label, ascending by label id."""
    labels = _labels(mask)
    if labels.shape != fm.shape[1:]:
        raise ValueError(f"mask shape {tuple(labels.shape)} does not match feature map {tuple(fm.shape[1:])}")
    flat = labels.reshape(-1)
    ids = [int(i) for i in torch.unique(flat) if i != 0]
    if not ids:
        return [], fm.new_zeros((0, fm.shape[0]))
    onehot = (flat[None, :] == torch.tensor(ids)[:, None]).to(fm.dtype)
    counts = onehot.sum(dim=1, keepdim=True)
    pooled = onehot @ fm.reshape(fm.shape[0], -1).T / counts
    return ids, pooled


def organ_pool(fm: torch.Tensor, mask, head: ProjectionHead) -> tuple[list[int], torch.Tensor]:
    """Unit-norm organ embeddings ``(M, d)`` and their organ ids."""
    ids, pooled = pool_regions(fm, mask)
    if not ids:
        return ids, pooled.new_zeros((0, head.fc2.out_features))
    return ids, F.normalize(head(pooled), dim=-1)


# -- text side ---------------------------------------------------------------

class TextEncoder(Protocol):
    dim: int
    trainable: bool

    def encode(self, texts: Sequence[str]) -> np.ndarray: ...

    def state_bytes(self) -> bytes: ...


_TOKEN = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; punctuation is dropped."""
    return _TOKEN.findall(text.lower())


def token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass
class StubTextEncoder:
    """Deterministic bag-of-words encoder standing in for a frozen expert model.

    Each token maps to a Gaussian direction drawn from a generator seeded by
    ``mix_seed(seed, hash(token))``; a text is the L2-normalised sum of its
    token directions.
    """

    dim: int = 128
    seed: int = 0
    trainable: bool = field(default=False, init=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("embedding dimension must be >= 2")

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            rng = np.random.default_rng(mix_seed(self.seed, token_hash(token)))
            vec = rng.standard_normal(self.dim)
            vec.flags.writeable = False
            self._cache[token] = vec
        return vec

    def encode_one(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise ValueError(f"text {text!r} has no tokens")
        total = np.zeros(self.dim)
        for tok in tokens:
            total += self._token_vector(tok)
        return total / np.linalg.norm(total)

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            return np.zeros((0, self.dim))
        return np.stack([self.encode_one(t) for t in texts])

    def state_bytes(self) -> bytes:
        return json.dumps({"kind": "stub", "dim": self.dim, "seed": self.seed}, sort_keys=True).encode()

    def to_json(self) -> dict:
        return {"kind": "stub", "dim": self.dim, "seed": self.seed}


def stub_encode_text(texts: Sequence[str], d: int, seed: int) -> np.ndarray:
    return StubTextEncoder(dim=d, seed=seed).encode(texts)


class PrecomputedTextEncoder:
    """Looks up embeddings computed offline by an external model.

    The file is a JSON object mapping each exact string to its vector;
    vectors are L2-normalised on load.
    """

    trainable = False

    def __init__(self, table: dict[str, Sequence[float]], path: str | None = None):
        if not table:
            raise ValueError("empty embedding table")
        self.path = path
        self._table = {}
        dims = set()
        for text, vec in table.items():
            arr = np.asarray(vec, dtype=np.float64)
            norm = np.linalg.norm(arr)
            if arr.ndim != 1 or not np.isfinite(norm) or norm == 0:
                raise ValueError(f"invalid embedding for {text!r}")
            arr = arr / norm
            arr.flags.writeable = False
            self._table[text] = arr
            dims.add(arr.shape[0])
        if len(dims) != 1:
            raise ValueError(f"inconsistent embedding dimensions {sorted(dims)}")
        self.dim = dims.pop()

    @classmethod
    def load(cls, path) -> "PrecomputedTextEncoder":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), path=str(path))

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in texts if t not in self._table]
        if missing:
            raise KeyError(f"no precomputed embedding for {missing[0]!r} ({len(missing)} missing)")
        if len(texts) == 0:
            return np.zeros((0, self.dim))
        return np.stack([self._table[t] for t in texts])

    def state_bytes(self) -> bytes:
        h = hashlib.sha256()
        for text in sorted(self._table):
            h.update(text.encode("utf-8"))
            h.update(self._table[text].astype("<f8").tobytes())
        return h.digest()

    def to_json(self) -> dict:
        return {"kind": "precomputed", "path": self.path}


def text_encoder_from_json(doc: dict, base: Path | None = None) -> TextEncoder:
    kind = doc.get("kind", "stub")
    if kind == "stub":
        return StubTextEncoder(dim=int(doc.get("dim", 128)), seed=int(doc.get("seed", 0)))
    if kind == "precomputed":
        path = Path(doc["path"])
        if base is not None and not path.is_absolute():
            path = base / path
        return PrecomputedTextEncoder.load(path)
    raise ValueError(f"unknown text encoder kind {kind!r}")
