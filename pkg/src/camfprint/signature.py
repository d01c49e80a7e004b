"""Device-classification CNN, its phase-I training loop and the truncated
1024-d signature extractor."""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .data import ImageRecord, Manifest, load_image, load_images
from .validation import SIGNATURE_DIM, channel_means, check_images, preprocess

logger = logging.getLogger(__name__)

DEFAULT_INPUT_SIZE = (256, 256)
CHECKPOINT_FORMAT = "camfprint-signature-net/1"

# (out_channels, kernel) per conv block; each is conv -> batchnorm -> tanh -> maxpool
CONV_BLOCKS = ((96, 7), (64, 5), (64, 5), (128, 1))
POOL = 3


class TrainingError(RuntimeError):
    pass


def feature_map_sizes(input_size: Tuple[int, int]) -> List[Tuple[int, int]]:
    """Spatial size after each conv block.

    Convolutions keep the size ("same" padding); pools use window and stride 3
    and keep the partial window at the border, so ``n -> ceil(n / 3)``.
    """
    h, w = (int(v) for v in input_size)
    sizes = []
    for block in range(1, len(CONV_BLOCKS) + 1):
        if h < 1 or w < 1:
            raise ValueError(f"input size {tuple(input_size)} collapses to zero at block {block}")
        h, w = math.ceil(h / POOL), math.ceil(w / POOL)
        sizes.append((h, w))
    return sizes


class SignatureNet(nn.Module):
    def __init__(self, num_devices: int, input_size: Tuple[int, int] = DEFAULT_INPUT_SIZE):
        super().__init__()
        if num_devices < 2:
            raise ValueError("num_devices must be >= 2")
        self.num_devices = int(num_devices)
        self.input_size = tuple(int(v) for v in input_size)
        fh, fw = feature_map_sizes(self.input_size)[-1]

        blocks = []
        in_ch = 3
        for out_ch, k in CONV_BLOCKS:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, k, padding=k // 2),
                    nn.BatchNorm2d(out_ch),
                    nn.Tanh(),
                    nn.MaxPool2d(POOL, stride=POOL, ceil_mode=True),
                )
            )
            in_ch = out_ch
        self.features = nn.Sequential(*blocks)
        self.signature = nn.Sequential(
            nn.Flatten(), nn.Linear(in_ch * fh * fw, SIGNATURE_DIM), nn.Tanh()
        )
        self.head = nn.Sequential(
            nn.Linear(SIGNATURE_DIM, 200), nn.Tanh(), nn.Linear(200, self.num_devices)
        )

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.signature(self.features(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Class logits; softmax is folded into the loss."""
        return self.head(self.embed(x))

    def forward_both(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Block-5 signature and block-6 softmax probabilities."""
        sig = self.embed(x)
        return sig, torch.softmax(self.head(sig), dim=1)


def build_signature_net(
    num_devices: int, input_size=DEFAULT_INPUT_SIZE, seed: Optional[int] = None
) -> SignatureNet:
    if seed is not None:
        torch.manual_seed(seed)
    return SignatureNet(num_devices, input_size)


def hash_tensors(items) -> str:
    h = hashlib.sha256()
    for name, tensor in items:
        t = torch.as_tensor(tensor).detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def extractor_hash(model: nn.Module, channel_mean=None) -> str:
    """SHA-256 over blocks 1-5 (parameters, batchnorm buffers, preprocessing)."""
    items = [(f"features.{k}", v) for k, v in model.features.state_dict().items()]
    items += [(f"signature.{k}", v) for k, v in model.signature.state_dict().items()]
    if channel_mean is not None:
        items.append(("channel_mean", np.asarray(channel_mean, np.float32)))
    return hash_tensors(items)


@dataclass(frozen=True)
class Signature:
    values: np.ndarray = field(repr=False)
    source: str
    device_id: str
    extractor_version: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.shape != (SIGNATURE_DIM,):
            raise ValueError(f"signature must have {SIGNATURE_DIM} values, got {v.shape}")
        object.__setattr__(self, "values", v)


class SignatureExtractor(nn.Module):
    """Blocks 1-5 of a :class:`SignatureNet`, sharing its modules.

    Always in inference mode. Carries the preprocessing constants so raw
    uint8 images can go straight into :meth:`extract`.
    """

    def __init__(self, net: SignatureNet, channel_mean=None):
        super().__init__()
        self.features = net.features
        self.signature = net.signature
        self.input_size = net.input_size
        self.channel_mean = (
            np.zeros(3, np.float32) if channel_mean is None else np.asarray(channel_mean, np.float32)
        )
        super().train(False)

    def train(self, mode: bool = True):
        return super().train(False)

    @property
    def version(self) -> str:
        return extractor_hash(self, self.channel_mean)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.signature(self.features(x))

    def extract(self, images, batch_size: int = 32) -> np.ndarray:
        images = check_images(images, self.input_size)
        out = np.empty((len(images), SIGNATURE_DIM), np.float32)
        self.eval()
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                x = preprocess(images[start : start + batch_size], self.channel_mean)
                out[start : start + batch_size] = self(x).numpy()
        return out


def truncate(model: SignatureNet, channel_mean=None) -> SignatureExtractor:
    return SignatureExtractor(model, channel_mean)


def extract_signature(f_sig: SignatureExtractor, image: ImageRecord) -> Signature:
    pixels = load_image(image.path, f_sig.input_size)
    values = f_sig.extract(pixels[None])[0]
    return Signature(values, image.path, image.device_id, f_sig.version)


def extract_signatures(
    f_sig: SignatureExtractor, records: Sequence[ImageRecord], batch_size: int = 32
) -> List[Signature]:
    version = f_sig.version
    out: List[Signature] = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        values = f_sig.extract(load_images(chunk, f_sig.input_size), batch_size)
        out.extend(Signature(v, r.path, r.device_id, version) for v, r in zip(values, chunk))
    return out


# --------------------------------------------------------------------------
# phase I


@dataclass
class Phase1Config:
    epochs: int = 15
    stop_epoch: int = 5
    learning_rate: float = 0.001
    momentum: float = 0.95
    weight_decay: float = 0.0005
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.stop_epoch <= self.epochs:
            raise ValueError("need 1 <= stop_epoch <= epochs")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Phase1Result:
    model: SignatureNet
    channel_mean: np.ndarray
    log: List[dict]
    epoch: int

    @property
    def extractor(self) -> SignatureExtractor:
        return truncate(self.model, self.channel_mean)


def _evaluate(model, X, y, mean, batch_size, loss_fn):
    model.eval()
    total, correct = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(X), batch_size):
            xb = preprocess(X[start : start + batch_size], mean)
            yb = torch.from_numpy(y[start : start + batch_size])
            logits = model(xb)
            total += loss_fn(logits, yb).item() * len(yb)
            correct += int((logits.argmax(1) == yb).sum())
    return total / len(X), correct / len(X)


def fit_signature_net(
    model: SignatureNet,
    X: np.ndarray,
    y: np.ndarray,
    cfg: Phase1Config,
    X_val: Optional[np.ndarray] = None,
    y_val: Optional[np.ndarray] = None,
) -> Phase1Result:
    """Cross-entropy / SGD training on in-memory images.

    Runs ``cfg.epochs`` epochs for the log but returns the weights as they
    were at the end of ``cfg.stop_epoch``.
    """
    X = check_images(X, model.input_size)
    y = np.asarray(y, dtype=np.int64)
    if len(X) != len(y) or len(X) == 0:
        raise ValueError("X and y must be non-empty and of equal length")
    if y.min() < 0 or y.max() >= model.num_devices:
        raise ValueError("labels out of range for the classification head")
    has_val = X_val is not None and len(X_val) > 0
    if has_val:
        X_val = check_images(X_val, model.input_size)
        y_val = np.asarray(y_val, dtype=np.int64)

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    mean = channel_means(X)
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    loss_fn = nn.CrossEntropyLoss()
    log: List[dict] = []
    snapshot = None
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(len(X), generator=gen).numpy()
        seen, running, correct = 0, 0.0, 0
        for b, start in enumerate(range(0, len(X), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2 and len(X) > 1:
                continue  # batchnorm needs two samples
            xb = preprocess(X[idx], mean)
            yb = torch.from_numpy(y[idx])
            opt.zero_grad()
            logits = model(xb)
            loss = loss_fn(logits, yb)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
            correct += int((logits.argmax(1) == yb).sum())
            seen += len(idx)
        entry = {
            "epoch": epoch,
            "train_loss": running / max(seen, 1),
            "val_loss": None,
            "train_acc": correct / max(seen, 1),
            "val_acc": None,
        }
        if has_val:
            entry["val_loss"], entry["val_acc"] = _evaluate(
                model, X_val, y_val, mean, cfg.batch_size, loss_fn
            )
        log.append(entry)
        logger.info("phase1 %s", entry)
        if epoch == cfg.stop_epoch:
            snapshot = copy.deepcopy(model.state_dict())
    model.load_state_dict(snapshot)
    model.eval()
    return Phase1Result(model, mean, log, cfg.stop_epoch)


def train_phase1(
    model: SignatureNet, manifest: Manifest, cfg: Phase1Config
) -> Phase1Result:
    index = manifest.device_index()
    train = manifest.select("train")
    val = manifest.select("val")
    if not train:
        raise ValueError("manifest has no training records")
    X = load_images(train, model.input_size)
    y = np.array([index[r.device_id] for r in train])
    X_val = load_images(val, model.input_size) if val else None
    y_val = np.array([index[r.device_id] for r in val]) if val else None
    return fit_signature_net(model, X, y, cfg, X_val, y_val)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: SignatureNet, channel_mean, epoch: int, devices=None, config=None) -> str:
    """Write a signature-network checkpoint; returns its content hash."""
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    mean = np.asarray(channel_mean, np.float32)
    content_hash = hash_tensors(sorted(state.items()) + [("channel_mean", mean)])
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "num_devices": model.num_devices,
            "input_size": list(model.input_size),
            "state_dict": state,
            "channel_mean": mean.tolist(),
            "epoch": int(epoch),
            "devices": list(devices) if devices is not None else None,
            "config": asdict(config) if config is not None else None,
            "extractor_version": extractor_hash(model, mean),
            "content_hash": content_hash,
        },
        Path(path),
    )
    return content_hash


def load_checkpoint(path) -> Tuple[SignatureNet, np.ndarray, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a signature-network checkpoint")
    model = SignatureNet(blob["num_devices"], tuple(blob["input_size"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    mean = np.asarray(blob["channel_mean"], np.float32)
    check = hash_tensors(sorted(model.state_dict().items()) + [("channel_mean", mean)])
    if check != blob["content_hash"]:
        raise ValueError(f"checkpoint {path} failed its content hash check")
    return model, mean, blob
