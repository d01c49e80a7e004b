"""Siamese similarity head over signature pairs, pair generation and
F1-driven threshold selection."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .signature import Signature, TrainingError, hash_tensors
from .validation import SIGNATURE_DIM, check_signatures

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "camfprint-similarity-net/1"
DEFAULT_GRID = tuple(
    [round(0.50 + 0.05 * k, 2) for k in range(10)]
    + [0.96, 0.97, 0.98, 0.99, 0.995]
)
PAIR_RECORD = np.dtype([("sig1", "<u8"), ("sig2", "<u8"), ("label", "u1")])


# --------------------------------------------------------------------------
# pairs


@dataclass(frozen=True)
class SignaturePair:
    s1: Signature
    s2: Signature
    label: int


@dataclass
class PairSet:
    """Index pairs into a shared list of signatures.

    Behaves as a sequence of :class:`SignaturePair` without materialising
    the 1024-float payloads per pair.
    """

    signatures: List[Signature]
    left: np.ndarray
    right: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, k: int) -> SignaturePair:
        return SignaturePair(
            self.signatures[self.left[k]], self.signatures[self.right[k]], int(self.labels[k])
        )

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    @property
    def extractor_version(self) -> str:
        return self.signatures[0].extractor_version

    def matrix(self) -> np.ndarray:
        return np.stack([s.values for s in self.signatures])

    def subset(self, mask: np.ndarray) -> "PairSet":
        mask = np.asarray(mask, bool)
        return PairSet(self.signatures, self.left[mask], self.right[mask], self.labels[mask])

    def split_by_members(self, holdout: np.ndarray) -> Tuple["PairSet", "PairSet"]:
        """``(pairs not fully inside holdout, pairs with both ends in holdout)``."""
        holdout = np.asarray(holdout, bool)
        both = holdout[self.left] & holdout[self.right]
        return self.subset(~both), self.subset(both)


def _device_codes(signatures: Sequence[Signature]) -> np.ndarray:
    lookup = {}
    return np.array([lookup.setdefault(s.device_id, len(lookup)) for s in signatures])


def make_pairs(signatures: Sequence[Signature], mode: str = "all", seed: int = 0) -> PairSet:
    """Label every unordered pair 1 for same device, 0 otherwise.

    Each pair appears once, with a seeded random orientation: the fusion layer
    is order-sensitive and a fixed ``i < j`` order would tie the left slot to
    lower device indices. ``mode="balanced"`` keeps all positives and an
    equally sized seeded random subset of the negatives.
    """
    signatures = list(signatures)
    if len(signatures) < 2:
        raise ValueError("need at least two signatures")
    versions = {s.extractor_version for s in signatures}
    if len(versions) != 1:
        raise ValueError("signatures come from different extractors")
    codes = _device_codes(signatures)
    left, right = np.triu_indices(len(signatures), k=1)
    labels = (codes[left] == codes[right]).astype(np.uint8)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("no same-device pairs")
    if mode == "balanced":
        rng = np.random.default_rng([seed, 0])
        neg = np.flatnonzero(labels == 0)
        if len(neg) > n_pos:
            neg = rng.choice(neg, size=n_pos, replace=False)
        keep = np.sort(np.concatenate([np.flatnonzero(labels == 1), neg]))
        left, right, labels = left[keep], right[keep], labels[keep]
    elif mode != "all":
        raise ValueError(f"unknown pair sampling mode {mode!r}")
    flip = np.random.default_rng([seed, 1]).random(len(labels)) < 0.5
    left, right = np.where(flip, right, left), np.where(flip, left, right)
    return PairSet(signatures, left, right, labels)


def write_pair_file(path, pairs: PairSet, sig_ids: Sequence[int]) -> None:
    """Little-endian records ``(sig1_id:u64, sig2_id:u64, label:u8)``."""
    sig_ids = np.asarray(sig_ids, dtype=np.uint64)
    rec = np.empty(len(pairs), PAIR_RECORD)
    rec["sig1"] = sig_ids[pairs.left]
    rec["sig2"] = sig_ids[pairs.right]
    rec["label"] = pairs.labels
    Path(path).write_bytes(rec.tobytes())


def read_pair_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % PAIR_RECORD.itemsize:
        raise ValueError(f"{path}: truncated pair file")
    return np.frombuffer(raw, PAIR_RECORD)


# --------------------------------------------------------------------------
# network


@dataclass
class SimilarityNetSpec:
    signature_dim: int = SIGNATURE_DIM
    fc1_units: int = 2048
    hidden_units: int = 64

    @property
    def fusion_dim(self) -> int:
        return 2 * self.fc1_units + self.signature_dim


class SimilarityNet(nn.Module):
    """``sigmoid(head(relu(fc2([fc1(s1), fc1(s2), s1 * s2]))))`` with one fc1."""

    def __init__(self, spec: Optional[SimilarityNetSpec] = None):
        super().__init__()
        self.spec = spec or SimilarityNetSpec()
        s = self.spec
        self.fc1 = nn.Sequential(nn.Linear(s.signature_dim, s.fc1_units), nn.ReLU())
        self.fc2 = nn.Sequential(nn.Linear(s.fusion_dim, s.hidden_units), nn.ReLU())
        self.out = nn.Linear(s.hidden_units, 1)
        self.extractor_version: Optional[str] = None

    def _check(self, s: torch.Tensor) -> None:
        if s.shape[-1] != self.spec.signature_dim:
            raise ValueError(
                f"signature length {s.shape[-1]} != {self.spec.signature_dim}"
            )

    def fusion(self, s1: torch.Tensor, s2: torch.Tensor) -> torch.Tensor:
        self._check(s1)
        self._check(s2)
        return torch.cat([self.fc1(s1), self.fc1(s2), s1 * s2], dim=-1)

    def logits(self, s1: torch.Tensor, s2: torch.Tensor) -> torch.Tensor:
        return self.out(self.fc2(self.fusion(s1, s2))).squeeze(-1)

    def forward(self, s1: torch.Tensor, s2: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(s1, s2))

    def indexed_logits(self, S: torch.Tensor, left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
        """Logits for pairs ``(S[left], S[right])``, running fc1 once per
        distinct signature in the batch."""
        self._check(S)
        ids, inverse = torch.unique(torch.cat([left, right]), return_inverse=True)
        hidden = self.fc1(S[ids])
        n = len(left)
        h1, h2 = hidden[inverse[:n]], hidden[inverse[n:]]
        fused = torch.cat([h1, h2, S[left] * S[right]], dim=-1)
        return self.out(self.fc2(fused)).squeeze(-1)

    @property
    def version(self) -> str:
        return hash_tensors(sorted(self.state_dict().items()))


def build_similarity_net(spec: Optional[SimilarityNetSpec] = None, seed: Optional[int] = None) -> SimilarityNet:
    if seed is not None:
        torch.manual_seed(seed)
    return SimilarityNet(spec)


def score_arrays(model: SimilarityNet, A, B, batch_size: int = 4096) -> np.ndarray:
    """Scores for row-aligned signature matrices ``A`` and ``B``."""
    dim = model.spec.signature_dim
    A = check_signatures(A, dim)
    B = check_signatures(B, dim)
    if len(A) != len(B):
        raise ValueError("A and B must have the same number of rows")
    model.eval()
    out = np.empty(len(A), np.float64)
    with torch.no_grad():
        for start in range(0, len(A), batch_size):
            a = torch.from_numpy(A[start : start + batch_size])
            b = torch.from_numpy(B[start : start + batch_size])
            out[start : start + batch_size] = model(a, b).double().numpy()
    return out


def score(f_sim: SimilarityNet, s1: Signature, s2: Signature) -> float:
    if s1.extractor_version != s2.extractor_version:
        raise ValueError("signatures come from different extractors")
    if f_sim.extractor_version is not None and f_sim.extractor_version != s1.extractor_version:
        raise ValueError("similarity model was trained on another extractor's signatures")
    return float(score_arrays(f_sim, s1.values[None], s2.values[None])[0])


def score_pairs(f_sim: SimilarityNet, pairs: PairSet, batch_size: int = 4096) -> np.ndarray:
    if f_sim.extractor_version is not None and f_sim.extractor_version != pairs.extractor_version:
        raise ValueError("similarity model was trained on another extractor's signatures")
    S = pairs.matrix()
    return score_arrays(f_sim, S[pairs.left], S[pairs.right], batch_size)


def symmetry_gap(f_sim: SimilarityNet, A, B) -> dict:
    """``|f(a, b) - f(b, a)|`` over row-aligned pairs. The fusion layer is
    ordered, so the score is not symmetric by construction; this measures
    by how much."""
    gap = np.abs(score_arrays(f_sim, A, B) - score_arrays(f_sim, B, A))
    return {"pairs": int(len(gap)), "mean": float(gap.mean()), "max": float(gap.max())}


# --------------------------------------------------------------------------
# phase II


@dataclass
class Phase2Config:
    epochs: int = 30
    learning_rate: float = 0.005
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 3
    batch_size: int = 32
    pair_sampling: str = "all"
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs, batch_size and lr_decay_every must be >= 1")
        if self.pair_sampling not in ("all", "balanced"):
            raise ValueError("pair_sampling must be 'all' or 'balanced'")


def learning_rate_at(epoch: int, cfg: Phase2Config) -> float:
    """Step schedule; ``epoch`` is 1-based."""
    return cfg.learning_rate * cfg.lr_decay_factor ** ((epoch - 1) // cfg.lr_decay_every)


def f1_score(pred: np.ndarray, labels: np.ndarray) -> float:
    pred = np.asarray(pred, bool)
    labels = np.asarray(labels, bool)
    tp = int(np.count_nonzero(pred & labels))
    fp = int(np.count_nonzero(pred & ~labels))
    fn = int(np.count_nonzero(~pred & labels))
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


@dataclass
class Phase2Result:
    model: SimilarityNet
    log: List[dict]


def fit_similarity_net(
    model: SimilarityNet,
    S: np.ndarray,
    left: np.ndarray,
    right: np.ndarray,
    labels: np.ndarray,
    cfg: Phase2Config,
    val: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
) -> Phase2Result:
    """Binary cross-entropy / SGD on index pairs into the signature matrix ``S``."""
    S = torch.from_numpy(check_signatures(S, model.spec.signature_dim))
    left = torch.as_tensor(np.asarray(left, np.int64))
    right = torch.as_tensor(np.asarray(right, np.int64))
    y = torch.as_tensor(np.asarray(labels, np.float32))
    if len(y) == 0 or len(torch.unique(y)) < 2:
        raise ValueError("training pairs must contain both labels")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    loss_fn = nn.BCEWithLogitsLoss()
    log: List[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate_at(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = torch.randperm(len(y), generator=gen)
        running, correct = 0.0, 0
        for b, start in enumerate(range(0, len(y), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            z = model.indexed_logits(S, left[idx], right[idx])
            loss = loss_fn(z, y[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
            correct += int(((z > 0).float() == y[idx]).sum())
        entry = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": running / len(y),
            "val_loss": None,
            "train_acc": correct / len(y),
            "val_acc": None,
            "val_f1": None,
        }
        if val is not None and len(val[2]):
            vl, vr, vy = (torch.as_tensor(np.asarray(a)) for a in val)
            model.eval()
            with torch.no_grad():
                z = model.indexed_logits(S, vl.long(), vr.long())
                entry["val_loss"] = loss_fn(z, vy.float()).item()
                pred = (z > 0).numpy()
            entry["val_acc"] = float(np.mean(pred == vy.numpy().astype(bool)))
            entry["val_f1"] = f1_score(pred, vy.numpy())
        log.append(entry)
        logger.info("phase2 %s", entry)
    model.eval()
    return Phase2Result(model, log)


def train_phase2(
    model: SimilarityNet, pairs: PairSet, cfg: Phase2Config, val_pairs: Optional[PairSet] = None
) -> Phase2Result:
    S = pairs.matrix()
    val = None
    if val_pairs is not None and len(val_pairs):
        if val_pairs.signatures is not pairs.signatures:
            raise ValueError("validation pairs must index the same signature list")
        val = (val_pairs.left, val_pairs.right, val_pairs.labels)
    result = fit_similarity_net(model, S, pairs.left, pairs.right, pairs.labels, cfg, val)
    model.extractor_version = pairs.extractor_version
    return result


# --------------------------------------------------------------------------
# threshold


@dataclass
class Threshold:
    eta: float
    selection_f1: float
    grid: List[float] = field(default_factory=list)
    extractor_version: Optional[str] = None
    similarity_version: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Threshold":
        return cls(**json.loads(Path(path).read_text()))


def candidate_thresholds(scores) -> np.ndarray:
    """Midpoints between consecutive distinct scores, plus one value below
    and one above the range; every achievable split of the scores appears."""
    u = np.unique(np.asarray(scores, np.float64))
    mids = (u[:-1] + u[1:]) / 2
    return np.concatenate([[u[0] / 2], mids, [(u[-1] + 1) / 2]])


def best_threshold(scores, labels, grid=DEFAULT_GRID) -> Tuple[float, float]:
    """``(eta, f1)`` maximising F1 of ``score >= eta``; ties go to the larger eta."""
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("F1 undefined: validation pairs need both labels")
    grid = np.asarray(list(grid), np.float64)
    if grid.size == 0 or grid.min() < 0 or grid.max() > 1:
        raise ValueError("grid must be non-empty with values in [0, 1]")
    best_eta, best_f1 = None, -1.0
    for eta in sorted(set(grid.tolist()), reverse=True):
        f1 = f1_score(scores >= eta, labels)
        if f1 > best_f1:
            best_eta, best_f1 = eta, f1
    return float(best_eta), float(best_f1)


def select_threshold(f_sim: SimilarityNet, val_pairs: PairSet, grid=DEFAULT_GRID) -> Threshold:
    scores = score_pairs(f_sim, val_pairs)
    if isinstance(grid, str):
        if grid != "exhaustive":
            raise ValueError(f"unknown grid {grid!r}")
        grid = candidate_thresholds(scores)
    eta, f1 = best_threshold(scores, val_pairs.labels, grid)
    return Threshold(
        eta, f1, [float(g) for g in grid], val_pairs.extractor_version, f_sim.version
    )


# --------------------------------------------------------------------------
# checkpoints


def save_similarity(path, model: SimilarityNet, config: Optional[Phase2Config] = None) -> str:
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    version = model.version
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "spec": asdict(model.spec),
            "state_dict": state,
            "extractor_version": model.extractor_version,
            "config": asdict(config) if config is not None else None,
            "content_hash": version,
        },
        Path(path),
    )
    return version


def load_similarity(path) -> SimilarityNet:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a similarity-network checkpoint")
    model = SimilarityNet(SimilarityNetSpec(**blob["spec"]))
    model.load_state_dict(blob["state_dict"])
    model.extractor_version = blob["extractor_version"]
    model.eval()
    if model.version != blob["content_hash"]:
        raise ValueError(f"checkpoint {path} failed its content hash check")
    return model
