"""Experiment configuration: one JSON document drives every CLI stage."""
from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .data import SynthConfig
from .signature import Phase1Config
from .similarity import DEFAULT_GRID, Phase2Config

OUTPUT_DIR_ENV = "CAMFPRINT_OUTPUT_DIR"

# fixed artifact names under output_dir
MANIFEST = "manifest.json"
CONFIG = "config.json"
PHASE1_CKPT = "phase1.ckpt"
PHASE1_LOG = "phase1_log.jsonl"
STORE = "sigs.store"
PAIRS = "pairs.bin"
VAL_PAIRS = "val_pairs.bin"
PHASE2_CKPT = "phase2.ckpt"
PHASE2_LOG = "phase2_log.jsonl"
THRESHOLD = "threshold.json"
EVAL_DIR = "eval"


@dataclass
class EvalConfig:
    n_pairs_per_cell: int = 100
    grid: List[float] = field(default_factory=lambda: list(DEFAULT_GRID))
    seed: Optional[int] = None
    floor: float = 0.0


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/default"
    manifest_path: Optional[str] = None
    seed: int = 0
    input_size: Tuple[int, int] = (256, 256)
    train_frac: float = 0.7
    val_frac: float = 0.15
    min_images: int = 2
    hidden_units: int = 64
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: Optional[SynthConfig] = None
    dresden_root: Optional[str] = None

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)

    def path(self, name: str) -> Path:
        return Path(self.output_dir) / name

    @property
    def manifest_file(self) -> Path:
        return Path(self.manifest_path) if self.manifest_path else self.path(MANIFEST)

    def stage_seed(self, stage: str) -> int:
        """Per-stage seed fanned out from the master seed."""
        seq = np.random.SeedSequence([self.seed, zlib.crc32(stage.encode())])
        return int(seq.generate_state(1)[0])

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.path(CONFIG)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "phase1" in raw:
            raw["phase1"] = Phase1Config(**raw["phase1"])
        if "phase2" in raw:
            raw["phase2"] = Phase2Config(**raw["phase2"])
        if "eval" in raw:
            raw["eval"] = EvalConfig(**raw["eval"])
        if raw.get("synth") is not None:
            raw["synth"] = SynthConfig(**raw["synth"])
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_DIR_ENV, "runs/default")
