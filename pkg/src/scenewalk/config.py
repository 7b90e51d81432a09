"""Pipeline configuration: one flat dataclass, JSON round-trip, and typed
``--key value`` overrides for the CLI."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ValidationError

MODES = ("visual_oracle", "reading_oracle", "end_to_end", "noisy")


@dataclass
class PipelineConfig:
    # dimensions
    dim: int = 64
    n_slots: int = 12
    m_max: int = 5
    a_max: int = 16
    enc_blocks: int = 2
    dec_blocks: int = 2
    attn_heads: int = 2
    ffn_mult: int = 2
    max_question_len: int = 32
    # loss weights
    lambda_look: float = 1.0
    lambda_read: float = 1.0
    lambda_think: float = 1.0
    lambda_answer: float = 1.0
    lambda_box: float = 1.0
    lambda_align: float = 1.0
    # optimization
    optimizer: str = "adam"
    lr: float = 2e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    epochs: int = 40
    batch_size: int = 32
    # step decay: multiply lr by lr_decay_factor at these epochs ("" = never)
    lr_decay_epochs: str = "24,32"
    lr_decay_factor: float = 0.5
    # curriculum: early epochs drive the engine with embedded gold programs
    # while the parser is pulled toward that embedding; later epochs go joint
    gold_program_epochs: int = 6
    # mode and detector-noise simulation
    mode: str = "visual_oracle"
    noise_sigma: float = 0.1
    slot_dropout: float = 0.1
    # train-time embedding jitter (any mode): regularizes the engine so it
    # reads embedding directions instead of memorizing exact scene vectors
    train_noise_sigma: float = 0.05
    # seeds and paths
    seed: int = 1234
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("dim", "n_slots", "m_max", "a_max", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValidationError(f"config field {name} must be >= 1")
        for name in (
            "lambda_look",
            "lambda_read",
            "lambda_think",
            "lambda_answer",
            "lambda_box",
            "lambda_align",
        ):
            if getattr(self, name) < 0:
                raise ValidationError(f"loss weight {name} must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Semantic hash: filesystem locations do not change the model."""
        data = {
            k: v for k, v in self.to_dict().items() if k not in ("data_dir", "out_dir")
        }
        blob = json.dumps(data, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown config fields: {unknown}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def apply_overrides(self, overrides: dict[str, str]) -> "PipelineConfig":
        """Typed field overrides (CLI ``--key value``)."""
        data = self.to_dict()
        fields = {f.name: f for f in dataclasses.fields(self)}
        for key, raw in overrides.items():
            if key not in fields:
                raise ValidationError(f"unknown config field {key!r}")
            current = data[key]
            if isinstance(current, bool):
                data[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                data[key] = int(raw)
            elif isinstance(current, float):
                data[key] = float(raw)
            else:
                data[key] = raw
        return PipelineConfig.from_dict(data)
