"""Application configuration: one JSON file covering ingest, model, and clients.

Relative paths inside the file resolve against the file's own directory.
Unknown keys are rejected so typos surface instead of silently using defaults.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .encoder import Vocab
from .tokenizer import Mu2Config, Mu2Model


@dataclass
class VolumeSettings:
    frames: int = 2
    slices_per_frame: int = 2
    height: int = 4
    width: int = 4
    noise_sigma: float = 0.0

    def __post_init__(self):
        for name in ("frames", "slices_per_frame", "height", "width"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"volume.{name} must be a positive integer, got {value!r}")
        if self.noise_sigma < 0:
            raise ValueError(f"volume.noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class EncoderSettings:
    patch: tuple[int, int, int] = (2, 2, 2)
    n_text_positions: int = 8
    vocab_path: str | None = None

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ValueError(f"encoder.patch must be three positive integers, got {self.patch}")
        if not isinstance(self.n_text_positions, int) or self.n_text_positions < 1:
            raise ValueError(
                f"encoder.n_text_positions must be a positive integer, got {self.n_text_positions!r}"
            )


@dataclass
class ClientSettings:
    kind: str = "mock"
    base_url: str | None = None
    model: str | None = None
    timeout: float = 30.0
    retries: int = 3
    backoff_base: float = 1.0
    temperature: float = 0.0
    auth_env: str = "MU2_API_TOKEN"

    def __post_init__(self):
        if self.kind not in ("mock", "http", "replay"):
            raise ValueError(f"client.kind must be mock, http, or replay, got {self.kind!r}")
        if self.retries < 0:
            raise ValueError(f"client.retries must be >= 0, got {self.retries}")
        if self.timeout <= 0:
            raise ValueError(f"client.timeout must be > 0, got {self.timeout}")


@dataclass
class AppConfig:
    seed: int = 0
    volume: VolumeSettings = field(default_factory=VolumeSettings)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    model: Mu2Config = field(default_factory=Mu2Config)
    dpo_beta: float = 0.3
    n_candidates: int = 8
    max_inflight: int = 1
    client: ClientSettings = field(default_factory=ClientSettings)

    def __post_init__(self):
        if not isinstance(self.seed, int):
            raise ValueError(f"seed must be an integer, got {self.seed!r}")
        if not isinstance(self.n_candidates, int) or self.n_candidates < 2:
            raise ValueError(f"n_candidates must be an integer >= 2, got {self.n_candidates!r}")
        if not isinstance(self.max_inflight, int) or self.max_inflight < 1:
            raise ValueError(f"max_inflight must be a positive integer, got {self.max_inflight!r}")


def _take(section: dict, context: str, cls, **renames):
    if not isinstance(section, dict):
        raise ValueError(f"config section {context!r} must be an object")
    known = set(cls.__dataclass_fields__)
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"unknown config key {context}.{sorted(unknown)[0]}")
    try:
        return cls(**section)
    except TypeError as err:
        raise ValueError(f"bad config section {context!r}: {err}") from err


def load_config(path) -> AppConfig:
    with open(path, encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as err:
            raise ValueError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ValueError("config root must be a JSON object")
    base = os.path.dirname(os.path.abspath(path))
    known_top = {"seed", "volume", "encoder", "model", "dpo", "prefs", "client", "max_inflight"}
    unknown = set(raw) - known_top
    if unknown:
        raise ValueError(f"unknown config key {sorted(unknown)[0]}")

    volume = _take(raw.get("volume", {}), "volume", VolumeSettings)
    encoder = _take(raw.get("encoder", {}), "encoder", EncoderSettings)
    model = _take(raw.get("model", {}), "model", Mu2Config)
    client = _take(raw.get("client", {}), "client", ClientSettings)

    dpo = raw.get("dpo", {})
    if not isinstance(dpo, dict) or set(dpo) - {"beta"}:
        raise ValueError("config section 'dpo' accepts only the key 'beta'")
    prefs = raw.get("prefs", {})
    if not isinstance(prefs, dict) or set(prefs) - {"n_candidates"}:
        raise ValueError("config section 'prefs' accepts only the key 'n_candidates'")

    if encoder.vocab_path is not None and not os.path.isabs(encoder.vocab_path):
        encoder.vocab_path = os.path.join(base, encoder.vocab_path)

    return AppConfig(
        seed=raw.get("seed", 0),
        volume=volume,
        encoder=encoder,
        model=model,
        dpo_beta=float(dpo.get("beta", 0.3)),
        n_candidates=prefs.get("n_candidates", 8),
        max_inflight=raw.get("max_inflight", 1),
        client=client,
    )


def build_model(cfg: AppConfig, dtype=None) -> Mu2Model:
    """Construct the model described by the config, seeded from cfg.seed."""
    if cfg.encoder.vocab_path is None:
        raise ValueError("encoder.vocab_path is not set")
    vocab = Vocab.load(cfg.encoder.vocab_path)
    model = Mu2Model(cfg.model, cfg.encoder.patch, cfg.encoder.n_text_positions,
                     vocab, seed=cfg.seed)
    if dtype is not None:
        model = model.to(dtype)
    return model
