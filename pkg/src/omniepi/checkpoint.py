"""Checkpoint files: a text header followed by named OEPT tensors.

Layout::

    OMNIEPI-CKPT 1
    model.<key>=<value>        (canonical, key-sorted)
    train.<key>=<value>        (optional)
    state.<key>=<value>        (step, epoch, ...)
    ---
    then per tensor: u16 little-endian name length, utf-8 name, OEPT blob

Tensor names are grouped by prefix: ``param/``, ``ema/``, ``adam_m/``, ``adam_v/``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgio
from .autodiff import oept
from .errors import CheckpointError, ConfigError
from .model import ModelConfig

MAGIC = "OMNIEPI-CKPT 1"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None = None
    step: int = 0
    train_config: object | None = None
    state: dict[str, str] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] | None = None
    adam_v: dict[str, np.ndarray] | None = None

    def check_against(self, expected: dict[str, tuple[int, ...]]) -> None:
        """Every config-implied parameter present exactly once with the right shape."""
        for group in (self.params, self.ema):
            if group is None:
                continue
            missing = sorted(set(expected) - set(group))
            extra = sorted(set(group) - set(expected))
            if missing or extra:
                raise CheckpointError(f"checkpoint/config mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
            for k, shape in expected.items():
                if group[k].shape != tuple(shape):
                    raise CheckpointError(f"{k}: shape {group[k].shape} != expected {tuple(shape)}")


def _header(ck: Checkpoint) -> str:
    lines = [MAGIC]
    lines += [f"model.{ln}" for ln in cfgio.to_text(ck.model_config).splitlines()]
    if ck.train_config is not None:
        lines += [f"train.{ln}" for ln in cfgio.to_text(ck.train_config).splitlines()]
    state = dict(ck.state, step=str(ck.step))
    lines += [f"state.{k}={v}" for k, v in sorted(state.items())]
    lines.append("---")
    return "\n".join(lines) + "\n"


def save(path, ck: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    groups = [("param", ck.params), ("ema", ck.ema), ("adam_m", ck.adam_m), ("adam_v", ck.adam_v)]
    with open(tmp, "wb") as fh:
        fh.write(_header(ck).encode())
        for prefix, tensors in groups:
            for name in sorted(tensors or {}):
                key = f"{prefix}/{name}".encode()
                fh.write(struct.pack("<H", len(key)) + key)
                oept.write_tensor(fh, tensors[name])
    tmp.replace(path)     # a crash mid-write never clobbers the previous file


def load(path, train_config_type=None) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.readline().decode().strip() != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        sections: dict[str, dict[str, str]] = {"model": {}, "train": {}, "state": {}}
        while True:
            line = fh.readline()
            if not line:
                raise CheckpointError(f"{path}: truncated header")
            line = line.decode().rstrip("\n")
            if line == "---":
                break
            head, _, rest = line.partition(".")
            key, _, value = rest.partition("=")
            if head not in sections:
                raise CheckpointError(f"{path}: unexpected header line {line!r}")
            sections[head][key] = value
        groups: dict[str, dict[str, np.ndarray]] = {}
        while True:
            raw = fh.read(2)
            if not raw:
                break
            (n,) = struct.unpack("<H", raw)
            prefix, _, name = fh.read(n).decode().partition("/")
            groups.setdefault(prefix, {})[name] = oept.read_tensor(fh)
    try:
        model_cfg = cfgio.apply_overrides(ModelConfig(), sections["model"])
        train_cfg = None
        if train_config_type is not None and sections["train"]:
            train_cfg = cfgio.apply_overrides(train_config_type(), sections["train"])
    except ConfigError as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from None
    state = sections["state"]
    return Checkpoint(model_cfg, groups.get("param", {}), groups.get("ema"), int(state.pop("step", 0)),
                      train_cfg, state, groups.get("adam_m"), groups.get("adam_v"))
