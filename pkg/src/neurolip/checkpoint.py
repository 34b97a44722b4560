"""Plain-text checkpoint container.

Layout (one item per line, UTF-8)::

    neurolip-checkpoint 1
    config <json object, sorted keys>
    meta <json object, sorted keys>
    step <int>
    rng <json object>
    tensor <group> <name> <dims joined by 'x', or 'scalar'>
    <values, space separated, 17 significant digits>
    ...
    end

``group`` is ``param``, ``adam_m`` or ``adam_v``. Tensors are written in registry
order, so save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .trainer import AdamState, NeuroLIP, TrainConfig, TrainResult

MAGIC = "neurolip-checkpoint 1"
GROUPS = ("param", "adam_m", "adam_v")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict
    config: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_result(cls, res: TrainResult, meta: dict | None = None) -> "Checkpoint":
        names = res.model.graph.names()
        return cls(params=res.model.graph.state(), config=res.config.to_dict(),
                   adam_m={k: res.opt.m[k].copy() for k in names if k in res.opt.m},
                   adam_v={k: res.opt.v[k].copy() for k in names if k in res.opt.v},
                   step=res.opt.step, rng_state=res.rng_state, meta=dict(meta or {}))

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def model(self) -> NeuroLIP:
        model = NeuroLIP(self.train_config().encoder)
        model.graph.load_state(self.params)
        return model

    def optimizer(self) -> AdamState:
        return AdamState({k: v.copy() for k, v in self.adam_m.items()},
                         {k: v.copy() for k, v in self.adam_v.items()}, self.step)


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _fmt_values(a: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in np.ravel(a))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    lines = [MAGIC, "config " + _dump_json(ckpt.config), "meta " + _dump_json(ckpt.meta),
             f"step {int(ckpt.step)}", "rng " + _dump_json(ckpt.rng_state)]
    for group, tensors in zip(GROUPS, (ckpt.params, ckpt.adam_m, ckpt.adam_v)):
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            dims = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
            lines.append(f"tensor {group} {name} {dims}")
            lines.append(_fmt_values(arr))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        lines = path.read_text().split("\n")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad header)")

    def field_line(k: int, key: str) -> str:
        if not lines[k].startswith(key + " "):
            raise CheckpointError(f"{path}:{k + 1}: expected '{key}'")
        return lines[k][len(key) + 1:]

    config = json.loads(field_line(1, "config"))
    meta = json.loads(field_line(2, "meta"))
    step = int(field_line(3, "step"))
    rng_state = json.loads(field_line(4, "rng"))
    groups = {g: {} for g in GROUPS}
    k = 5
    while k < len(lines) and lines[k] != "end":
        head = lines[k].split(" ")
        if len(head) != 4 or head[0] != "tensor" or head[1] not in groups:
            raise CheckpointError(f"{path}:{k + 1}: malformed tensor header")
        _, group, name, dims = head
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        try:
            vals = np.array([float(v) for v in lines[k + 1].split(" ")] if lines[k + 1] else [])
        except (IndexError, ValueError):
            raise CheckpointError(f"{path}:{k + 2}: bad values for {name}") from None
        if vals.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}:{k + 2}: {name} has {vals.size} values, shape {shape}")
        groups[group][name] = vals.reshape(shape)
        k += 2
    if k >= len(lines):
        raise CheckpointError(f"{path}: truncated (no 'end' line)")
    return Checkpoint(groups["param"], config, groups["adam_m"], groups["adam_v"], step,
                      rng_state, meta)
