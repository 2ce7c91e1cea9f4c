"""Run configuration: flat INI-style sections with typed, defaulted keys.

Unknown sections or keys are rejected so typos fail loudly, and the
serialized form is canonical — parse, serialize, parse is the identity.
"""

from __future__ import annotations

import configparser
import copy
import io
from typing import Optional

# section -> key -> (type, default)
SCHEMA = {
    "run": {
        "seed": (int, 0),
        "arch": (str, "2mou"),
        "workers": (int, 1),
    },
    "data": {
        "dataset_dir": (str, ""),
        "n_tiles": (int, 8),
        "tile_size": (int, 64),
        "shots_per_tile": (int, 80),
        "violation_rate": (float, 0.2),
        "cell_size_m": (float, 7680.0),
        "min_cell_shots": (int, 600),
        "teacher_s1": (str, ""),
        "teacher_s2": (str, ""),
    },
    "model": {
        "stem_width": (int, 16),
        "input_size": (int, 256),
        "patch": (int, 16),
        "embed_dim": (int, 1536),
        "blocks": (int, 12),
        "heads": (int, 12),
        "l_hat": (int, 256),
        "taps": (str, "3,6,9,12"),
    },
    "optimizer": {
        "kind": (str, "sgd"),
        "lr": (float, 1e-2),
        "lr_adaptive": (float, 1e-5),
        "lr_start": (float, 1e-6),
        "lr_peak": (float, 1e-4),
        "warmup_epochs": (int, 20),
        "max_epochs": (int, 250),
        "batch_size": (int, 12),
    },
    "loss": {
        "delta": (float, 3.0),
        "alpha_cr": (float, 1.0),
        "betas": (str, "0.7,0.7,0.7,1.0"),
        "bin_edges": (str, "0,6,12,18,24,30,36,42,48,54,60"),
        "overlap": (float, 1.5),
        "consensus_tol": (float, 0.1),
    },
    "eval": {
        "checkpoint": (str, ""),
        "pred_dir": (str, ""),
        "range_step": (float, 5.0),
        "range_max": (float, 55.0),
    },
}

VALID_ARCHS = ("2mou", "2mdu", "a2mdu", "teacher_s1", "teacher_s2", "hytec")


class RunConfig:
    """Typed view over the schema with attribute-style section access."""

    def __init__(self, values: Optional[dict] = None):
        self._values = {s: {k: d for k, (_, d) in keys.items()}
                        for s, keys in SCHEMA.items()}
        if values:
            for s, kv in values.items():
                for k, v in kv.items():
                    self.set(s, k, v)

    def get(self, section: str, key: str):
        try:
            return self._values[section][key]
        except KeyError:
            raise KeyError(f"unknown config entry [{section}] {key}") from None

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise KeyError(f"unknown config entry [{section}] {key}")
        typ = SCHEMA[section][key][0]
        self._values[section][key] = typ(value)

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    def copy(self) -> "RunConfig":
        out = RunConfig()
        out._values = copy.deepcopy(self._values)
        return out

    # convenience typed list accessors
    def floats(self, section: str, key: str) -> list:
        return [float(v) for v in str(self.get(section, key)).split(",") if v]

    def ints(self, section: str, key: str) -> list:
        return [int(v) for v in str(self.get(section, key)).split(",") if v]

    def validate(self) -> "RunConfig":
        if self.get("run", "arch") not in VALID_ARCHS:
            raise ValueError(f"unknown arch {self.get('run', 'arch')!r}")
        if self.get("optimizer", "kind") not in ("sgd", "adamw"):
            raise ValueError("optimizer kind must be sgd or adamw")
        if self.get("run", "workers") < 1:
            raise ValueError("workers must be >= 1")
        return self


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(cfg: RunConfig) -> str:
    """Canonical INI text in schema order."""
    out = io.StringIO()
    for section in SCHEMA:
        out.write(f"[{section}]\n")
        for key in SCHEMA[section]:
            out.write(f"{key} = {_fmt(cfg.get(section, key))}\n")
        out.write("\n")
    return out.getvalue()


def parse(text: str) -> RunConfig:
    """Parse INI text, rejecting anything outside the schema."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    cfg = RunConfig()
    for section in cp.sections():
        if section not in SCHEMA:
            raise KeyError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            cfg.set(section, key, raw)
    return cfg


def load(path: str) -> RunConfig:
    with open(path) as fh:
        return parse(fh.read())


def save(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(serialize(cfg))
