"""Experiment configuration: one INI file drives generation and training.

A config is a nested {section: {key: value}} dict with a fixed schema
whose defaults come straight from the component dataclasses, so the file
format can never drift from the code. Values keep the type of their
default. `resolve()` rebuilds the typed objects, which re-runs all their
validation.

The canonical serialized form feeds a sha256 fingerprint; together with
a hash of the dataset files it identifies a run well enough to cache and
to stamp into metrics and checkpoints.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import io
import os
from dataclasses import dataclass, fields

from .backbone import BackboneConfig
from .data import EXAMPLES_NAME, MANIFEST_NAME, GenConfig
from .dypa import DypaConfig
from .errors import ConfigurationError, DataError
from .sampling import AlphaSchedule
from .training import LrPolicy, TrainSettings


def _fields_of(obj):
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _schema():
    return {
        "run": {"label": "run", "seed": 0},
        "data": _fields_of(GenConfig()),
        "backbone": _fields_of(BackboneConfig()),
        "sampler": {**_fields_of(AlphaSchedule()), "repetition_k": 1},
        "heads": {"kind": "attention", "d_t": 16, "attn_heads": 2},
        "dypa": {"enabled": True, **_fields_of(DypaConfig())},
        "lr": _fields_of(LrPolicy()),
        "trainer": {
            "batch_size": 8,
            "epochs": 10,
            "weight_decay": 0.01,
            "eval_points": 10,
            "freeze_embeddings": False,
        },
    }


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(text: str, default, where: str):
    # bool first: bool is a subclass of int
    if isinstance(default, bool):
        t = text.strip().lower()
        if t in _TRUE:
            return True
        if t in _FALSE:
            return False
        raise ConfigurationError(f"{where}: {text!r} is not a boolean")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigurationError(
            f"{where}: {text!r} is not a {type(default).__name__}"
        ) from None
    return text


@dataclass
class ResolvedExperiment:
    label: str
    seed: int
    gen: GenConfig
    settings: TrainSettings


class ExperimentConfig:
    def __init__(self, values=None):
        self.values = copy.deepcopy(values) if values is not None else _schema()

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigurationError(f"config file {path} not found")
        cfg = cls()
        for section in parser.sections():
            if section not in cfg.values:
                raise ConfigurationError(f"unknown config section [{section}]")
            for key, text in parser.items(section):
                cfg._set(section, key, text)
        return cfg

    def _set(self, section: str, key: str, text: str):
        if section not in self.values:
            raise ConfigurationError(f"unknown config section [{section}]")
        if key not in self.values[section]:
            raise ConfigurationError(f"unknown config key {section}.{key}")
        where = f"{section}.{key}"
        self.values[section][key] = _coerce(text, _schema()[section][key], where)

    def apply_overrides(self, pairs) -> "ExperimentConfig":
        """pairs like ["trainer.epochs=5", "sampler.kind=linear"]; these
        win over anything read from a file."""
        for pair in pairs:
            if "=" not in pair or "." not in pair.split("=", 1)[0]:
                raise ConfigurationError(
                    f"override {pair!r} is not of the form section.key=value"
                )
            dotted, text = pair.split("=", 1)
            section, key = dotted.split(".", 1)
            self._set(section.strip(), key.strip(), text.strip())
        return self

    def to_ini(self) -> str:
        """Canonical form: fixed section and key order, repr-exact floats."""
        out = io.StringIO()
        for section, keys in self.values.items():
            out.write(f"[{section}]\n")
            for key, value in keys.items():
                out.write(f"{key} = {value}\n")
            out.write("\n")
        return out.getvalue()

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_ini())

    def fingerprint(self, dataset_dir: str | None = None) -> str:
        h = hashlib.sha256(self.to_ini().encode())
        if dataset_dir is not None:
            h.update(dataset_fingerprint(dataset_dir).encode())
        return h.hexdigest()[:16]

    def resolve(self) -> ResolvedExperiment:
        v = self.values
        gen = GenConfig(**v["data"])
        sampler = dict(v["sampler"])
        repetition_k = sampler.pop("repetition_k")
        settings = TrainSettings(
            backbone=BackboneConfig(**v["backbone"]),
            head_kind=v["heads"]["kind"],
            d_t=v["heads"]["d_t"],
            attn_heads=v["heads"]["attn_heads"],
            dypa=DypaConfig(**{k: val for k, val in v["dypa"].items()
                               if k != "enabled"})
                 if v["dypa"]["enabled"] else None,
            schedule=AlphaSchedule(**sampler),
            repetition_k=repetition_k,
            lr_policy=LrPolicy(**v["lr"]),
            batch_size=v["trainer"]["batch_size"],
            epochs=v["trainer"]["epochs"],
            weight_decay=v["trainer"]["weight_decay"],
            eval_points=v["trainer"]["eval_points"],
            freeze_embeddings=v["trainer"]["freeze_embeddings"],
            seed=v["run"]["seed"],
        )
        return ResolvedExperiment(
            label=v["run"]["label"], seed=v["run"]["seed"], gen=gen,
            settings=settings,
        )


def dataset_fingerprint(dataset_dir: str) -> str:
    """sha256 over the on-disk dataset files, hex-truncated."""
    h = hashlib.sha256()
    for name in (MANIFEST_NAME, EXAMPLES_NAME):
        path = os.path.join(dataset_dir, name)
        if not os.path.exists(path):
            raise DataError(f"dataset file missing: {path}")
        with open(path, "rb") as f:
            while chunk := f.read(1 << 20):
                h.update(chunk)
    return h.hexdigest()[:16]
