"""Experiment configuration: JSON files with unit-suffixed keys, merged over
desk-scale defaults."""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .denoiser import TrainConfig
from .errors import ValidationError
from .mbir import SolverConfig
from .physics import Geometry, parallel_geometry

DEFAULTS = {
    "paths": {
        "output_dir": "bcdnet-out",
        "model": None,  # defaults to <output_dir>/model.bcdm
        "recon_dir": "recon",  # relative to output_dir
    },
    "phantoms": {
        "size_px": 64,
        "pixel_size_mm": 4.0,
        "n_features": 6,
        "train_seeds": [0, 1, 2, 3],
        "test_seeds": [100, 101],
        "train_spec_files": [],
        "test_spec_files": [],
    },
    "physics": {
        "incident_photons": 1e4,
        "readout_variance": 25.0,
        "n_views": None,
        "n_detectors": None,
        "detector_spacing_mm": None,
        "noiseless": False,
        "seed": 1000,
    },
    "model": {"n_filters": 16, "filter_size": 9, "n_layers": 10, "beta": 1e6},
    "solver": {"iterations": 30, "variant": "apgm"},
    "training": {"epochs": 100, "batch_size": 512, "lr_filters": 1e-3,
                 "lr_thresholds": 1e-2, "lr_decay": 0.9, "decay_every": 10,
                 "seed": 0, "optimizer": "adam", "adam_beta1": 0.9,
                 "adam_beta2": 0.999, "adam_eps": 1e-8, "init_filter_scale": None,
                 "init_log_threshold": math.log(0.01)},
    "init": {"method": "fbp"},
    "evaluation": {"mu_water_per_mm": 0.02, "roi_radius_fraction": 0.8,
                   "include_mbir_baseline": True},
    "reconstruct": {"split": "test", "epsilon_probes": 4},
    "diagnostics": {"probe_count": 16, "seed": 0},
    "runtime": {"deterministic": True, "threads": 1},
}

SECTIONS = tuple(DEFAULTS)


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ValidationError(f"unknown config key {where}{k}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _parse_override(item: str):
    key, sep, raw = item.partition("=")
    if not sep or "." not in key:
        raise ValidationError(f"override {item!r} must look like section.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    section, _, name = key.partition(".")
    return {section: {name: value}}


@dataclass
class ExperimentConfig:
    paths: dict
    phantoms: dict
    physics: dict
    model: dict
    solver: dict
    training: dict
    init: dict
    evaluation: dict
    reconstruct: dict
    diagnostics: dict
    runtime: dict

    @classmethod
    def from_dict(cls, d: dict, overrides=(), env=None) -> "ExperimentConfig":
        merged = _merge(DEFAULTS, d)
        for item in overrides:
            merged = _merge(merged, _parse_override(item))
        env = os.environ if env is None else env
        if env.get("BCDNET_OUTPUT_DIR"):
            merged["paths"]["output_dir"] = env["BCDNET_OUTPUT_DIR"]
        if env.get("BCDNET_THREADS"):
            merged["runtime"]["threads"] = int(env["BCDNET_THREADS"])
        return cls(**merged)

    @classmethod
    def load(cls, path, overrides=(), env=None) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path}: {e}") from None
        cfg = cls.from_dict(d, overrides, env)
        # relative paths resolve against the config file location
        base = Path(path).resolve().parent

        def resolve(p):
            return p if p is None or Path(p).is_absolute() else str(base / p)

        cfg.paths["output_dir"] = resolve(cfg.paths["output_dir"])
        cfg.paths["model"] = resolve(cfg.paths["model"])
        for key in ("train_spec_files", "test_spec_files"):
            cfg.phantoms[key] = [resolve(p) for p in cfg.phantoms[key]]
        return cfg

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}

    @property
    def output_dir(self) -> Path:
        return Path(self.paths["output_dir"])

    @property
    def recon_dir(self) -> Path:
        return self.output_dir / self.paths["recon_dir"]

    @property
    def model_path(self) -> Path:
        return Path(self.paths["model"]) if self.paths["model"] else self.output_dir / "model.bcdm"

    def geometry(self) -> Geometry:
        ph, py = self.phantoms, self.physics
        return parallel_geometry(int(ph["size_px"]), float(ph["pixel_size_mm"]),
                                 py["n_views"], py["n_detectors"], py["detector_spacing_mm"])

    def solver_config(self) -> SolverConfig:
        return SolverConfig(int(self.solver["iterations"]), str(self.solver["variant"]))

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self.training)
        except TypeError as e:
            raise ValidationError(f"training: {e}") from None
