"""Command-line driver: ``bcdnet <subcommand> <config.json>``.

Exit codes: 0 success, 1 validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .config import ExperimentConfig
from .errors import FormatError, ValidationError
from .evaluation import PhantomSpec, central_disc_roi, generate_phantom, random_phantom_spec, rmse_hu
from .physics import simulate_measurements
from .pipeline import (
    TrainingSet,
    check_convergence_preconditions,
    init_image,
    reconstruct,
    train_bcdnet,
    zero_denoiser_model,
)

logger = logging.getLogger("bcdnet")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class DescentFailure(Exception):
    pass


def _manifest_path(cfg) -> Path:
    return cfg.output_dir / "phantoms" / "manifest.json"


def _load_manifest(cfg) -> list:
    path = _manifest_path(cfg)
    with open(path) as fh:
        return json.load(fh)["images"]


def _sino_dir(cfg) -> Path:
    return cfg.output_dir / "sinograms"


def _load_measurements(cfg, entry):
    d = _sino_dir(cfg)
    return (io.read_array(d / f"{entry['name']}.sino.bcdn"),
            io.read_array(d / f"{entry['name']}.weights.bcdn"))


def _truth(cfg, entry):
    return io.read_array(cfg.output_dir / entry["file"])


def _roi(cfg, geom):
    return central_disc_roi(geom.image_shape, float(cfg.evaluation["roi_radius_fraction"]))


def cmd_phantom(cfg: ExperimentConfig) -> None:
    """Write train/test phantoms (BCDN) and a manifest."""
    ph = cfg.phantoms
    entries = []
    for split in ("train", "test"):
        specs = []
        for seed in ph[f"{split}_seeds"]:
            specs.append((int(seed), None, random_phantom_spec(
                int(seed), int(ph["size_px"]), float(ph["pixel_size_mm"]), int(ph["n_features"]))))
        for f in ph[f"{split}_spec_files"]:
            with open(f) as fh:
                specs.append((None, str(f), PhantomSpec.from_dict(json.load(fh))))
        for i, (seed, src, spec) in enumerate(specs):
            entries.append({"name": f"{split}_{i:03d}", "split": split, "seed": seed,
                            "spec_file": src, "spec": spec.to_dict()})
    if not entries:
        raise ValidationError("no phantoms requested (empty seed and spec lists)")
    train_seeds = set(ph["train_seeds"])
    if train_seeds & set(ph["test_seeds"]):
        raise ValidationError("train and test phantom seeds must be disjoint")

    out = cfg.output_dir / "phantoms"
    out.mkdir(parents=True, exist_ok=True)
    for e in entries:
        e["file"] = f"phantoms/{e['name']}.bcdn"
        io.write_array(cfg.output_dir / e["file"], generate_phantom(PhantomSpec.from_dict(e["spec"])))
    with open(_manifest_path(cfg), "w") as fh:
        json.dump({"images": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    logger.info("wrote %d phantoms to %s", len(entries), out)


def cmd_simulate(cfg: ExperimentConfig) -> None:
    """Simulate sinogram, pre-log counts and weights for every phantom."""
    py = cfg.physics
    geom = cfg.geometry()
    out = _sino_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    io.write_geometry(out / "geometry.json", geom)
    # reload so every later command uses exactly the on-disk geometry
    geom = io.read_geometry(out / "geometry.json")
    for i, entry in enumerate(_load_manifest(cfg)):
        truth = _truth(cfg, entry)
        meas = simulate_measurements(truth, geom, float(py["incident_photons"]),
                                     float(py["readout_variance"]), seed=int(py["seed"]) + i,
                                     noiseless=bool(py["noiseless"]))
        io.write_array(out / f"{entry['name']}.sino.bcdn", meas.sinogram)
        io.write_array(out / f"{entry['name']}.counts.bcdn", meas.counts)
        io.write_array(out / f"{entry['name']}.weights.bcdn", meas.weights)
    logger.info("simulated measurements in %s", out)


def _geometry(cfg):
    return io.read_geometry(_sino_dir(cfg) / "geometry.json")


def cmd_train(cfg: ExperimentConfig) -> None:
    """Train a model on the train split; write the model and a loss CSV."""
    geom = _geometry(cfg)
    entries = [e for e in _load_manifest(cfg) if e["split"] == "train"]
    if not entries:
        raise ValidationError("manifest has no training images")
    truths, sinos, weights, inits = [], [], [], []
    for e in entries:
        y, w = _load_measurements(cfg, e)
        truths.append(_truth(cfg, e))
        sinos.append(y)
        weights.append(w)
        inits.append(init_image(y, geom, cfg.init["method"], w))
    ts = TrainingSet(truths, sinos, weights, inits, geom)
    m = cfg.model
    model, logs = train_bcdnet(
        ts, float(m["beta"]), cfg.solver_config(), cfg.train_config(), int(m["n_layers"]),
        int(m["n_filters"]), int(m["filter_size"]), roi=_roi(cfg, geom),
        mu_water=float(cfg.evaluation["mu_water_per_mm"]))
    cfg.model_path.parent.mkdir(parents=True, exist_ok=True)
    io.save_model(cfg.model_path, model)
    with open(cfg.output_dir / "train_losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "initial_loss", "final_loss", "zero_map_loss", "mean_rmse_hu"])
        for lg in logs:
            w.writerow([lg.layer, repr(lg.initial_loss), repr(lg.final_loss),
                        repr(lg.zero_map_loss), repr(lg.mean_rmse_hu)])
    bad = [lg.layer for lg in logs if not lg.descended]
    if bad:
        raise DescentFailure(f"training loss increased on layers {bad}")


def _recon_entries(cfg):
    split = cfg.reconstruct["split"]
    entries = [e for e in _load_manifest(cfg) if split == "all" or e["split"] == split]
    if not entries:
        raise ValidationError(f"manifest has no images in split {split!r}")
    return entries


def cmd_reconstruct(cfg: ExperimentConfig) -> None:
    """Reconstruct every image of the configured split with the saved model."""
    geom = _geometry(cfg)
    model = io.load_model(cfg.model_path, cfg.solver_config())
    out = cfg.recon_dir
    out.mkdir(parents=True, exist_ok=True)
    mu_water = float(cfg.evaluation["mu_water_per_mm"])
    deterministic = bool(cfg.runtime["deterministic"])
    for e in _recon_entries(cfg):
        y, w = _load_measurements(cfg, e)
        x0 = init_image(y, geom, cfg.init["method"], w)
        truth_path = cfg.output_dir / e["file"]
        truth = io.read_array(truth_path) if truth_path.exists() else None
        x, trace = reconstruct(y, w, geom, model, x0, truth=truth, roi=_roi(cfg, geom),
                               mu_water=mu_water,
                               epsilon_probes=int(cfg.reconstruct["epsilon_probes"]))
        io.write_array(out / f"{e['name']}.x0.bcdn", x0)
        io.write_array(out / f"{e['name']}.recon.bcdn", x)
        trace.write_csv(out / f"{e['name']}.trace.csv", include_seconds=not deterministic)
        logger.info("%s: %d layers, final objective %.6g", e["name"], len(trace),
                    trace.records[-1].objective)


def cmd_evaluate(cfg: ExperimentConfig) -> None:
    """Per-image RMSE (HU) of the initial image and the BCD-Net output.

    A plain-MBIR baseline (zero denoiser, same beta and iterations) is added
    when ``evaluation.include_mbir_baseline`` is set."""
    geom = _geometry(cfg)
    mu_water = float(cfg.evaluation["mu_water_per_mm"])
    roi = _roi(cfg, geom)
    recon_dir = cfg.recon_dir
    baseline = None
    if cfg.evaluation["include_mbir_baseline"]:
        model = io.load_model(cfg.model_path, cfg.solver_config())
        baseline = zero_denoiser_model(model.n_layers, model.beta, model.solver)
    rows = []
    for e in _recon_entries(cfg):
        truth = _truth(cfg, e)
        x0 = io.read_array(recon_dir / f"{e['name']}.x0.bcdn")
        x = io.read_array(recon_dir / f"{e['name']}.recon.bcdn")
        rows.append((e["name"], cfg.init["method"], rmse_hu(x0, truth, roi, mu_water)))
        rows.append((e["name"], "bcdnet", rmse_hu(x, truth, roi, mu_water)))
        if baseline is not None:
            y, w = _load_measurements(cfg, e)
            xm, _ = reconstruct(y, w, geom, baseline, x0, epsilon_probes=0)
            rows.append((e["name"], "mbir", rmse_hu(xm, truth, roi, mu_water)))
    with open(recon_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "method", "rmse_hu"])
        for name, method, val in rows:
            w.writerow([name, method, repr(float(val))])


def cmd_diagnose(cfg: ExperimentConfig) -> None:
    """Convergence-precondition report for the saved model."""
    geom = _geometry(cfg)
    model = io.load_model(cfg.model_path, cfg.solver_config())
    entries = _load_manifest(cfg)
    _, w = _load_measurements(cfg, entries[0])
    samples = [_truth(cfg, e) for e in entries[:4]]
    scale = 0.1 * (float(np.std(np.stack(samples))) or 1.0)
    d = cfg.diagnostics
    report = check_convergence_preconditions(model, geom, w, int(d["probe_count"]),
                                             int(d["seed"]), samples, scale)
    report.write_csv(cfg.output_dir / "diagnostics.csv")
    logger.info("preconditions ok: %s", report.ok)


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bcdnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("config", help="experiment config (JSON)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (JSON-parsed)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, args.set)
        threads = 1 if cfg.runtime["deterministic"] else int(cfg.runtime["threads"])
        with threadpool_limits(limits=threads):
            COMMANDS[args.command](cfg)
    except (ValidationError, DescentFailure) as e:
        print(f"bcdnet {args.command}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, FormatError, KeyError, json.JSONDecodeError) as e:
        print(f"bcdnet {args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
