"""Command-line pipeline driver.

Subcommands: simulate, mask, reconstruct, stats, report, ingest-blwt.
Every stage reads one JSON config, derives all randomness from the config
seed through addressable streams, and writes its outputs plus a
``manifest.json`` recording a sha256 per output file.  Outputs are
byte-deterministic in (config, seed); the manifest itself carries wall-clock
timestamps and is the one file excluded from that guarantee.

Exit codes: 0 success, 2 configuration error, 3 numerical/data failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bpfa, cs_baseline, lowrank, spectral_sim, stats
from .blwt import ingest_blwt
from .core import (
    STREAM_MASK,
    ConfigError,
    ExperimentConfig,
    FieldTensor,
    GridSpec,
    NumericalError,
    ObservationMask,
    dataclass_from_dict,
    grid_from_config,
    read_field,
    read_mask_csv,
    stream_rng,
    write_csv_columns,
    write_field,
    write_mask_csv,
    write_tensor,
)

_ENV_THREADS = "WFLAB_THREADS"


@dataclass
class PipelineRun:
    """Record of one pipeline stage: outputs with content hashes, event log.

    Reruns with an identical config reproduce every output hash; the event
    timestamps are wall-clock metadata.
    """

    stage: str
    config_hash: str
    seed: int
    outputs: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def log(self, message: str) -> None:
        self.events.append({"time": time.time(), "message": message})

    def record_output(self, path) -> None:
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        self.outputs.append({"name": Path(path).name, "path": str(path), "sha256": digest})

    def write_manifest(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        doc = {"stage": self.stage, "config_hash": self.config_hash, "seed": self.seed,
               "outputs": self.outputs, "events": self.events}
        path.write_text(json.dumps(doc, indent=2))
        return path


def _meta(config: ExperimentConfig, **extra) -> dict:
    meta = {"config_hash": config.config_hash(), "seed": config.seed}
    meta.update(extra)
    return meta


def _threads(value) -> int:
    if value is not None:
        return max(1, int(value))
    env = os.environ.get(_ENV_THREADS)
    return max(1, int(env)) if env else 1


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _realization_name(i: int) -> str:
    return f"realization_{i:04d}.wft"


def _load_fields(directory, grid: GridSpec, prefix: str) -> list[FieldTensor]:
    paths = sorted(Path(directory).glob(f"{prefix}_*.wft"))
    if not paths:
        raise ConfigError(f"no {prefix}_*.wft files in {directory}")
    return [read_field(p, grid) for p in paths]


# ---------------------------------------------------------------------------
# Config section builders
# ---------------------------------------------------------------------------

def spectral_from_config(cfg: ExperimentConfig) -> spectral_sim.SpectralGrid:
    return dataclass_from_dict(spectral_sim.SpectralGrid, cfg.section("spectral"), "spectral")


def davenport_from_config(cfg: ExperimentConfig) -> spectral_sim.DavenportParams:
    return dataclass_from_dict(spectral_sim.DavenportParams, cfg.section("davenport"), "davenport")


def coherence_from_config(cfg: ExperimentConfig) -> spectral_sim.CoherenceParams:
    return dataclass_from_dict(spectral_sim.CoherenceParams, cfg.section("coherence"), "coherence")


def alm_from_config(cfg: ExperimentConfig) -> lowrank.ALMParams:
    return dataclass_from_dict(lowrank.ALMParams, cfg.section("alm", required=False), "alm")


def omp_from_config(cfg: ExperimentConfig) -> cs_baseline.OMPParams:
    return dataclass_from_dict(cs_baseline.OMPParams, cfg.section("omp", required=False), "omp")


def bpfa_from_config(cfg: ExperimentConfig):
    """(hyper, partition kwargs, time_chunk) from the bpfa config section."""
    section = dict(cfg.section("bpfa", required=False))
    part = {"m_x": section.pop("m_x", 4), "m_z": section.pop("m_z", 4),
            "stride_x": section.pop("stride_x", 1), "stride_z": section.pop("stride_z", 1)}
    time_chunk = section.pop("time_chunk", None)
    if time_chunk is not None and (not isinstance(time_chunk, int) or time_chunk < 1):
        raise ConfigError("bpfa.time_chunk must be null or a positive integer")
    hyper = dataclass_from_dict(bpfa.BPFAHyperparams, section, "bpfa")
    return hyper, part, time_chunk


# ---------------------------------------------------------------------------
# Stage commands
# ---------------------------------------------------------------------------

def cmd_simulate(config: ExperimentConfig, out_dir, threads: int = 1) -> PipelineRun:
    """Generate the ensemble and write one tensor file per realization."""
    run = PipelineRun("simulate", config.config_hash(), config.seed)
    out = _out_dir(out_dir)
    grid = grid_from_config(config)
    sgrid = spectral_from_config(config)
    dav = davenport_from_config(config)
    coh = coherence_from_config(config)
    amplitudes = spectral_sim.tone_amplitudes(sgrid, dav, coh)
    run.log(f"simulating {config.ensemble_size} realizations on {grid.shape}")
    for i in range(config.ensemble_size):
        phases = spectral_sim.phase_set_for(sgrid, config.seed, i)
        values = spectral_sim.srm_field(amplitudes, sgrid, grid, phases)
        path = out / _realization_name(i)
        write_field(path, FieldTensor(grid, values))
        run.record_output(path)
    params_path = out / "params.json"
    params_path.write_text(json.dumps(
        spectral_sim.simulation_params_doc(grid, sgrid, dav, coh), indent=2, sort_keys=True))
    run.record_output(params_path)
    run.write_manifest(out)
    return run


def random_whole_history_mask(grid: GridSpec, missing_fraction: float, seed: int) -> ObservationMask:
    """Seeded uniform whole-history mask with an exact missing count."""
    if not 0.0 < missing_fraction < 1.0:
        raise ConfigError(f"missing fraction must lie strictly inside (0, 1), got {missing_fraction}")
    n_missing = int(round(missing_fraction * grid.n_points))
    if n_missing >= grid.n_points:
        raise ConfigError("missing fraction leaves no observed point")
    rng = stream_rng(seed, STREAM_MASK)
    missing = rng.choice(grid.n_points, size=n_missing, replace=False)
    observed = np.ones(grid.n_points, dtype=bool)
    observed[missing] = False
    return ObservationMask(grid, observed.reshape(grid.n_x, grid.n_z))


def mask_from_point_list(grid: GridSpec, observed_points) -> ObservationMask:
    """Mask observing exactly the listed (ix, iz) points."""
    observed = np.zeros((grid.n_x, grid.n_z), dtype=bool)
    for ix, iz in observed_points:
        if not (0 <= ix < grid.n_x and 0 <= iz < grid.n_z):
            raise ConfigError(f"point ({ix}, {iz}) outside the {grid.n_x}x{grid.n_z} grid")
        observed[ix, iz] = True
    return ObservationMask(grid, observed)


def _read_point_list(path) -> list[tuple[int, int]]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0].strip().lower() != "ix,iz":
        raise ConfigError(f"{path}: expected header 'ix,iz'")
    return [tuple(int(v) for v in line.split(",")) for line in lines[1:]]


def cmd_mask(config: ExperimentConfig, out_dir, missing_fraction: float | None = None,
             observed_file=None) -> PipelineRun:
    """Write the observation mask (random fraction or explicit point list)."""
    run = PipelineRun("mask", config.config_hash(), config.seed)
    out = _out_dir(out_dir)
    grid = grid_from_config(config)
    section = config.section("mask", required=False)
    if observed_file is not None:
        mask = mask_from_point_list(grid, _read_point_list(observed_file))
        run.log(f"mask from explicit list: {mask.n_observed_points} observed")
    else:
        fraction = missing_fraction if missing_fraction is not None else section.get("missing_fraction")
        if fraction is None:
            raise ConfigError("mask stage needs --missing-fraction, --observed-file, "
                              "or a mask.missing_fraction config entry")
        mask = random_whole_history_mask(grid, float(fraction), config.seed)
        run.log(f"random mask: {mask.n_missing_points} of {grid.n_points} points missing")
    path = out / "mask.csv"
    write_mask_csv(path, mask)
    run.record_output(path)
    run.write_manifest(out)
    return run


def _bpfa_reconstruct_one(fieldt: FieldTensor, mask: ObservationMask, hyper, part_kwargs,
                          time_chunk, seed: int, stream_index: int):
    """One realization through the Gibbs chain, optionally in time windows.

    Time chunking (contiguous windows processed as independent chains) is a
    scaling escape hatch for long records, off by default.
    """
    grid = fieldt.grid
    if time_chunk is None or time_chunk >= grid.n_t:
        partition = bpfa.make_partition(grid, **part_kwargs)
        summary = bpfa.run_chain(fieldt, mask, partition, hyper, seed, stream_index)
        traces = [(0, summary)]
        return summary.mean_field.values, summary.var_field.values, traces
    n_chunks = -(-grid.n_t // time_chunk)
    mean = np.empty(grid.shape)
    var = np.empty(grid.shape)
    traces = []
    for w in range(n_chunks):
        sl = slice(w * time_chunk, min((w + 1) * time_chunk, grid.n_t))
        sub_grid = GridSpec(grid.n_x, grid.n_z, sl.stop - sl.start, grid.dx, grid.dz, grid.dt)
        sub_field = FieldTensor(sub_grid, fieldt.values[:, :, sl])
        sub_mask = ObservationMask(sub_grid, mask.observed)
        partition = bpfa.make_partition(sub_grid, **part_kwargs)
        summary = bpfa.run_chain(sub_field, sub_mask, partition, hyper, seed,
                                 stream_index * n_chunks + w)
        mean[:, :, sl] = summary.mean_field.values
        var[:, :, sl] = summary.var_field.values
        traces.append((w, summary))
    return mean, var, traces


def cmd_reconstruct(config: ExperimentConfig, out_dir, data_dir, mask_path,
                    method: str | None = None, threads: int = 1) -> PipelineRun:
    """Reconstruct every realization in ``data_dir`` at the masked points."""
    method = method or config.method
    run = PipelineRun(f"reconstruct[{method}]", config.config_hash(), config.seed)
    out = _out_dir(out_dir)
    grid = grid_from_config(config)
    mask = read_mask_csv(mask_path, grid)
    fields = _load_fields(data_dir, grid, "realization")
    run.log(f"method={method} on {len(fields)} realizations, "
            f"{mask.n_missing_points}/{grid.n_points} points missing")

    metadata = {"method": method, "config_hash": config.config_hash(),
                "n_realizations": len(fields), "gamma_convention": bpfa.GAMMA_CONVENTION}

    if method == "alm":
        params = alm_from_config(config)
        metadata["alm"] = {"mu0": params.mu0, "rho": params.rho, "tol": params.tol,
                           "max_iter": params.max_iter}
        for i, fieldt in enumerate(fields):
            completed, details = lowrank.complete_time_series(
                fieldt, mask, params, threads=threads, return_details=True)
            rec_path = out / f"reconstruction_{i:04d}.wft"
            write_field(rec_path, completed)
            run.record_output(rec_path)
            t_idx = np.concatenate([np.full(len(d.residual_trace), it)
                                    for it, d in enumerate(details)])
            iters = np.concatenate([np.arange(1, len(d.residual_trace) + 1) for d in details])
            resid = np.concatenate([d.residual_trace for d in details])
            trace_path = out / f"residual_trace_{i:04d}.csv"
            write_csv_columns(trace_path,
                              ["time_index[-]", "iteration[-]", "residual[relative]"],
                              [t_idx.astype(int), iters.astype(int), resid],
                              _meta(config, realization=i))
            run.record_output(trace_path)
            if not all(d.converged for d in details):
                bad = [it for it, d in enumerate(details) if not d.converged]
                run.log(f"realization {i}: {len(bad)} slices did not converge (e.g. t={bad[:5]})")
    elif method == "bpfa":
        hyper, part_kwargs, time_chunk = bpfa_from_config(config)
        metadata["bpfa"] = {"a": hyper.a, "b": hyper.b, "c": hyper.c, "d": hyper.d,
                            "e": hyper.e, "f": hyper.f, "n_atoms": hyper.n_atoms,
                            "n_burnin": hyper.n_burnin, "n_samples": hyper.n_samples,
                            **part_kwargs, "time_chunk": time_chunk}
        observed3d = mask.entry_mask()
        for i, fieldt in enumerate(fields):
            mean, var, traces = _bpfa_reconstruct_one(
                fieldt, mask, hyper, part_kwargs, time_chunk, config.seed, i)
            completed = np.where(observed3d, fieldt.values, mean)
            for name, values in (("reconstruction", completed), ("posterior_mean", mean),
                                 ("posterior_variance", var)):
                path = out / f"{name}_{i:04d}.wft"
                write_tensor(path, values)
                run.record_output(path)
            window = np.concatenate([np.full(len(s.noise_precision_trace), w) for w, s in traces])
            sweeps = np.concatenate([np.arange(len(s.noise_precision_trace)) for _, s in traces])
            g_eps = np.concatenate([s.noise_precision_trace for _, s in traces])
            g_s = np.concatenate([s.weight_precision_trace for _, s in traces])
            active = np.concatenate([s.active_atoms_trace for _, s in traces])
            trace_path = out / f"chain_trace_{i:04d}.csv"
            write_csv_columns(trace_path,
                              ["window[-]", "sweep[-]", "gamma_eps[1/units^2]",
                               "gamma_s[-]", "active_atoms[count]"],
                              [window.astype(int), sweeps.astype(int), g_eps, g_s,
                               active.astype(int)],
                              _meta(config, realization=i, gamma_convention=bpfa.GAMMA_CONVENTION))
            run.record_output(trace_path)
    elif method == "omp":
        params = omp_from_config(config)
        metadata["omp"] = {"max_atoms": params.max_atoms, "residual_tol": params.residual_tol}
        for i, fieldt in enumerate(fields):
            recon = cs_baseline.cs_reconstruct(fieldt, mask, params)
            rec_path = out / f"reconstruction_{i:04d}.wft"
            write_field(rec_path, recon)
            run.record_output(rec_path)
    else:
        raise ConfigError(f"unknown method {method!r}")

    meta_path = out / "metadata.json"
    meta_path.write_text(json.dumps(metadata, indent=2, sort_keys=True))
    run.record_output(meta_path)
    run.write_manifest(out)
    return run


def _stats_points(config: ExperimentConfig, mask: ObservationMask) -> list[tuple[int, int]]:
    section = config.section("stats", required=False)
    if "points" in section:
        return [tuple(int(v) for v in pt) for pt in section["points"]]
    return mask.missing_points()[:2]


def cmd_stats(config: ExperimentConfig, out_dir, truth_dir, recon_dir, mask_path) -> PipelineRun:
    """Spectral/statistical comparison CSVs at selected missing points."""
    run = PipelineRun("stats", config.config_hash(), config.seed)
    out = _out_dir(out_dir)
    grid = grid_from_config(config)
    mask = read_mask_csv(mask_path, grid)
    truth = np.stack([f.values for f in _load_fields(truth_dir, grid, "realization")])
    recon = np.stack([f.values for f in _load_fields(recon_dir, grid, "reconstruction")])
    if truth.shape != recon.shape:
        raise ConfigError("truth and reconstruction ensembles differ in shape")
    points = _stats_points(config, mask)
    if len(points) < 2:
        raise ConfigError("stats stage needs at least two evaluation points")
    dt = grid.dt

    for ix, iz in points:
        psd_t = stats.ensemble_psd(truth[:, ix, iz, :], dt, point=(ix, iz))
        psd_r = stats.ensemble_psd(recon[:, ix, iz, :], dt, point=(ix, iz))
        path = out / f"psd_{ix}_{iz}.csv"
        write_csv_columns(path, ["omega[rad/s]", "truth[(m/s)^2 s/rad]", "recon[(m/s)^2 s/rad]"],
                          [psd_t.frequencies, psd_t.density, psd_r.density],
                          _meta(config, point=f"({ix},{iz})"))
        run.record_output(path)

        p_truth, p_rec = stats.shared_histogram_pair(truth[:, ix, iz, :], recon[:, ix, iz, :])
        centers = 0.5 * (p_truth.bin_edges[1:] + p_truth.bin_edges[:-1])
        path = out / f"pdf_{ix}_{iz}.csv"
        write_csv_columns(path, ["bin_center[units]", "truth[prob]", "recon[prob]"],
                          [centers, p_truth.probabilities, p_rec.probabilities],
                          _meta(config, point=f"({ix},{iz})"))
        run.record_output(path)

    (ax, az), (bx, bz) = points[0], points[1]
    lags, rho_t = stats.cross_correlation(truth[:, ax, az, :], truth[:, bx, bz, :])
    _, rho_r = stats.cross_correlation(recon[:, ax, az, :], recon[:, bx, bz, :])
    path = out / "correlation.csv"
    write_csv_columns(path, ["lag[samples]", "truth[rho]", "recon[rho]"],
                      [lags, rho_t, rho_r],
                      _meta(config, pair=f"({ax},{az})-({bx},{bz})"))
    run.record_output(path)

    freqs, coh_t = stats.cross_coherence(truth[:, ax, az, :], truth[:, bx, bz, :], dt)
    _, coh_r = stats.cross_coherence(recon[:, ax, az, :], recon[:, bx, bz, :], dt)
    path = out / "coherence.csv"
    write_csv_columns(path, ["omega[rad/s]", "truth[coh^2]", "recon[coh^2]"],
                      [freqs, coh_t, coh_r],
                      _meta(config, pair=f"({ax},{az})-({bx},{bz})"))
    run.record_output(path)
    stats.write_gnuplot_script(out / "psd.gp", out / f"psd_{points[0][0]}_{points[0][1]}.csv")
    run.record_output(out / "psd.gp")
    run.write_manifest(out)
    return run


def cmd_report(config: ExperimentConfig, out_dir, truth_dir, recon_dir, mask_path,
               variance_dir=None) -> PipelineRun:
    """Error-map / Hellinger / error-vs-variance CSV bundle over missing points."""
    run = PipelineRun("report", config.config_hash(), config.seed)
    out = _out_dir(out_dir)
    grid = grid_from_config(config)
    mask = read_mask_csv(mask_path, grid)
    truth = np.stack([f.values for f in _load_fields(truth_dir, grid, "realization")])
    recon = np.stack([f.values for f in _load_fields(recon_dir, grid, "reconstruction")])
    variance = None
    if variance_dir is not None:
        var_paths = sorted(Path(variance_dir).glob("posterior_variance_*.wft"))
        if var_paths:
            variance = np.stack([read_field(p, grid).values for p in var_paths])
    report = stats.error_report(truth, recon, variance, mask)

    ix = np.array([p[0] for p in report.points])
    iz = np.array([p[1] for p in report.points])
    path = out / "error_map.csv"
    names = ["ix[-]", "iz[-]", "l1_error[units]", "hellinger[-]"]
    cols = [ix, iz, report.l1_error, report.hellinger]
    if report.posterior_variance is not None:
        names.append("posterior_variance[units^2]")
        cols.append(report.posterior_variance)
    write_csv_columns(path, names, cols, _meta(config))
    run.record_output(path)

    if report.posterior_variance is not None:
        path = out / "error_vs_variance.csv"
        write_csv_columns(path, ["l1_error[units]", "posterior_variance[units^2]"],
                          [report.l1_error, report.posterior_variance],
                          _meta(config, spearman=report.spearman))
        run.record_output(path)

    summary = {"config_hash": config.config_hash(),
               "median_l1_error": float(np.median(report.l1_error)),
               "median_hellinger": float(np.median(report.hellinger)),
               "spearman_error_vs_variance": report.spearman}
    path = out / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    run.record_output(path)
    run.write_manifest(out)
    return run


def cmd_ingest_blwt(face_files, layout_path, out_path) -> PipelineRun:
    """Assemble four per-face recordings into one tensor file."""
    run = PipelineRun("ingest-blwt", "-", 0)
    fieldt = ingest_blwt(face_files, layout_path)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_field(out_path, fieldt)
    run.record_output(out_path)
    run.log(f"assembled {fieldt.grid.shape} tensor from 4 faces")
    run.write_manifest(out_path.parent)
    return run


# ---------------------------------------------------------------------------
# argparse wiring
# ---------------------------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config = ExperimentConfig(seed=args.seed, ensemble_size=config.ensemble_size,
                                  method=config.method, sections=config.sections)
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wflab",
                                     description="wind field simulation / sparse reconstruction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (default: ${_ENV_THREADS} or 1)")

    p = sub.add_parser("simulate", help="generate the stochastic-wave ensemble")
    common(p)

    p = sub.add_parser("mask", help="generate or transcribe the observation mask")
    common(p)
    p.add_argument("--missing-fraction", type=float, default=None)
    p.add_argument("--observed-file", default=None, help="CSV of observed points (header ix,iz)")

    p = sub.add_parser("reconstruct", help="fill missing records (alm | bpfa | omp)")
    common(p)
    p.add_argument("--data", required=True, help="directory with realization_*.wft")
    p.add_argument("--mask", required=True, help="mask CSV path")
    p.add_argument("--method", choices=("alm", "bpfa", "omp"), default=None)

    p = sub.add_parser("stats", help="spectral/statistical comparison CSVs")
    common(p)
    p.add_argument("--truth", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--mask", required=True)

    p = sub.add_parser("report", help="error and uncertainty CSV bundle")
    common(p)
    p.add_argument("--truth", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--variance", default=None, help="directory with posterior_variance_*.wft")

    p = sub.add_parser("ingest-blwt", help="assemble four face recordings into one tensor")
    p.add_argument("--faces", nargs=4, required=True)
    p.add_argument("--layout", required=True)
    p.add_argument("--out", required=True, help="output .wft path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            cmd_simulate(_load_config(args), args.out, threads=_threads(args.threads))
        elif args.command == "mask":
            cmd_mask(_load_config(args), args.out, missing_fraction=args.missing_fraction,
                     observed_file=args.observed_file)
        elif args.command == "reconstruct":
            cmd_reconstruct(_load_config(args), args.out, args.data, args.mask,
                            method=args.method, threads=_threads(args.threads))
        elif args.command == "stats":
            cmd_stats(_load_config(args), args.out, args.truth, args.recon, args.mask)
        elif args.command == "report":
            cmd_report(_load_config(args), args.out, args.truth, args.recon, args.mask,
                       variance_dir=args.variance)
        elif args.command == "ingest-blwt":
            cmd_ingest_blwt(args.faces, args.layout, args.out)
        else:  # pragma: no cover
            raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"wflab: config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, NumericalError, OSError) as exc:
        print(f"wflab: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
