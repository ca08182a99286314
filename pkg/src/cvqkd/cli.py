"""Command-line front end.

Every subcommand reads an optional JSON config (``--config``), applies flag
overrides, validates the merged tree, writes its results and the resolved
config (``config.json``) to ``--out`` and prints a one-line summary.

Exit codes: 0 success, 2 configuration error, 3 runtime or estimation failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import os
import secrets
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import __version__
from .dsp import (
    FrameLayout,
    add_vacuum_noise,
    apply_phase_noise,
    delay,
    evm,
    receive,
    shape_and_mux,
    write_waveform_bin,
)
from .errors import ConfigError, DomainError, EstimationError, PrecisionError, SyncError
from .keyrate import (
    ChannelParams,
    DetectorParams,
    FiniteSizeParams,
    ProtocolSpec,
    evaluate_rate,
    fiber_transmittance,
    finite_size_rate,
    optimize_modulation_variance,
    rate_distance_curve,
)
from .network import PtmpConfig, network_rate_table, write_network_csv
from .postprocess import amplify, distill, export_key, final_key_length, regular_ldpc
from .simulate import (
    ModulationFormat,
    SimulationConfig,
    end_to_end_run,
    estimate_parameters,
    modulate,
    physical_projection,
    sift_pairs,
    simulate_measurements,
    write_samples_csv,
)

RANDOMIZED = {"simulate", "dsp-loopback", "postprocess"}

DEFAULTS: dict = {
    "protocol": {
        "state": "coherent",
        "measurement": "heterodyne",
        "reconciliation": "reverse",
        "vm": 4.0,
        "beta": 0.95,
    },
    "channel": {"T": None, "eps": 0.0, "xi": None, "distance_km": None, "alpha": 0.2},
    "detector": {"eta": 1.0, "nu_ele": 0.0, "trust": "trusted", "calibration": "two_time"},
    "finite_size": {"N": None, "pe_fraction": 0.5, "eps_pe": 1e-10, "eps_bar": 1e-10, "eps_pa": 1e-10},
    "optimize": {"vm_min": 1e-3, "vm_max": 1e3},
    "curve": {"distances": "0:10:100", "optimize": False},
    "simulation": {"n_symbols": 1_000_000, "calibration_samples": 10_000_000, "write_samples": False},
    "dsp": {
        "payload_symbols": 4096,
        "offset": 500,
        "phase_deg": 60.0,
        "freq_offset_hz": 0.0,
        "linewidth_ratio": 0.0,
        "noise": False,
        "write_waveform": False,
    },
    "network": {"n_users": 8, "drop_km": [], "splitter": "ideal"},
    "postprocess": {"md_dim": 8, "ldpc_n": 2048, "max_iters": 50},
    "seed": None,
    "threads": None,
    "symbol_rate": None,
}


# ---------------------------------------------------------------------------
# validation


def _number(lo=None, hi=None, lo_open=False, hi_open=False, optional=False, integer=False):
    def check(v):
        if v is None:
            if optional:
                return
            raise ValueError("is required")
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ValueError(f"must be a finite number, got {v!r}")
        if integer and int(v) != v:
            raise ValueError(f"must be an integer, got {v!r}")
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ValueError(f"must be {'>' if lo_open else '>='} {lo}, got {v!r}")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            raise ValueError(f"must be {'<' if hi_open else '<='} {hi}, got {v!r}")

    return check


def _choice(*options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(map(str, options))}; got {v!r}")

    return check


def _boolean(v):
    if not isinstance(v, bool):
        raise ValueError(f"must be true or false, got {v!r}")


def _range_spec(v):
    parse_range(v)


def _splitter(v):
    if v == "ideal":
        return
    if not isinstance(v, list) or not all(isinstance(t, (int, float)) for t in v):
        raise ValueError("must be 'ideal' or a list of port transmittances")


def _float_list(v):
    if not isinstance(v, list) or not all(isinstance(t, (int, float)) and t >= 0 for t in v):
        raise ValueError("must be a list of non-negative numbers")


FIELDS: dict[str, Callable[[Any], None]] = {
    "protocol.state": _choice("coherent", "squeezed"),
    "protocol.measurement": _choice("homodyne", "heterodyne"),
    "protocol.reconciliation": _choice("direct", "reverse"),
    "protocol.vm": _number(lo=0),
    "protocol.beta": _number(lo=0, hi=1, lo_open=True),
    "channel.T": _number(lo=0, hi=1, lo_open=True, optional=True),
    "channel.eps": _number(lo=0),
    "channel.xi": _number(lo=0, optional=True),
    "channel.distance_km": _number(lo=0, optional=True),
    "channel.alpha": _number(lo=0, lo_open=True),
    "detector.eta": _number(lo=0, hi=1, lo_open=True),
    "detector.nu_ele": _number(lo=0),
    "detector.trust": _choice("trusted", "untrusted"),
    "detector.calibration": _choice("two_time", "one_time"),
    "finite_size.N": _number(lo=1, optional=True),
    "finite_size.pe_fraction": _number(lo=0, hi=1, lo_open=True, hi_open=True),
    "finite_size.eps_pe": _number(lo=0, hi=1, lo_open=True, hi_open=True),
    "finite_size.eps_bar": _number(lo=0, hi=1, lo_open=True, hi_open=True),
    "finite_size.eps_pa": _number(lo=0, hi=1, lo_open=True, hi_open=True),
    "optimize.vm_min": _number(lo=0, lo_open=True),
    "optimize.vm_max": _number(lo=0, lo_open=True),
    "curve.distances": _range_spec,
    "curve.optimize": _boolean,
    "simulation.n_symbols": _number(lo=2, integer=True),
    "simulation.calibration_samples": _number(lo=1, integer=True),
    "simulation.write_samples": _boolean,
    "dsp.payload_symbols": _number(lo=1, integer=True),
    "dsp.offset": _number(lo=0, integer=True),
    "dsp.phase_deg": _number(),
    "dsp.freq_offset_hz": _number(),
    "dsp.linewidth_ratio": _number(lo=0),
    "dsp.noise": _boolean,
    "dsp.write_waveform": _boolean,
    "network.n_users": _number(lo=1, integer=True),
    "network.drop_km": _float_list,
    "network.splitter": _splitter,
    "postprocess.md_dim": _choice(2, 4, 8),
    "postprocess.ldpc_n": _number(lo=6, integer=True),
    "postprocess.max_iters": _number(lo=1, integer=True),
    "seed": _number(lo=0, hi=2**63 - 1, integer=True, optional=True),
    "threads": _number(lo=1, integer=True, optional=True),
    "symbol_rate": _number(lo=0, lo_open=True, optional=True),
}


def _walk(tree: dict, prefix: str = ""):
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _walk(value, path + ".")
        else:
            yield path, value


def _set(tree: dict, path: str, value) -> None:
    *parents, leaf = path.split(".")
    node = tree
    for part in parents:
        node = node[part]
    node[leaf] = value


def _merge(base: dict, override: dict, prefix: str = "") -> None:
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"{path}: unknown field")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: must be an object")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def validate(tree: dict) -> dict:
    """Check every field against its bounds; errors name the field path."""
    for path, value in _walk(tree):
        try:
            FIELDS[path](value)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if tree["optimize"]["vm_min"] >= tree["optimize"]["vm_max"]:
        raise ConfigError("optimize.vm_min: must be below optimize.vm_max")
    return tree


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    """Defaults, then the JSON file at ``path``, then flag ``overrides`` (dotted paths)."""
    tree = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(tree, data)
    for dotted, value in (overrides or {}).items():
        _set(tree, dotted, value)
    return validate(tree)


def parse_range(spec: str) -> np.ndarray:
    """``start:step:stop`` with both ends included."""
    try:
        start, step, stop = (float(s) for s in str(spec).split(":"))
    except ValueError:
        raise ValueError(f"must look like start:step:stop, got {spec!r}") from None
    if step <= 0 or stop < start:
        raise ValueError(f"needs step > 0 and stop >= start, got {spec!r}")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(n)


# ---------------------------------------------------------------------------
# config -> domain objects


def build_spec(cfg: dict) -> ProtocolSpec:
    p = cfg["protocol"]
    return ProtocolSpec(p["state"], p["measurement"], p["reconciliation"], float(p["vm"]), float(p["beta"]))


def build_detector(cfg: dict) -> DetectorParams:
    d = cfg["detector"]
    return DetectorParams(float(d["eta"]), float(d["nu_ele"]), d["trust"], d["calibration"])


def build_channel(cfg: dict) -> ChannelParams:
    c = cfg["channel"]
    T = c["T"]
    if T is None:
        if c["distance_km"] is None:
            raise ConfigError("channel.T: is required (or give channel.distance_km)")
        T = float(fiber_transmittance(c["distance_km"], c["alpha"]))
    elif c["distance_km"] is not None:
        raise ConfigError("channel.distance_km: conflicts with channel.T")
    if c["xi"] is not None:
        return ChannelParams.from_output_noise(float(T), float(c["xi"]))
    return ChannelParams(float(T), float(c["eps"]))


def build_finite_size(cfg: dict, N=None) -> Optional[FiniteSizeParams]:
    f = cfg["finite_size"]
    N = f["N"] if N is None else N
    if N is None:
        return None
    return FiniteSizeParams.from_pe_fraction(
        float(N), float(f["pe_fraction"]), eps_PE=f["eps_pe"], eps_bar=f["eps_bar"], eps_PA=f["eps_pa"]
    )


def build_simulation(cfg: dict) -> SimulationConfig:
    spec = build_spec(cfg)
    if spec.state_kind != "coherent" or spec.reconciliation != "reverse":
        raise ConfigError("protocol.state: simulation covers coherent states with reverse reconciliation")
    s, f = cfg["simulation"], cfg["finite_size"]
    return SimulationConfig(
        channel=build_channel(cfg),
        detector=build_detector(cfg),
        format=ModulationFormat("gaussian", spec.V_M),
        measurement=spec.measurement,
        n_symbols=int(s["n_symbols"]),
        seed=int(cfg["seed"]),
        calibration_samples=int(s["calibration_samples"]),
        beta=spec.beta,
        pe_fraction=float(f["pe_fraction"]),
        eps_PE=f["eps_pe"],
        eps_bar=f["eps_bar"],
        eps_PA=f["eps_pa"],
    )


def _per_second(cfg: dict, rate: float) -> dict:
    sr = cfg["symbol_rate"]
    return {} if sr is None else {"rate_bits_per_second": rate * sr}


# ---------------------------------------------------------------------------
# commands


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_rate(cfg: dict, out: Path) -> str:
    report = evaluate_rate(build_spec(cfg), build_channel(cfg), build_detector(cfg), build_finite_size(cfg))
    _write_json(out / "rate.json", {**report.to_dict(), **_per_second(cfg, report.rate)})
    return f"rate={report.rate:.6g} bits/symbol I_AB={report.I_AB:.6g} chi_E={report.chi_E:.6g} ({report.regime})"


def cmd_optimize(cfg: dict, out: Path) -> str:
    o = cfg["optimize"]
    res = optimize_modulation_variance(
        build_spec(cfg), build_channel(cfg), build_detector(cfg), build_finite_size(cfg), (o["vm_min"], o["vm_max"])
    )
    _write_json(
        out / "optimize.json",
        {
            "V_M": res.V_M,
            "rate": res.rate,
            "at_boundary": res.at_boundary,
            "all_negative": res.all_negative,
            "report": res.report.to_dict(),
            **_per_second(cfg, res.rate),
        },
    )
    flags = " (at bound)" if res.at_boundary else ""
    return f"optimal V_M={res.V_M:.6g}{flags} rate={res.rate:.6g} bits/symbol"


def cmd_curve(cfg: dict, out: Path) -> str:
    c = cfg["curve"]
    distances = parse_range(c["distances"])
    pts = rate_distance_curve(
        build_spec(cfg),
        build_detector(cfg),
        cfg["channel"]["alpha"],
        cfg["channel"]["eps"],
        distances,
        build_finite_size(cfg),
        optimize=c["optimize"],
        threads=cfg["threads"],
    )
    sr = cfg["symbol_rate"]
    with (out / "curve.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["distance_km", "T", "rate_bits_per_symbol", "V_M"] + (["rate_bits_per_second"] if sr else []))
        for p in pts:
            row = [p.distance_km, p.T, p.rate, p.V_M] + ([p.rate * sr] if sr else [])
            w.writerow([repr(float(v)) for v in row])
    positive = [p.distance_km for p in pts if p.rate > 0]
    reach = f"positive up to {max(positive):g} km" if positive else "no positive rate"
    return f"curve: {len(pts)} points, {reach}"


def cmd_simulate(cfg: dict, out: Path) -> str:
    sim = build_simulation(cfg)
    report = end_to_end_run(sim)
    (out / "simulate.json").write_text(report.to_json() + "\n")
    if cfg["simulation"]["write_samples"]:
        block, record, _ = simulate_measurements(sim)
        write_samples_csv(out / "samples.csv", block, record)
    K = report.rate_finite["rate"]
    return f"T_hat={report.T_hat:.5f} eps_hat={report.eps_hat:.5f} finite rate={K:.6g} bits/symbol"


def cmd_dsp(cfg: dict, out: Path) -> str:
    d = cfg["dsp"]
    seed = int(cfg["seed"])
    layout = FrameLayout(payload_symbols=int(d["payload_symbols"]))
    block = modulate(ModulationFormat("gaussian", float(cfg["protocol"]["vm"])), layout.payload_symbols, seed)
    tx = shape_and_mux(block, layout)
    rx = delay(tx, int(d["offset"]), 4 * layout.sps)
    rx = apply_phase_noise(rx, math.radians(d["phase_deg"]), d["freq_offset_hz"], d["linewidth_ratio"], seed)
    if d["noise"]:
        rx = add_vacuum_noise(rx, seed)
    res = receive(rx, layout)
    got = res.demuxed.block
    tx_c, rx_c = block.x + 1j * block.p, got.x + 1j * got.p
    rms = math.sqrt(np.mean(np.abs(tx_c) ** 2))
    report = {
        "offset_true": int(d["offset"]),
        "offset_found": res.offset,
        "offset_exact": res.offset == int(d["offset"]),
        "residual_phase_deg": math.degrees(float(np.angle(np.vdot(tx_c, rx_c)))),
        "evm": evm(got, block),
        "max_relative_error": float(np.max(np.abs(rx_c - tx_c)) / rms),
        "pilot_snr_db": res.recovery.pilot_snr_db,
        "low_pilot_snr": res.recovery.low_snr,
        "decimation_phase": res.demuxed.decimation_phase,
    }
    _write_json(out / "dsp.json", report)
    if d["write_waveform"]:
        write_waveform_bin(out / "waveform.bin", rx)
    return (
        f"offset={res.offset} (exact={report['offset_exact']}) residual phase={report['residual_phase_deg']:.4f} deg "
        f"EVM={report['evm']:.3e}"
    )


def cmd_ptmp(cfg: dict, out: Path) -> str:
    n = cfg["network"]
    splitter = n["splitter"] if n["splitter"] == "ideal" else tuple(n["splitter"])
    ptmp = PtmpConfig(
        n_users=int(n["n_users"]),
        trunk_distance_km=0.0,
        spec=build_spec(cfg),
        detector=build_detector(cfg),
        epsilon=float(cfg["channel"]["eps"]),
        drop_distances_km=tuple(n["drop_km"]),
        splitter=splitter,
        alpha_db_per_km=cfg["channel"]["alpha"],
        finite_size=build_finite_size(cfg),
    )
    regime = "finite" if ptmp.finite_size is not None else "asymptotic"
    rows = network_rate_table(ptmp, parse_range(cfg["curve"]["distances"]), regime, cfg["threads"])
    write_network_csv(out / "ptmp.csv", rows, cfg["symbol_rate"])
    first = rows[0]
    return (
        f"ptmp: {ptmp.n_users} users, {len(rows)} distances; at {first.distance_km:g} km "
        f"user 0 rate={first.user_rates[0]:.6g} aggregate={first.aggregate:.6g} bits/symbol"
    )


def cmd_postprocess(cfg: dict, out: Path) -> str:
    sim = build_simulation(cfg)
    block, record, _ = simulate_measurements(sim)
    est = estimate_parameters(block, record, sim.detector, sim.format.V_M)
    T_p, eps_p, _ = physical_projection(est.T_hat, est.eps_hat)
    fs = build_finite_size(cfg, N=sim.n_symbols)
    alice, bob = sift_pairs(block, record)
    p = cfg["postprocess"]
    code = regular_ldpc(int(p["ldpc_n"]), seed=sim.seed)
    # the estimation subset is disclosed, so only the remaining pairs are reconciled
    keep = slice(int(round(fs.m)), None)
    rep = distill(alice[keep], bob[keep], sim.seed, code, int(p["md_dim"]), max_iters=int(p["max_iters"]))
    # the key is sized with the efficiency actually achieved, not the configured one
    beta = min(max(rep.beta, 1e-12), 1.0)
    rate = finite_size_rate(replace(sim.protocol, beta=beta), ChannelParams(T_p, eps_p), sim.detector, fs)
    amplify(rep, final_key_length(rate, rep.verified_bits), sim.seed)
    meta = {
        **rep.metadata(),
        "rate_report": rate.to_dict(),
        "T_hat": est.T_hat,
        "eps_hat": est.eps_hat,
        "eps_PE": fs.eps_PE,
        "eps_bar": fs.eps_bar,
        "eps_PA": fs.eps_PA,
    }
    _write_json(out / "postprocess.json", meta)
    export_key(out / "key.bin", rep.bob_key, meta)
    return (
        f"postprocess: {int(rep.verified.sum())}/{rep.n_frames} frames verified, beta={rep.beta:.4f}, "
        f"final key {rep.final_length} bits"
    )


COMMANDS = {
    "rate": cmd_rate,
    "optimize": cmd_optimize,
    "curve": cmd_curve,
    "simulate": cmd_simulate,
    "dsp-loopback": cmd_dsp,
    "ptmp": cmd_ptmp,
    "postprocess": cmd_postprocess,
}

CSV_HELP = """\
output files (in --out):
  config.json     fully resolved configuration; rerun with --config to reproduce
  rate.json       rate report: I_AB, chi_E, beta, rate (bits/symbol), regime, prefactor, delta
  optimize.json   optimal V_M, rate, boundary flags and the report at the optimum
  curve.csv       distance_km, T, rate_bits_per_symbol, V_M [, rate_bits_per_second]
  simulate.json   estimates, calibration and rates at true/estimated parameters
  samples.csv     idx, x_mod, p_mod, basis, raw, normalized (one row per arm)
  dsp.json        offset, residual phase (deg), EVM, max relative symbol error
  ptmp.csv        distance_km, user_id, rate_bits_per_symbol, aggregate
                  [, rate_bits_per_second, aggregate_bits_per_second]
                  (aggregate = sum of non-negative per-user rates at that distance)
  postprocess.json, key.bin, key.bin.json
                  distillation statistics; key bits packed MSB-first

rates are in bits per symbol; --symbol-rate adds bits per second.
"""


def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("general")
    g.add_argument("--config", help="JSON config file; flags override its values")
    g.add_argument("--out", default="cvqkd-out", help="output directory (default: %(default)s)")
    g.add_argument("--seed", type=int, help="random seed (generated and printed if omitted)")
    g.add_argument("--threads", type=int, help="worker threads (default: $CVQKD_THREADS or 1)")
    g.add_argument("--symbol-rate", type=float, dest="symbol_rate", help="symbols per second, adds bits/s outputs")

    g = p.add_argument_group("protocol")
    g.add_argument("--protocol", choices=["coherent-hom", "coherent-het", "squeezed-hom", "squeezed-het"])
    rec = g.add_mutually_exclusive_group()
    rec.add_argument("--rr", dest="reconciliation", action="store_const", const="reverse", help="reverse reconciliation")
    rec.add_argument("--dr", dest="reconciliation", action="store_const", const="direct", help="direct reconciliation")
    g.add_argument("--vm", type=float, help="modulation variance V_M (SNU)")
    g.add_argument("--beta", type=float, help="reconciliation efficiency")

    g = p.add_argument_group("channel")
    g.add_argument("--T", type=float, help="transmittance")
    g.add_argument("--eps", type=float, help="input-referred excess noise (SNU)")
    g.add_argument("--xi", type=float, help="output-referred excess noise xi = T*eps (SNU)")
    g.add_argument("--distance", type=float, help="fiber length in km (instead of --T)")
    g.add_argument("--alpha", type=float, help="fiber loss in dB/km")
    g.add_argument("--d", dest="distances", help="distance sweep start:step:stop in km (ends included)")

    g = p.add_argument_group("detector")
    g.add_argument("--eta", type=float, help="detection efficiency")
    g.add_argument("--nu", type=float, help="electronic noise (SNU)")
    g.add_argument("--trust", choices=["trusted", "untrusted"])
    g.add_argument("--calibration", choices=["two_time", "one_time"])

    g = p.add_argument_group("finite size")
    g.add_argument("--N", type=float, help="total block size; enables finite-size rates")
    g.add_argument("--pe-fraction", type=float, dest="pe_fraction")
    g.add_argument("--eps-pe", type=float, dest="eps_pe")
    g.add_argument("--eps-bar", type=float, dest="eps_bar")
    g.add_argument("--eps-pa", type=float, dest="eps_pa")

    g = p.add_argument_group("command options")
    g.add_argument("--optimize", action="store_const", const=True, help="curve: optimise V_M per point")
    g.add_argument("--n", type=int, dest="n_symbols", help="simulate/postprocess: number of symbols")
    g.add_argument("--calibration-samples", type=int, dest="calibration_samples")
    g.add_argument("--samples", action="store_const", const=True, help="simulate: also write samples.csv")
    g.add_argument("--offset", type=int, help="dsp-loopback: sample delay")
    g.add_argument("--phase-deg", type=float, dest="phase_deg", help="dsp-loopback: static phase")
    g.add_argument("--freq-offset", type=float, dest="freq_offset_hz", help="dsp-loopback: LO offset in Hz")
    g.add_argument("--linewidth-ratio", type=float, dest="linewidth_ratio")
    g.add_argument("--noise", action="store_const", const=True, help="dsp-loopback: add vacuum noise")
    g.add_argument("--waveform", action="store_const", const=True, dest="write_waveform")
    g.add_argument("--users", type=int, help="ptmp: number of users")
    g.add_argument("--md-dim", type=int, dest="md_dim", choices=[2, 4, 8])
    g.add_argument("--max-iters", type=int, dest="max_iters")


FLAG_PATHS = {
    "seed": "seed",
    "threads": "threads",
    "symbol_rate": "symbol_rate",
    "reconciliation": "protocol.reconciliation",
    "vm": "protocol.vm",
    "beta": "protocol.beta",
    "T": "channel.T",
    "eps": "channel.eps",
    "xi": "channel.xi",
    "distance": "channel.distance_km",
    "alpha": "channel.alpha",
    "distances": "curve.distances",
    "eta": "detector.eta",
    "nu": "detector.nu_ele",
    "trust": "detector.trust",
    "calibration": "detector.calibration",
    "N": "finite_size.N",
    "pe_fraction": "finite_size.pe_fraction",
    "eps_pe": "finite_size.eps_pe",
    "eps_bar": "finite_size.eps_bar",
    "eps_pa": "finite_size.eps_pa",
    "optimize": "curve.optimize",
    "n_symbols": "simulation.n_symbols",
    "calibration_samples": "simulation.calibration_samples",
    "samples": "simulation.write_samples",
    "offset": "dsp.offset",
    "phase_deg": "dsp.phase_deg",
    "freq_offset_hz": "dsp.freq_offset_hz",
    "linewidth_ratio": "dsp.linewidth_ratio",
    "noise": "dsp.noise",
    "write_waveform": "dsp.write_waveform",
    "users": "network.n_users",
    "md_dim": "postprocess.md_dim",
    "max_iters": "postprocess.max_iters",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvqkd",
        description="Continuous-variable QKD key rates, simulation, DSP and post-processing.",
        epilog=CSV_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "rate": "key rate at one operating point",
        "optimize": "key rate maximised over V_M",
        "curve": "key rate versus fiber distance (CSV)",
        "simulate": "seeded Monte-Carlo run with parameter estimation",
        "dsp-loopback": "digital transmitter/receiver loopback",
        "ptmp": "point-to-multipoint per-user rates (CSV)",
        "postprocess": "simulate data and distil a key",
    }
    for name, text in helps.items():
        p = sub.add_parser(
            name, help=text, description=text, epilog=CSV_HELP, formatter_class=argparse.RawDescriptionHelpFormatter
        )
        _add_common(p)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    if args.protocol:
        state, meas = args.protocol.split("-")
        out["protocol.state"] = state
        out["protocol.measurement"] = "homodyne" if meas == "hom" else "heterodyne"
    for flag, path in FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[path] = value
    # a transmittance on the command line replaces a file's fiber length and vice versa
    if "channel.T" in out:
        out.setdefault("channel.distance_km", None)
    if "channel.distance_km" in out and out["channel.distance_km"] is not None:
        out.setdefault("channel.T", None)
    return out


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, _overrides(args))
        if cfg["threads"] is None:
            env = os.environ.get("CVQKD_THREADS")
            try:
                cfg["threads"] = int(env) if env else 1
            except ValueError:
                raise ConfigError(f"CVQKD_THREADS must be an integer, got {env!r}") from None
            validate(cfg)
        if args.command in RANDOMIZED and cfg["seed"] is None:
            cfg["seed"] = secrets.randbelow(2**32)
            print(f"generated seed: {cfg['seed']}", file=sys.stderr)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", cfg)
        summary = COMMANDS[args.command](cfg, out)
    except (ConfigError, DomainError) as exc:
        print(f"cvqkd {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (SyncError, EstimationError, PrecisionError, RuntimeError) as exc:
        print(f"cvqkd {args.command}: failed: {exc}", file=sys.stderr)
        return 3
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
