"""Simulate a link, estimate its parameters and distil a secret key."""

from dataclasses import replace

from cvqkd.keyrate import ChannelParams, DetectorParams, FiniteSizeParams, finite_size_rate
from cvqkd.postprocess import amplify, distill, final_key_length, regular_ldpc
from cvqkd.simulate import (
    ModulationFormat,
    SimulationConfig,
    estimate_parameters,
    physical_projection,
    sift_pairs,
    simulate_measurements,
)


def main(seed: int = 3):
    cfg = SimulationConfig(
        ChannelParams(0.95, 0.01), DetectorParams(), format=ModulationFormat(V_M=3.0),
        n_symbols=1_000_000, calibration_samples=100_000, seed=seed,
    )
    block, record, calib = simulate_measurements(cfg)
    est = estimate_parameters(block, record, cfg.detector, cfg.format.V_M)
    print(f"shot-noise unit {calib.snu:.4g}; T_hat={est.T_hat:.4f} eps_hat={est.eps_hat:.4f}")

    alice, bob = sift_pairs(block, record)
    rep = distill(alice, bob, seed=seed, code=regular_ldpc())
    print(f"{rep.n_frames} frames, FER={rep.fer:.3f}, raw BER={rep.raw_ber:.3f}, measured beta={rep.beta:.3f}")

    # size the key with the measured efficiency, never the configured one
    T, eps, _ = physical_projection(est.T_hat, est.eps_hat)
    spec = replace(cfg.protocol, beta=rep.beta)
    fs = FiniteSizeParams.from_pe_fraction(cfg.n_symbols, cfg.pe_fraction)
    report = finite_size_rate(spec, ChannelParams(T, eps), cfg.detector, fs)
    rep = amplify(rep, final_key_length(report, rep.verified_bits), seed)
    same = (rep.alice_key.bits == rep.bob_key.bits).all()
    print(f"finite-size rate {report.rate:.4g} bits/symbol -> {rep.final_length} key bits, keys agree: {same}")


if __name__ == "__main__":
    main()
