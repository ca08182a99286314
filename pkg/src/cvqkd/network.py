"""Downstream point-to-multipoint rates over a passive splitter.

Each user ``i`` sees the trunk fiber, splitter port ``t_i`` and its drop
fiber as one lossy channel, ``T_i = T_trunk * t_i * T_drop,i``. Splitter loss
is treated as untrusted channel loss, so every user's rate is a lower bound
on what joint multi-user estimation could certify.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError
from .keyrate import (
    ChannelParams,
    DetectorParams,
    FiniteSizeParams,
    KeyRateReport,
    ProtocolSpec,
    evaluate_rate,
    fiber_transmittance,
)

Regime = Literal["asymptotic", "finite"]

CSV_COLUMNS = ("distance_km", "user_id", "rate_bits_per_symbol", "aggregate")


@dataclass(frozen=True)
class PtmpConfig:
    """Network topology plus the protocol shared by all users.

    Args:
        n_users: number of receivers.
        trunk_distance_km: fiber length between sender and splitter.
        drop_distances_km: per-user fiber after the splitter; empty means none.
        splitter: ``"ideal"`` for ``1/N`` per port, or explicit port
            transmittances with ``sum(t_i) <= 1``.
        epsilon: excess noise referred to the channel input.
    """

    n_users: int
    trunk_distance_km: float
    spec: ProtocolSpec
    detector: DetectorParams
    epsilon: float
    drop_distances_km: tuple = ()
    splitter: Union[str, tuple] = "ideal"
    alpha_db_per_km: float = 0.2
    finite_size: Optional[FiniteSizeParams] = field(default=None, compare=False)

    def __post_init__(self):
        if int(self.n_users) != self.n_users or self.n_users < 1:
            raise ConfigError(f"n_users must be a positive integer, got {self.n_users}")
        if self.trunk_distance_km < 0:
            raise ConfigError(f"trunk distance must be >= 0, got {self.trunk_distance_km}")
        if self.epsilon < 0:
            raise ConfigError(f"excess noise must be >= 0, got {self.epsilon}")
        drops = tuple(float(d) for d in self.drop_distances_km)
        if drops and len(drops) != self.n_users:
            raise ConfigError(f"need {self.n_users} drop distances, got {len(drops)}")
        if any(d < 0 for d in drops):
            raise ConfigError("drop distances must be >= 0")
        object.__setattr__(self, "drop_distances_km", drops)
        if isinstance(self.splitter, str):
            if self.splitter != "ideal":
                raise ConfigError(f"splitter must be 'ideal' or a list of port transmittances, got {self.splitter!r}")
        else:
            ports = tuple(float(t) for t in self.splitter)
            if len(ports) != self.n_users:
                raise ConfigError(f"need {self.n_users} splitter ports, got {len(ports)}")
            if any(t < 0 or t > 1 for t in ports):
                raise ConfigError("splitter port transmittances must lie in [0, 1]")
            if sum(ports) > 1 + 1e-12:
                raise ConfigError(f"splitter port transmittances sum to {sum(ports)} > 1")
            object.__setattr__(self, "splitter", ports)

    def port(self, user: int) -> float:
        return 1.0 / self.n_users if self.splitter == "ideal" else self.splitter[user]

    def drop(self, user: int) -> float:
        return self.drop_distances_km[user] if self.drop_distances_km else 0.0

    def transmittance(self, user: int) -> float:
        """End-to-end transmittance seen by ``user``."""
        if not 0 <= user < self.n_users:
            raise ConfigError(f"user index {user} out of range for {self.n_users} users")
        trunk = float(fiber_transmittance(self.trunk_distance_km, self.alpha_db_per_km))
        drop = float(fiber_transmittance(self.drop(user), self.alpha_db_per_km))
        return trunk * self.port(user) * drop

    def at_distance(self, trunk_distance_km: float) -> "PtmpConfig":
        return replace(self, trunk_distance_km=trunk_distance_km)


def per_user_rate(cfg: PtmpConfig, user: int, regime: Regime = "asymptotic") -> KeyRateReport:
    """Key rate of one user under the splitter-as-loss model."""
    if regime not in ("asymptotic", "finite"):
        raise ConfigError(f"regime must be 'asymptotic' or 'finite', got {regime!r}")
    if regime == "finite" and cfg.finite_size is None:
        raise ConfigError("finite-size regime needs finite_size parameters")
    T = cfg.transmittance(user)
    if T == 0.0:
        # a dark port carries no signal: no correlations, no key
        return KeyRateReport(0.0, 0.0, cfg.spec.beta, 0.0, regime)
    chan = ChannelParams(T, cfg.epsilon)
    fs = cfg.finite_size if regime == "finite" else None
    return evaluate_rate(cfg.spec, chan, cfg.detector, fs)


@dataclass(frozen=True)
class NetworkRow:
    distance_km: float
    user_rates: tuple
    aggregate: float


def network_rate_table(
    cfg: PtmpConfig,
    distances: Sequence[float],
    regime: Regime = "asymptotic",
    threads: int = 1,
) -> list[NetworkRow]:
    """Per-user and aggregate rates over a sweep of trunk distances.

    The aggregate is the sum of the users' non-negative rates. Rows follow
    the order of ``distances``; users within a row follow their index.
    """
    jobs = [(float(d), u) for d in distances for u in range(cfg.n_users)]

    def run(job):
        d, u = job
        return per_user_rate(cfg.at_distance(d), u, regime).rate

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rates = list(pool.map(run, jobs))
    else:
        rates = [run(j) for j in jobs]
    rates = np.array(rates).reshape(len(distances), cfg.n_users)
    return [
        NetworkRow(float(d), tuple(map(float, r)), float(np.sum(np.maximum(r, 0.0))))
        for d, r in zip(distances, rates)
    ]


def write_network_csv(path, rows: Sequence[NetworkRow], symbol_rate: Optional[float] = None) -> None:
    """Write one line per user and distance; ``symbol_rate`` adds bits/s columns."""
    extra = ("rate_bits_per_second", "aggregate_bits_per_second") if symbol_rate else ()
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS + extra)
        for row in rows:
            for user, rate in enumerate(row.user_rates):
                line = [repr(row.distance_km), user, repr(float(rate)), repr(row.aggregate)]
                if symbol_rate:
                    line += [repr(float(rate * symbol_rate)), repr(row.aggregate * symbol_rate)]
                w.writerow(line)
