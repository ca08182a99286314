import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvqkd.errors import ConfigError
from cvqkd.keyrate import (
    ChannelParams,
    DetectorParams,
    FiniteSizeParams,
    ProtocolSpec,
    asymptotic_rate,
    fiber_transmittance,
)
from cvqkd.network import PtmpConfig, network_rate_table, per_user_rate, write_network_csv

SPEC = ProtocolSpec("coherent", "homodyne", "reverse", V_M=4.0, beta=0.956)
DET = DetectorParams(eta=0.6, nu_ele=0.15)
EPS = 0.0383


def config(n, trunk=10.0, **kw):
    return PtmpConfig(n, trunk, SPEC, DET, EPS, **kw)


def test_single_user_is_point_to_point():
    direct = asymptotic_rate(SPEC, ChannelParams.from_fiber(25.0, 0.2, EPS), DET)
    assert per_user_rate(config(1, 25.0), 0).rate == pytest.approx(direct.rate, rel=1e-12)


def test_eight_users_positive_at_10km():
    assert per_user_rate(config(8), 0).rate > 0


def test_dark_port_has_no_key():
    cfg = config(3, splitter=(0.5, 0.0, 0.5))
    assert per_user_rate(cfg, 1).rate <= 0
    assert per_user_rate(cfg, 0).rate > 0


def test_user_transmittance_composition():
    cfg = config(2, 10.0, drop_distances_km=(0.0, 5.0), splitter=(0.3, 0.6))
    t_trunk = fiber_transmittance(10.0)
    assert cfg.transmittance(0) == pytest.approx(t_trunk * 0.3)
    assert cfg.transmittance(1) == pytest.approx(t_trunk * 0.6 * fiber_transmittance(5.0))


def test_config_validation():
    with pytest.raises(ConfigError):
        config(2, splitter=(0.6, 0.6))
    with pytest.raises(ConfigError):
        config(2, splitter=(0.5,))
    with pytest.raises(ConfigError):
        config(0)
    with pytest.raises(ConfigError):
        config(2, drop_distances_km=(1.0,))
    with pytest.raises(ConfigError):
        config(2).transmittance(2)
    with pytest.raises(ConfigError):
        per_user_rate(config(2), 0, "finite")


def test_symmetric_aggregate():
    rows = network_rate_table(config(8), [5.0, 10.0, 20.0])
    for row in rows:
        assert len(set(row.user_rates)) == 1
        assert row.aggregate == pytest.approx(8 * max(row.user_rates[0], 0.0))


def test_per_user_rate_falls_with_users():
    rates = [per_user_rate(config(n), 0).rate for n in range(1, 130, 7)]
    assert np.all(np.diff(rates) < 0)


def test_ordering_across_split_ratios():
    for d in (0.0, 10.0, 30.0):
        r = [per_user_rate(config(n, d), 0).rate for n in (8, 32, 128)]
        assert r[0] > r[1] > r[2]


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 64),
    st.floats(0.0, 60.0),
    st.floats(0.0, 10.0),
    st.floats(0.01, 1.0),
)
def test_splitter_never_helps(n, trunk, drop, port):
    ports = (port,) + (0.0,) * (n - 1)
    cfg = config(n, trunk, drop_distances_km=(drop,) * n, splitter=ports)
    no_split = ChannelParams.from_fiber(trunk + drop, 0.2, EPS)
    assert per_user_rate(cfg, 0).rate <= asymptotic_rate(SPEC, no_split, DET).rate + 1e-12


def test_table_threads_and_order():
    cfg = config(4, drop_distances_km=(0.0, 1.0, 2.0, 3.0))
    a = network_rate_table(cfg, [20.0, 0.0, 10.0])
    b = network_rate_table(cfg, [20.0, 0.0, 10.0], threads=4)
    assert a == b
    assert [r.distance_km for r in a] == [20.0, 0.0, 10.0]
    assert list(a[0].user_rates) == sorted(a[0].user_rates, reverse=True)


def test_finite_size_regime():
    fs = FiniteSizeParams.from_pe_fraction(1e10, 0.5)
    cfg = config(8, finite_size=fs)
    assert per_user_rate(cfg, 0, "finite").rate < per_user_rate(cfg, 0).rate


def test_csv(tmp_path):
    rows = network_rate_table(config(2), [0.0, 10.0])
    write_network_csv(tmp_path / "n.csv", rows)
    with open(tmp_path / "n.csv") as fh:
        data = list(csv.DictReader(fh))
    assert list(data[0]) == ["distance_km", "user_id", "rate_bits_per_symbol", "aggregate"]
    assert len(data) == 4
    assert float(data[3]["aggregate"]) == pytest.approx(rows[1].aggregate)


def test_csv_bits_per_second(tmp_path):
    rows = network_rate_table(config(2), [10.0])
    write_network_csv(tmp_path / "n.csv", rows, symbol_rate=1e8)
    with open(tmp_path / "n.csv") as fh:
        data = list(csv.DictReader(fh))
    assert float(data[0]["rate_bits_per_second"]) == pytest.approx(1e8 * rows[0].user_rates[0])
    assert float(data[1]["aggregate_bits_per_second"]) == pytest.approx(1e8 * rows[0].aggregate)
