"""Per-user and aggregate rates of a passive splitter network."""

from cvqkd.keyrate import DetectorParams, ProtocolSpec
from cvqkd.network import PtmpConfig, network_rate_table

SPEC = ProtocolSpec("coherent", "homodyne", "reverse", V_M=4.0, beta=0.956)
DET = DetectorParams(0.6, 0.15, "trusted")


def main():
    distances = [0.0, 10.0, 25.0, 50.0, 100.0]
    print(f"{'users':>5s} " + " ".join(f"{d:>10.0f}km" for d in distances))
    for n in (1, 8, 32, 128):
        rows = network_rate_table(PtmpConfig(n, 0.0, SPEC, DET, 0.0383), distances)
        print(f"{n:5d} " + " ".join(f"{r.user_rates[0]:12.3e}" for r in rows) + "  per user")
        print(f"{'':5s} " + " ".join(f"{r.aggregate:12.3e}" for r in rows) + "  aggregate")


if __name__ == "__main__":
    main()
