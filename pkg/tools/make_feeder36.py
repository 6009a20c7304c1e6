"""Generate the shipped 36-bus unbalanced radial test feeder.

Layout: a three-phase trunk at the substation, a three-phase middle section
reached through a long tie, two laterals hanging off the middle section (one
single-phase B, one three-phase) and a single-phase C lateral off the trunk.
Line impedances use typical overhead per-mile values on a 4.16 kV system.

    python tools/make_feeder36.py > src/hierflow/data/feeder36.txt
"""

import numpy as np

KV_LN = 4.16 / np.sqrt(3)
BASE_KVA = 1000.0
Z_BASE = (KV_LN * 1e3) ** 2 / (BASE_KVA * 1e3)

Z3 = np.array(
    [
        [0.4576 + 1.0780j, 0.1560 + 0.5017j, 0.1535 + 0.3849j],
        [0.1560 + 0.5017j, 0.4666 + 1.0482j, 0.1580 + 0.4236j],
        [0.1535 + 0.3849j, 0.1580 + 0.4236j, 0.4615 + 1.0651j],
    ]
)  # ohm / mile
Z1 = 1.3292 + 1.3475j  # ohm / mile, single-phase lateral

PH = "ABC"


def block(phases, miles):
    idx = [PH.index(p) for p in phases]
    y = np.zeros((3, 3), complex)
    if len(idx) == 3:
        z = Z3 * miles / Z_BASE
    else:
        z = np.array([[Z1 * miles / Z_BASE]])
    yi = np.linalg.inv(z)
    yi = 0.5 * (yi + yi.T)
    for a, i in enumerate(idx):
        for b, j in enumerate(idx):
            y[i, j] = yi[a, b]
    return y


def fmt(c):
    c = complex(round(c.real, 6), round(c.imag, 6))
    sign = "-" if c.imag < 0 else "+"
    return f"{c.real:.6f}{sign}{abs(c.imag):.6f}j"


def main():
    rng = np.random.default_rng(36)
    buses = []  # (id, phases)
    branches = []  # (from, to, phases, miles)

    def add(bid, phases, parent=None, miles=None):
        buses.append((bid, phases))
        if parent is not None:
            branches.append((parent, bid, phases, miles))

    short = lambda: float(rng.uniform(0.06, 0.14))
    long_ = lambda: float(rng.uniform(0.7, 1.0))

    # substation trunk: buses 1-8
    add(1, "ABC")
    for k in range(2, 9):
        add(k, "ABC", k - 1, short())
    # middle section: 9-18, tied to 8
    add(9, "ABC", 8, long_())
    for k in range(10, 14):
        add(k, "ABC", k - 1, short())
    add(14, "ABC", 11, short())
    for k in range(15, 19):
        add(k, "ABC", k - 1, short())
    # single-phase B lateral: 19-25 off 13
    add(19, "B", 13, long_())
    for k in range(20, 24):
        add(k, "B", k - 1, short())
    add(24, "B", 21, short())
    add(25, "B", 24, short())
    # three-phase lateral: 26-31 off 18
    add(26, "ABC", 18, long_())
    for k in range(27, 30):
        add(k, "ABC", k - 1, short())
    add(30, "ABC", 28, short())
    add(31, "ABC", 30, short())
    # single-phase C lateral: 32-36 off 5
    add(32, "C", 5, long_())
    for k in range(33, 37):
        add(k, "C", k - 1, short())

    loads = []
    shape_ids = [f"s{k}" for k in range(1, 9)]
    n_shape = 0
    for bid, phases in buses:
        if bid == 1:
            continue
        for p in phases:
            if len(phases) == 3 and rng.random() < 0.35:
                continue
            kw = float(np.round(rng.uniform(8, 24), 1))
            if len(phases) == 1:
                kw = float(np.round(rng.uniform(5, 12), 1))
            kvar = float(np.round(kw * rng.uniform(0.3, 0.5), 1))
            loads.append((bid, p, kw, kvar, shape_ids[n_shape % len(shape_ids)]))
            n_shape += 1

    out = [
        "# 36-bus unbalanced radial test feeder, 4.16 kV, generated by tools/make_feeder36.py",
        "[source]",
        "bus 1",
        f"base_kva {BASE_KVA:g}",
        "vmag_pu 1.0",
        "vang_deg 0.0",
        "",
        "[buses]",
    ]
    for bid, phases in buses:
        out.append(f"{bid} {phases} {'slack' if bid == 1 else 'load'} {KV_LN:.6f}")
    out += ["", "[branches]", "# from to  series Y (9 entries, row-major, per-unit)"]
    for a, b, phases, miles in branches:
        y = block(phases, miles)
        out.append(f"{a} {b} " + " ".join(fmt(v) for v in y.reshape(9)))
    out += ["", "[loads]", "# bus phase kw kvar shape"]
    for bid, p, kw, kvar, s in loads:
        out.append(f"{bid} {p} {kw} {kvar} {s}")
    print("\n".join(out))


if __name__ == "__main__":
    main()
