#!/usr/bin/env python3
"""Regenerate tests/data/cost_golden.csv from the closed-form cycle counts.

Integer arithmetic only. Usage: python3 scripts/golden_costs.py > tests/data/cost_golden.csv
"""
import random


def ceil_div(a, b):
    return -(-a // b)


def lat_aimc(c_in, fx, fy, ox, oy, c):
    if c == 0:
        return 0
    cols = ceil_div(c, 512)
    return ceil_div(c_in * fx * fy, 1152) * cols * ox * oy + 2 * 4 * c_in * cols


def lat_digital(c_in, fx, fy, ox, oy, c):
    if c == 0:
        return 0
    return ceil_div(c, 16) * ceil_div(oy, 16) * c_in * ox * fx * fy + c_in * c * fx * fy


FIXED = [
    # kind, c_in, c_out, fx, fy, ox, oy, channels
    ("conv", 64, 512, 3, 3, 16, 16, 512),
    ("conv", 8, 4, 1, 1, 4, 4, 4),
    ("conv", 64, 16, 3, 3, 16, 16, 16),
    ("conv", 8, 4, 1, 1, 4, 4, 0),
    ("conv", 3, 16, 3, 3, 32, 32, 16),
    ("conv", 128, 1024, 3, 3, 8, 8, 600),
    ("conv", 256, 256, 1, 1, 14, 14, 100),
    ("fc", 64, 10, 1, 1, 1, 1, 10),
    ("fc", 2048, 1000, 1, 1, 1, 1, 513),
    ("conv", 16, 32, 5, 5, 17, 33, 17),
]


def rows():
    out = list(FIXED)
    rng = random.Random(7)
    for _ in range(30):
        kind = rng.choice(["conv", "conv", "fc"])
        c_in = rng.randint(1, 600)
        c_out = rng.randint(1, 1100)
        if kind == "fc":
            fx = fy = ox = oy = 1
        else:
            fx = fy = rng.choice([1, 3, 5, 7])
            ox = rng.randint(1, 40)
            oy = rng.randint(1, 40)
        out.append((kind, c_in, c_out, fx, fy, ox, oy, rng.randint(0, c_out)))
    return out


def main():
    print("kind,c_in,c_out,fx,fy,ox,oy,channels,aimc_cycles,digital_cycles")
    for kind, c_in, c_out, fx, fy, ox, oy, c in rows():
        a = lat_aimc(c_in, fx, fy, ox, oy, c)
        d = lat_digital(c_in, fx, fy, ox, oy, c)
        print(f"{kind},{c_in},{c_out},{fx},{fy},{ox},{oy},{c},{a},{d}")


if __name__ == "__main__":
    main()
