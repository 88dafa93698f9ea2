"""Regenerate the bundled hormone agreement-matrix realization.

The mislinked hormone table fixes which record pairs the linker chose;
this script reconstructs that pairing from the two tables, then searches
master seeds until a draw from the match/non-match pattern model relinks
(greedy, 1-1) to exactly that pairing. The winning seed is printed and
the 729 x 4 realization written to src/linkboot/data/hormone_agreement.csv.

Run from the repository root:  python scripts/make_hormone_agreement.py
"""

from __future__ import annotations

import csv
import sys
from pathlib import Path

import numpy as np

from linkboot.fixtures import hormone_mislink_permutation, hormone_model
from linkboot.linkage import greedy_one_to_one, weight_terms

ROOT = Path(__file__).resolve().parent.parent
OUT = ROOT / "src" / "linkboot" / "data" / "hormone_agreement.csv"
N = 27


def draw_realization(seed: int, pi: np.ndarray, model) -> np.ndarray:
    gen = np.random.default_rng(seed)
    linked = np.zeros((N * N,), dtype=bool)
    linked[pi[:, 0] * N + pi[:, 1]] = True
    probs = np.where(linked[:, None], model.m[None, :], model.u[None, :])
    return (gen.random(probs.shape) < probs).astype(np.uint8)


def main(max_tries: int = 2_000_000) -> int:
    model = hormone_model()
    pi = hormone_mislink_permutation()
    target = {(int(a), int(b)) for a, b in pi}
    gain, base = weight_terms(model)

    for seed in range(1, max_tries + 1):
        bits = draw_realization(seed, pi, model)
        weights = bits @ gain + base
        pairs = greedy_one_to_one(weights, N, N, N)
        if {(int(a), int(b)) for a, b in pairs} == target:
            with open(OUT, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["i", "j", "g1", "g2", "g3", "g4", "linked"])
                linked = np.zeros(N * N, dtype=int)
                linked[pi[:, 0] * N + pi[:, 1]] = 1
                for row in range(N * N):
                    writer.writerow([row // N, row % N, *bits[row], linked[row]])
            print(f"seed {seed} reproduces the mislinked pairing; wrote {OUT}")
            return seed
        if seed % 20000 == 0:
            print(f"... {seed} seeds tried", file=sys.stderr)
    raise SystemExit("no seed found within the search budget")


if __name__ == "__main__":
    main()
