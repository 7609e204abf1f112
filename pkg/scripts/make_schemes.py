"""Regenerate the bundled acquisition schemes in src/sphmicro/data/.

Directions come from electrostatic repulsion on the half sphere with fixed
seeds, so rerunning this script reproduces the shipped files.
"""

from pathlib import Path

import numpy as np

from sphmicro.model import AcqScheme, half_sphere_directions, write_scheme

DATA = Path(__file__).resolve().parents[1] / "src" / "sphmicro" / "data"
N_B0 = 14


def build(shells, seed):
    bvals, bvecs, shapes = [0.0] * N_B0, [np.zeros(3)] * N_B0, ["LTE"] * N_B0
    for i, (shape, b, n) in enumerate(shells):
        dirs = half_sphere_directions(n, seed=seed + i)
        bvals += [b] * n
        bvecs += list(dirs)
        shapes += [shape] * n
    return AcqScheme(bvals, np.array(bvecs), shapes)


def main():
    hardi = build([("LTE", 1.0, 60), ("LTE", 2.2, 60)], seed=100)
    write_scheme(hardi, DATA / "hardi.txt",
                 header="two-shell HARDI: 14 b=0, 60 directions at b=1 and b=2.2 ms/um^2")
    tensor = build(
        [("LTE", 0.5, 12), ("LTE", 1.0, 12), ("LTE", 2.0, 20), ("LTE", 3.5, 20), ("LTE", 5.0, 30),
         ("PTE", 0.5, 12), ("PTE", 1.0, 12), ("PTE", 2.0, 20)],
        seed=200,
    )
    write_scheme(tensor, DATA / "tensor_valued.txt",
                 header="tensor-valued: 14 b=0, linear b=0.5,1,2,3.5,5 and planar b=0.5,1,2")


if __name__ == "__main__":
    main()
