#!/usr/bin/env python3
"""Regenerates the golden NPY/PGM/PPM files in this directory.

NPY files come straight from numpy.save so the reader is checked against a
foreign writer. Images are written by hand, some with comments and unusual
whitespace in the header.
"""
import pathlib

import numpy as np

HERE = pathlib.Path(__file__).resolve().parent


def npy_cases(rng):
    yield "scalar_f8", np.array(2.5, dtype="<f8")
    yield "vec1_f4", np.array([1.5], dtype="<f4")
    yield "vec7_f8", rng.standard_normal(7).astype("<f8")
    yield "mat_3x5_f4", rng.standard_normal((3, 5)).astype("<f4")
    yield "cube_2x3x4_f8", rng.standard_normal((2, 3, 4)).astype("<f8")
    yield "nchw_2x3x4x5_f4", rng.standard_normal((2, 3, 4, 5)).astype("<f4")
    yield "nchw_1x1x16x16_f8", rng.uniform(0, 1, (1, 1, 16, 16)).astype("<f8")
    special = [0.0, -0.0, np.inf, -np.inf, np.nan, 1e-45, 5e-324, np.finfo(np.float64).max, -1.0, 1.0 / 3.0]
    yield "special_f8", np.array(special, dtype="<f8")
    with np.errstate(over="ignore"):
        yield "special_f4", np.array(special, dtype="<f8").astype("<f4")
    yield "wide_1x1x1x1000_f4", rng.standard_normal((1, 1, 1, 1000)).astype("<f4")


def pnm(magic, w, h, raster, header=None):
    head = header if header is not None else f"{magic}\n{w} {h}\n255\n"
    return head.encode("ascii") + raster.astype(np.uint8).tobytes()


def image_cases(rng):
    gray = rng.integers(0, 256, (9, 13))
    yield "gray_13x9.pgm", pnm("P5", 13, 9, gray)
    yield "gray_ramp_256x1.pgm", pnm("P5", 256, 1, np.arange(256).reshape(1, 256))
    yield "gray_comment_5x4.pgm", pnm("P5", 5, 4, rng.integers(0, 256, (4, 5)),
                                      "P5\n# written by make_golden.py\n5   4\n# maxval next\n255\n")
    rgb = rng.integers(0, 256, (7, 6, 3))
    yield "rgb_6x7.ppm", pnm("P6", 6, 7, rgb)
    yield "rgb_extremes_2x2.ppm", pnm("P6", 2, 2, np.array([[[0, 0, 0], [255, 255, 255]],
                                                            [[255, 0, 128], [1, 254, 127]]]))
    yield "rgb_tabs_3x2.ppm", pnm("P6", 3, 2, rng.integers(0, 256, (2, 3, 3)), "P6\t3\t2\r\n255\n")


def main():
    rng = np.random.default_rng(20240611)
    for name, arr in npy_cases(rng):
        np.save(HERE / f"{name}.npy", arr)
    for name, data in image_cases(rng):
        (HERE / name).write_bytes(data)


if __name__ == "__main__":
    main()
