"""Reproduce the diagnoser's blur calibration table.

Straight horizontal shake kernels of increasing length are rotated by 0 and
30 degrees and applied to the chart image. Each row pairs the mean
structure-tensor eigenvalue ratio over the two rotations with the unrotated
kernel's RMS radius; BLUR_RATIO_TABLE / BLUR_LENGTH_TABLE were read off it.
"""
import argparse

import numpy as np
from scipy import ndimage

from reason_restore.degrade import make_shake_kernel
from reason_restore.diagnose import structure_tensor
from reason_restore.imgcore import Rng, convolve2d
from reason_restore.scenes import chart_image

DEFAULT_STEPS = [1, 2, 3, 4, 6, 8, 12, 16, 20, 24, 28, 32]


def ratio_of(img: np.ndarray) -> float:
    evals = np.linalg.eigvalsh(structure_tensor(img))
    return float(evals[0] / evals[1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, nargs="+", default=DEFAULT_STEPS)
    ap.add_argument("--angles", type=float, nargs="+", default=[0.0, 30.0])
    args = ap.parse_args()

    chart = chart_image(64, 64)
    print("steps\tr_rms\tmean_ratio\tper_angle")
    for steps in args.steps:
        kernel = make_shake_kernel(Rng(0), n_steps=steps, horizontal=True)
        ratios = []
        for angle in args.angles:
            k = np.clip(ndimage.rotate(kernel.weights, angle, reshape=False, order=1), 0.0, None)
            ratios.append(ratio_of(convolve2d(chart, k / k.sum())))
        per_angle = " ".join(f"{r:.3f}" for r in ratios)
        print(f"{steps}\t{kernel.r_rms:.3f}\t{np.mean(ratios):.3f}\t{per_angle}")


if __name__ == "__main__":
    main()
