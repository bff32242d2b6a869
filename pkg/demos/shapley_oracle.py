"""Kernel SHAP against brute-force Shapley values on a tiny game.

The value function is a random TinyCNN's probability for one class on a
16x16 image split into 2x4 cells. Full enumeration reproduces the exact
values; the sampled estimator converges as n_samples grows, and its sum
always equals f(x) - f(baseline).

    python3 demos/shapley_oracle.py
"""
import numpy as np

from bgeffect import attribution as A
from bgeffect import nn


def main():
    rng = np.random.default_rng(0)
    model = nn.tiny_cnn((3, 16, 16), 4, seed=3, dtype=np.float64)
    f = A.make_predict_fn(model)
    grid = A.make_grid(16, 16, (8, 4))
    x = rng.random((3, 16, 16))

    exact = A.exact_shapley(f, x, grid)
    full = A.kernel_shap(f, x, grid, mode="full")
    print("exact      ", np.round(exact.values, 5))
    print("full KS    ", np.round(full.values, 5), f" max diff {np.abs(full.values - exact.values).max():.1e}")
    print(f"f(x) - f(0) = {exact.full_value - exact.base_value:.6f}")
    for n in (50, 200, 1000, 5000):
        errs, gaps = [], []
        for rep in range(20):
            est = A.kernel_shap(f, x, grid, n_samples=n, rng=np.random.default_rng(rep))
            errs.append(np.abs(est.values - exact.values).max())
            gaps.append(abs(est.values.sum() - (exact.full_value - exact.base_value)))
        print(f"n_samples {n:5d}: mean max error {np.mean(errs):.2e}, worst efficiency gap {max(gaps):.1e}")


if __name__ == "__main__":
    main()
