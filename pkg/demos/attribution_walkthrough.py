"""Train one small net on correlated frontal data and look at where it attends.

Generates a small CF dataset, trains TinyCNN for a few epochs, then explains
a handful of test images with Kernel SHAP and GradCAM. For each image it
prints the pixel ratio (share of positive attribution inside the sign) and
writes a strip: image | KS map | GradCAM map.

    python3 demos/attribution_walkthrough.py --out walkthrough.png
"""
import argparse
import tempfile

import numpy as np

from bgeffect import attribution as A
from bgeffect import io, nn, scene, stats


def heat(values, size):
    v = np.clip(values / (np.abs(values).max() + 1e-12), -1, 1)
    rgb = np.stack([np.clip(v, 0, 1), np.zeros_like(v), np.clip(-v, 0, 1)], -1)
    return (np.kron(rgb, np.ones((size // v.shape[0], size // v.shape[1], 1))) * 255).astype(np.uint8)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="walkthrough.png")
    ap.add_argument("--images", type=int, default=6)
    ap.add_argument("--epochs", type=int, default=15)
    args = ap.parse_args()

    size, cell = 32, 4
    with tempfile.TemporaryDirectory() as tmp:
        cfg = scene.DatasetConfig("CF", scene.build_catalog(12), 60, 10, image_size=size,
                                  master_seed=scene.dataset_seed(0, "CF"))
        h = io.load_dataset(io.generate_dataset(cfg, tmp))
        X, y, _ = h.arrays("train")
        Xt, yt, Mt = h.arrays("test")
    res = nn.train(nn.tiny_cnn((3, size, size), 12, seed=0), X, y, epochs=args.epochs, lr=1e-3, seed=0,
                   optimizer="adam", X_val=Xt, y_val=yt)
    print(f"trained {args.epochs} epochs, test accuracy {nn.evaluate(res.final, Xt, yt):.3f}")

    model = res.final.astype(np.float64)
    f = A.make_predict_fn(model)
    grid = A.make_grid(size, size, cell)
    rng = np.random.default_rng(0)
    strips = []
    for i in rng.choice(len(Xt), args.images, replace=False):
        x = Xt[i].astype(np.float64)
        ks = A.kernel_shap(f, x, grid, n_samples=1000, rng=rng)
        gc = A.gradcam(model, x)
        r_ks = stats.pixel_ratio(A.expand_to_pixels(ks), Mt[i])
        r_gc = stats.pixel_ratio(A.expand_to_pixels(gc), Mt[i])
        print(f"image {i:3d}: class {yt[i]:2d} predicted {ks.target_class:2d}  "
              f"KS ratio {r_ks:.3f}  GradCAM ratio {r_gc:.3f}  mask share {Mt[i].mean():.3f}")
        img = (Xt[i].transpose(1, 2, 0) * 255).astype(np.uint8)
        strips.append(np.concatenate([img, heat(ks.values_2d, size), heat(gc.values_2d, size)], axis=1))
    io.write_png(args.out, np.concatenate(strips, axis=0))
    print("wrote", args.out)


if __name__ == "__main__":
    main()
