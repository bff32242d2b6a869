"""Render a contact sheet of synthetic sign scenes for every factorial cell.

Rows are datasets (UF, CF, UM, CM, UH, CH); columns are the first test image
of each class, with the ground-truth mask outlined in red.

    python3 demos/render_scenes.py --out scenes.png
"""
import argparse

import numpy as np

from bgeffect import io, scene


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="scenes.png")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--classes", type=int, default=12)
    args = ap.parse_args()

    catalog = scene.build_catalog(args.classes)
    rows = []
    for st in "FMH":
        for corr in "UC":
            name = corr + st
            cfg = scene.DatasetConfig(name, catalog, 1, 1, master_seed=scene.dataset_seed(0, name),
                                      image_size=args.size)
            tiles, envs = [], []
            for spec in catalog:
                rec = scene.generate_sample(cfg, spec, "test", 0)
                envs.append(rec.background.env[0])
                img = rec.image.copy()
                edge = rec.mask ^ np.roll(rec.mask, 1, 0) | rec.mask ^ np.roll(rec.mask, 1, 1)
                img[edge] = (255, 0, 0)
                tiles.append(np.pad(img, ((1, 1), (1, 1), (0, 0)), constant_values=255))
            rows.append(np.concatenate(tiles, axis=1))
            print(f"{name}: pose sigmas {cfg.stage.sigmas}, backgrounds {''.join(envs)}")
    io.write_png(args.out, np.concatenate(rows, axis=0))
    print("wrote", args.out)


if __name__ == "__main__":
    main()
