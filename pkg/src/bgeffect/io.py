"""On-disk formats: PNG rasters, JSON manifests, TNNC checkpoints, dumps.

Every writer goes through :func:`atomic_write_bytes` (temp file + rename), so
an interrupted run never leaves a half-written file behind.
"""
from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import nn
from .scene import (DatasetConfig, SPLITS, SHAPE_LETTERS, catalog_from_json, catalog_to_json,
                    generate_samples, stage_to_json)

MANIFEST_VERSION = 1
CHECKPOINT_MAGIC = b"TNNC"
CHECKPOINT_VERSION = 1


class DatasetError(ValueError):
    pass


class UnsupportedFormat(ValueError):
    pass


# ---------------------------------------------------------------- primitives

def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj, indent=1):
    write_text(path, json.dumps(obj, indent=indent, sort_keys=True) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def png_bytes(array) -> bytes:
    buf = _io.BytesIO()
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, array):
    atomic_write_bytes(path, png_bytes(array))


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except FileNotFoundError:
        raise
    except Exception as err:
        raise DatasetError(f"cannot decode {path}: {err}") from err


def write_csv(path, header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    write_text(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- datasets

def _record_paths(split, class_id, index):
    stem = f"{split}/{class_id}/{index}"
    return f"{stem}.png", f"{stem}_mask.png"


def generate_dataset(cfg: DatasetConfig, root) -> Path:
    """Render all samples of ``cfg`` under ``root/<name>/`` and write the manifest.

    Returns the manifest path. The manifest is written last.
    """
    base = Path(root) / cfg.name
    splits = {}
    for split in SPLITS:
        entries = []
        for rec in generate_samples(cfg, split):
            img_rel, mask_rel = _record_paths(split, rec.class_id, rec.index)
            write_png(base / img_rel, rec.image)
            write_png(base / mask_rel, rec.mask.astype(np.uint8) * 255)
            entries.append({"image": img_rel, "mask": mask_rel, **rec.meta()})
        splits[split] = entries
    manifest = {
        "version": MANIFEST_VERSION,
        "name": cfg.name,
        "correlation": cfg.correlation,
        "stage": stage_to_json(cfg.stage),
        "catalog": catalog_to_json(cfg.classes()),
        "splits": splits,
        "master_seed": cfg.master_seed,
        "generator": {
            "image_size": cfg.image_size,
            "sprite_size": cfg.sprite_size,
            "scale_range": list(cfg.scale_range),
            "center_jitter": cfg.center_jitter,
            "min_mask_fraction": cfg.min_mask_fraction,
            "resample_budget": cfg.resample_budget,
        },
    }
    path = base / "manifest.json"
    write_json(path, manifest)
    return path


@dataclass
class DatasetHandle:
    manifest: dict
    root: Path  # directory the manifest's relative paths resolve against

    @property
    def name(self) -> str:
        return self.manifest["name"]

    @property
    def catalog(self):
        return catalog_from_json(self.manifest["catalog"])

    @property
    def class_ids(self) -> list[int]:
        return [c["class_id"] for c in self.manifest["catalog"]]

    def records(self, split: str) -> list[dict]:
        return self.manifest["splits"][split]

    def __len__(self):
        return sum(len(v) for v in self.manifest["splits"].values())

    def load_sample(self, split: str, i: int):
        """(image float32 CHW in [0, 1], mask bool HW, record) for record ``i``."""
        rec = self.records(split)[i]
        img = read_png(self.root / rec["image"])
        mask = _check_mask(read_png(self.root / rec["mask"]), self.root / rec["mask"])
        if img.shape[:2] != mask.shape:
            raise DatasetError(f"image/mask extents differ for {rec['image']}")
        return img.transpose(2, 0, 1).astype(np.float32) / 255.0, mask, rec

    def arrays(self, split: str):
        """Stacked (X, y, masks) for a whole split."""
        recs = self.records(split)
        if not recs:
            raise DatasetError(f"{self.name}: split {split!r} is empty")
        xs, ms = [], []
        for i in range(len(recs)):
            x, m, _ = self.load_sample(split, i)
            xs.append(x)
            ms.append(m)
        y = np.array([r["class_id"] for r in recs])
        return np.stack(xs), y, np.stack(ms)

    def _view(self, name, keep_classes, per_class=None):
        keep = set(keep_classes)
        splits = {}
        for split, recs in self.manifest["splits"].items():
            out = [r for r in recs if r["class_id"] in keep]
            if per_class is not None:
                out = [r for r in out if r["index"] < per_class[split]]
            splits[split] = out
        m = dict(self.manifest, name=name, splits=splits,
                 catalog=[c for c in self.manifest["catalog"] if c["class_id"] in keep])
        return DatasetHandle(m, self.root)

    def shape_subset(self, shape: str) -> "DatasetHandle":
        return shape_subset(self, shape)

    def take_first(self, k_per_class: int, split: str | None = None) -> "DatasetHandle":
        """First ``k_per_class`` samples (by index) of each class, in every or one split."""
        counts = {s: (k_per_class if split in (None, s) else math.inf) for s in self.manifest["splits"]}
        return self._view(self.name, self.class_ids, counts)

    def save_manifest(self, path) -> Path:
        """Write this view as a standalone manifest; paths are rebased to ``path``."""
        path = Path(path)
        rel = Path(os.path.relpath(self.root, path.parent))
        splits = {
            s: [dict(r, image=(rel / r["image"]).as_posix(), mask=(rel / r["mask"]).as_posix())
                for r in recs]
            for s, recs in self.manifest["splits"].items()
        }
        write_json(path, dict(self.manifest, splits=splits))
        return path


def _check_mask(arr, path):
    if arr.ndim != 2:
        raise DatasetError(f"mask {path} is not single-channel")
    bad = (arr != 0) & (arr != 255)
    if bad.any():
        raise DatasetError(f"mask {path} is not bilevel (found value {int(arr[bad][0])})")
    return arr == 255


def load_dataset(manifest_path, check_masks: bool = True) -> DatasetHandle:
    """Open a manifest and validate it eagerly; image pixels stay on disk.

    Checks that every path resolves, class ids are in the catalog, rasters
    share extents and (``check_masks``) masks only contain 0 and 255.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(manifest_path)
    m = read_json(manifest_path)
    if m.get("version", 0) > MANIFEST_VERSION:
        raise UnsupportedFormat(f"manifest version {m.get('version')} is newer than {MANIFEST_VERSION}")
    for key in ("name", "correlation", "stage", "catalog", "splits", "master_seed"):
        if key not in m:
            raise DatasetError(f"manifest {manifest_path} lacks field {key!r}")
    root = manifest_path.parent
    ids = {c["class_id"] for c in m["catalog"]}
    for split, recs in m["splits"].items():
        for r in recs:
            if r["class_id"] not in ids:
                raise DatasetError(f"class {r['class_id']} of {r['image']} is not in the catalog")
            sizes = []
            for key in ("image", "mask"):
                p = root / r[key]
                if not p.exists():
                    raise DatasetError(f"missing file: {p}")
                try:
                    with Image.open(p) as im:
                        sizes.append(im.size)
                        if key == "mask" and check_masks:
                            _check_mask(np.asarray(im), p)
                except DatasetError:
                    raise
                except Exception as err:
                    raise DatasetError(f"cannot decode {p}: {err}") from err
            if sizes[0] != sizes[1]:
                raise DatasetError(f"image/mask extents differ for {r['image']}")
    return DatasetHandle(m, root)


def subset_name(name: str, shape: str) -> str:
    if shape not in SHAPE_LETTERS:
        raise ValueError(f"shape must be one of C, T, R; got {shape!r}")
    if len(name) == 3:
        if name[2] != shape:
            raise DatasetError(f"{name} is already restricted to another shape")
        return name
    return name + shape


def shape_subset(handle: DatasetHandle, shape: str) -> DatasetHandle:
    """Filtered view with the shape letter appended to the name (CM + T -> CMT)."""
    name = subset_name(handle.name, shape)
    keep = [c.class_id for c in handle.catalog if c.shape == SHAPE_LETTERS[shape]]
    if not keep:
        raise DatasetError(f"{handle.name} has no {SHAPE_LETTERS[shape]} classes")
    return handle._view(name, keep)


# ---------------------------------------------------------------- checkpoints

# tag -> (layer class, extent names); tag 0 is the input record
_TAGS = {1: "conv2d", 2: "relu", 3: "maxpool", 4: "flatten", 5: "dense"}
_KIND_TAG = {v: k for k, v in _TAGS.items()}


def checkpoint_bytes(model: nn.Model) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<HH", CHECKPOINT_VERSION, len(model.layers) + 1)]
    c, h, w = model.input_shape
    seed = model.rng_seed & 0xFFFFFFFFFFFFFFFF
    out.append(struct.pack("<B5I", 0, c, h, w, seed & 0xFFFFFFFF, seed >> 32))
    for layer in model.layers:
        tag = _KIND_TAG[layer.kind]
        if layer.kind == "conv2d":
            W = layer.params["W"]
            ext = (W.shape[0], W.shape[1], layer.kernel, layer.stride, layer.pad)
        elif layer.kind == "maxpool":
            ext = (layer.kernel, layer.stride)
        elif layer.kind == "dense":
            ext = layer.params["W"].shape
        else:
            ext = ()
        out.append(struct.pack(f"<B{len(ext)}I", tag, *ext))
        for name in ("W", "b"):
            if name in layer.params:
                out.append(np.ascontiguousarray(layer.params[name], dtype="<f4").tobytes())
    return b"".join(out)


_EXTENTS = {0: 5, 1: 5, 2: 0, 3: 2, 4: 0, 5: 2}


def model_from_bytes(data: bytes, dtype=np.float32) -> nn.Model:
    if len(data) < 8:
        raise UnsupportedFormat("checkpoint truncated")
    if data[:4] != CHECKPOINT_MAGIC:
        raise UnsupportedFormat(f"bad magic {data[:4]!r}; not a TNNC checkpoint")
    version, n_records = struct.unpack_from("<HH", data, 4)
    if version > CHECKPOINT_VERSION:
        raise UnsupportedFormat(f"checkpoint version {version} is newer than {CHECKPOINT_VERSION}")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise UnsupportedFormat("checkpoint truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    def take_f32(n):
        nonlocal pos
        if pos + 4 * n > len(data):
            raise UnsupportedFormat("checkpoint truncated")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos)
        pos += 4 * n
        return arr

    specs, params = [], []
    input_shape, seed = None, 0
    for _ in range(n_records):
        (tag,) = take("<B")
        if tag not in _EXTENTS:
            raise UnsupportedFormat(f"unknown layer tag {tag}")
        ext = take(f"<{_EXTENTS[tag]}I")
        if tag == 0:
            input_shape, seed = ext[:3], ext[3] | (ext[4] << 32)
        elif tag == 1:
            o, c, k, s, p = ext
            specs.append(nn.Conv2d(o, k, s, p))
            params.append({"W": take_f32(o * c * k * k).reshape(o, c, k, k), "b": take_f32(o)})
        elif tag == 2:
            specs.append(nn.ReLU())
            params.append({})
        elif tag == 3:
            specs.append(nn.MaxPool(*ext))
            params.append({})
        elif tag == 4:
            specs.append(nn.Flatten())
            params.append({})
        elif tag == 5:
            o, i = ext
            specs.append(nn.Dense(o))
            params.append({"W": take_f32(o * i).reshape(o, i), "b": take_f32(o)})
    if input_shape is None:
        raise UnsupportedFormat("checkpoint lacks an input record")
    if pos != len(data):
        raise UnsupportedFormat("trailing bytes after the last layer")
    model = nn.Model(specs, input_shape, seed=seed, dtype=dtype)
    for layer, p in zip(model.layers, params):
        for k, v in p.items():
            if layer.params[k].shape != v.shape:
                raise UnsupportedFormat(f"{layer.kind} parameter {k} has shape {v.shape}")
            layer.params[k] = v.astype(dtype)
    return model


def save_checkpoint(model: nn.Model, path):
    atomic_write_bytes(path, checkpoint_bytes(model))


def load_checkpoint(path, dtype=np.float32) -> nn.Model:
    return model_from_bytes(Path(path).read_bytes(), dtype=dtype)


def write_loss_log(path, log):
    rows = [(e.epoch, repr(float(e.loss)), repr(float(e.train_acc)),
             "" if math.isnan(e.val_acc) else repr(float(e.val_acc))) for e in log]
    write_csv(path, ("epoch", "loss", "train_acc", "val_acc"), rows)


# ---------------------------------------------------------------- runs

@dataclass
class RunRecord:
    experiment_id: str
    config: dict
    seeds: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    completed: list = field(default_factory=list)

    def save(self, path):
        write_json(path, asdict(self))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**read_json(path))


def write_jsonl(path, rows):
    write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
