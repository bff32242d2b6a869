"""Experiment orchestration: datasets, training, evaluation, attribution, tables.

Every artifact lives under ``cfg.out``::

    datasets/<name>/manifest.json
    models/<train_set>/<train_set>_s<seed>_{final,best}.tnnc, _loss.csv, _train.json
    eval/<train_set>_s<seed>_<checkpoint>.json
    attributions/<method>/<train_set>_s<seed>_<eval_set>.jsonl (+ _maps.jsonl)
    tables/*.csv, permutation.json, runs/<id>/run.json

Each step writes its completion marker last, so an interrupted run resumes
by skipping the steps whose marker exists.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import attribution as attr
from . import io, nn, scene, stats

log = logging.getLogger("bgeffect")

FACTORIAL_STAGES = ("F", "M", "H")
FACTORIAL_CORRELATIONS = ("U", "C")
METHODS = {"ks": "kernel_shap", "gradcam": "gradcam"}
METHOD_TAGS = {"ks": "ks", "gradcam": "gc"}
CHECKPOINTS = ("final", "best")
EXECUTION_KEYS = ("out", "jobs", "dry_run", "force", "allow_partial")


class ValidationError(ValueError):
    """Bad configuration or inputs (CLI exit code 2)."""


class IncompleteFactorial(ValidationError):
    pass


@dataclass
class ExperimentConfig:
    # class catalog and rendering
    n_classes: int = 12
    n_both: int | None = None
    image_size: int = 64
    sprite_size: int = 64
    train_per_class: int = 200
    test_per_class: int = 100
    stages: tuple = FACTORIAL_STAGES
    correlations: tuple = FACTORIAL_CORRELATIONS
    subsets: bool = False  # gen only; the experiment always builds them
    subset_source: str = "CM"
    # model
    arch: str = "tinycnn"
    widths: tuple = (8, 16)
    # training
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    optimizer: str = "adam"
    seeds: tuple = (0, 1, 2)
    val_fraction: float = 0.0  # > 0: pick "best" on held-out train images, not the test split
    # attribution
    methods: tuple = ("ks", "gradcam")
    cell_size: int = 8
    n_samples: int = 1000
    baseline: float = 0.0
    eval_fraction: float = 1 / 3
    attribution_set: str = "CF"
    attribution_checkpoint: str = "final"
    antithetic: bool = True
    cam_layer: int | None = None
    attribution_dtype: str = "float64"
    # statistics
    ci_level: float = 0.95
    permutation_resamples: int = 9999
    ratio_denominator: str = "positive"
    # execution
    seed: int = 0
    out: str = "out"
    jobs: int = 1
    dry_run: bool = False
    force: bool = False
    allow_partial: bool = False

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = io.read_json(path)
        except json.JSONDecodeError as err:
            raise ValidationError(f"config {path} is not valid JSON: {err}") from err
        if not isinstance(d, dict):
            raise ValidationError(f"config {path} must hold a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def science(self) -> dict:
        """Config keys that affect results (execution knobs removed)."""
        return {k: v for k, v in self.to_dict().items() if k not in EXECUTION_KEYS}

    @property
    def experiment_id(self) -> str:
        blob = json.dumps(self.science(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def ci_z(self) -> float:
        # the conventional rounded quantile at 95 %, exact quantile otherwise
        return 1.96 if self.ci_level == 0.95 else float(norm.ppf(0.5 + self.ci_level / 2))

    @property
    def dataset_names(self) -> list[str]:
        return [c + s for s in self.stages for c in self.correlations]

    @property
    def subset_names(self) -> list[str]:
        return [self.subset_source + x for x in scene.SHAPE_LETTERS]

    @property
    def grid(self) -> attr.SuperpixelGrid:
        return attr.make_grid(self.image_size, self.image_size, self.cell_size)

    def validate(self):
        def need(ok, msg):
            if not ok:
                raise ValidationError(msg)

        need(set(self.stages) <= set(scene.STAGES) and self.stages, f"bad stages {self.stages}")
        need(set(self.correlations) <= set(scene.CORRELATIONS) and self.correlations,
             f"bad correlations {self.correlations}")
        try:
            scene.parse_name(self.subset_source)
            scene.parse_name(self.attribution_set)
        except ValueError as err:
            raise ValidationError(str(err)) from None
        need(len(self.subset_source) == 2 and len(self.attribution_set) == 2,
             "subset_source and attribution_set name whole datasets")
        need(self.n_classes >= 3, "need at least one class per shape")
        need(self.image_size >= 8 and self.sprite_size >= 32, "image_size >= 8, sprite_size >= 32")
        need(min(self.train_per_class, self.test_per_class) >= 1, "per-class counts must be positive")
        need(self.arch == "tinycnn", f"unknown arch {self.arch!r}")
        need(self.optimizer in nn.OPTIMIZERS, f"optimizer must be one of {sorted(nn.OPTIMIZERS)}")
        need(self.epochs >= 0 and self.lr >= 0 and self.batch_size >= 1, "bad training hyperparameters")
        need(len(self.seeds) >= 1 and len(set(self.seeds)) == len(self.seeds), "seeds must be distinct")
        need(set(self.methods) <= set(METHODS) and self.methods, f"methods must be in {sorted(METHODS)}")
        need(0 < self.eval_fraction <= 1, "eval_fraction must lie in (0, 1]")
        need(0 <= self.val_fraction < 1, "val_fraction must lie in [0, 1)")
        need(self.attribution_checkpoint in CHECKPOINTS, "attribution_checkpoint is final or best")
        need(self.attribution_dtype in ("float32", "float64"), "attribution_dtype is float32 or float64")
        need(self.ratio_denominator in ("positive", "absolute"), "ratio_denominator is positive or absolute")
        need(0 < self.ci_level < 1, "ci_level must lie in (0, 1)")
        need(self.permutation_resamples >= 1, "permutation_resamples must be positive")
        need(self.jobs >= 1, "jobs must be positive")
        try:
            grid = self.grid
        except ValueError as err:
            raise ValidationError(str(err)) from None
        if "ks" in self.methods:
            need(self.n_samples >= grid.M + 2, f"n_samples must be at least M + 2 = {grid.M + 2}")
        return self


# ---------------------------------------------------------------- seeds and plan

def derive_seed(*parts) -> int:
    """63-bit seed from a mix of integers and strings (strings via crc32)."""
    ints = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1, np.uint64)[0] >> np.uint64(1))


def train_seeds(cfg: ExperimentConfig, train_set: str, seed: int) -> tuple[int, int]:
    """(initialization seed, shuffling seed) for one training run."""
    return derive_seed(cfg.seed, "init", train_set, seed), derive_seed(cfg.seed, "shuffle", train_set, seed)


def counterpart(name: str) -> str:
    """Same stage (and shape), opposite correlation: CF <-> UF, CMT <-> UMT."""
    return {"U": "C", "C": "U"}[name[0]] + name[1:]


def eval_sets(cfg: ExperimentConfig, train_set: str) -> list[str]:
    out = [train_set]
    other = counterpart(train_set)
    if other[0] in cfg.correlations:
        out.append(other)
    return out


def attribution_target(cfg: ExperimentConfig, train_set: str) -> str:
    return cfg.attribution_set + train_set[2:]


def per_class_quota(fraction: float, n: int) -> int:
    # tiny epsilon so 1/3 of 600 is 200, not 201, despite float rounding
    return max(1, math.ceil(fraction * n - 1e-9))


def train_sets(cfg: ExperimentConfig, with_subsets: bool = True) -> list[str]:
    return cfg.dataset_names + (cfg.subset_names if with_subsets else [])


def build_plan(cfg: ExperimentConfig) -> dict:
    """Every step of the experiment with its derived seeds, in execution order."""
    gen = [{"dataset": n, "seed": scene.dataset_seed(cfg.seed, n)} for n in cfg.dataset_names]
    gen += [{"dataset": n, "view_of": cfg.subset_source, "seed": scene.dataset_seed(cfg.seed, n)}
            for n in cfg.subset_names]
    train, evals, attrs = [], [], []
    for ts in train_sets(cfg):
        for s in cfg.seeds:
            init, shuffle = train_seeds(cfg, ts, s)
            train.append({"train_set": ts, "seed": s, "init_seed": init, "shuffle_seed": shuffle})
            for ck in CHECKPOINTS:
                evals.append({"train_set": ts, "seed": s, "checkpoint": ck, "eval_sets": eval_sets(cfg, ts)})
            for m in cfg.methods:
                ev = attribution_target(cfg, ts)
                attrs.append({"train_set": ts, "seed": s, "method": m, "eval_set": ev,
                              "seed_base": derive_seed(cfg.seed, "attr", m, ts, s, ev)})
    return {"experiment_id": cfg.experiment_id, "master_seed": cfg.seed, "gen": gen,
            "train": train, "eval": evals, "attribute": attrs,
            "permutation_seed": derive_seed(cfg.seed, "permutation")}


# ---------------------------------------------------------------- paths

def dataset_manifest(out, name) -> Path:
    return Path(out) / "datasets" / name / "manifest.json"


def model_stem(out, train_set, seed) -> Path:
    return Path(out) / "models" / train_set / f"{train_set}_s{seed}"


def checkpoint_path(out, train_set, seed, kind) -> Path:
    return model_stem(out, train_set, seed).with_name(f"{train_set}_s{seed}_{kind}.tnnc")


def train_record_path(out, train_set, seed) -> Path:
    return model_stem(out, train_set, seed).with_name(f"{train_set}_s{seed}_train.json")


def eval_path(out, train_set, seed, kind) -> Path:
    return Path(out) / "eval" / f"{train_set}_s{seed}_{kind}.json"


def ratio_path(out, method, train_set, seed, eval_set) -> Path:
    return Path(out) / "attributions" / method / f"{train_set}_s{seed}_{eval_set}.jsonl"


def maps_path(ratios: Path) -> Path:
    return ratios.with_name(ratios.stem + "_maps.jsonl")


def _sidecar(model_path) -> Path:
    p = Path(model_path)
    stem = p.stem
    for kind in CHECKPOINTS:
        if stem.endswith("_" + kind):
            stem = stem[: -len(kind) - 1]
    return p.with_name(stem + "_train.json")


def model_class_ids(model_path, model: nn.Model) -> list[int]:
    """Class id of each output unit: from the training record, else 0..K-1."""
    side = _sidecar(model_path)
    if side.exists():
        return list(io.read_json(side)["class_ids"])
    return list(range(model.n_classes))


# ---------------------------------------------------------------- datasets

def dataset_config(cfg: ExperimentConfig, name: str) -> scene.DatasetConfig:
    return scene.DatasetConfig(
        name=name, catalog=scene.build_catalog(cfg.n_classes, cfg.n_both),
        train_per_class=cfg.train_per_class, test_per_class=cfg.test_per_class,
        master_seed=scene.dataset_seed(cfg.seed, name), image_size=cfg.image_size,
        sprite_size=cfg.sprite_size)


def cmd_gen(cfg: ExperimentConfig, subsets: bool | None = None) -> list[Path]:
    """Generate the requested factorial cells (and CM shape subsets); return manifest paths."""
    cfg.validate()
    subsets = cfg.subsets if subsets is None else subsets
    paths = []
    for name in cfg.dataset_names:
        path = dataset_manifest(cfg.out, name)
        if path.exists() and not cfg.force:
            log.info("dataset %s exists, skipping", name)
        else:
            t = time.perf_counter()
            io.generate_dataset(dataset_config(cfg, name), Path(cfg.out) / "datasets")
            log.info("generated %s in %.1fs", name, time.perf_counter() - t)
        paths.append(path)
    if subsets:
        src = dataset_manifest(cfg.out, cfg.subset_source)
        if not src.exists():
            io.generate_dataset(dataset_config(cfg, cfg.subset_source), Path(cfg.out) / "datasets")
        handle = None
        for name in cfg.subset_names:
            path = dataset_manifest(cfg.out, name)
            if not path.exists() or cfg.force:
                handle = handle or io.load_dataset(src)
                io.shape_subset(handle, name[2]).save_manifest(path)
            paths.append(path)
    return paths


_array_cache: dict = {}


def _arrays(handle: io.DatasetHandle, split: str):
    key = (str(handle.root.resolve()), handle.name, split, len(handle.records(split)))
    if key not in _array_cache:
        if len(_array_cache) > 8:
            _array_cache.clear()
        _array_cache[key] = handle.arrays(split)
    return _array_cache[key]


def _open(out, name) -> io.DatasetHandle:
    """Dataset ``name`` from ``out``; shape subsets fall back to a view of their parent."""
    path = dataset_manifest(out, name)
    if path.exists():
        return io.load_dataset(path)
    if len(name) == 3 and dataset_manifest(out, name[:2]).exists():
        return io.shape_subset(io.load_dataset(dataset_manifest(out, name[:2])), name[2])
    raise ValidationError(f"dataset {name} not found under {Path(out) / 'datasets'}")


# ---------------------------------------------------------------- training

def build_model(cfg: ExperimentConfig, n_classes: int, seed: int) -> nn.Model:
    return nn.tiny_cnn((3, cfg.image_size, cfg.image_size), n_classes, seed=seed, widths=cfg.widths)


def _labels(y, class_ids):
    lookup = {c: i for i, c in enumerate(class_ids)}
    return np.array([lookup[int(v)] for v in y])


def train_one(cfg: ExperimentConfig, handle: io.DatasetHandle, seed: int) -> Path:
    """Train one seed on ``handle``; returns the training record path (written last)."""
    name = handle.name
    record = train_record_path(cfg.out, name, seed)
    init_seed, shuffle_seed = train_seeds(cfg, name, seed)
    if record.exists() and not cfg.force:
        prev = io.read_json(record)
        want = {"init_seed": init_seed, "shuffle_seed": shuffle_seed, "epochs": cfg.epochs, "lr": cfg.lr,
                "optimizer": cfg.optimizer, "batch_size": cfg.batch_size}
        stale = sorted(k for k, v in want.items() if prev.get(k) != v)
        if stale:
            raise ValidationError(f"{record} was trained with different {', '.join(stale)}; pass --force")
        log.info("model %s seed %s exists, skipping", name, seed)
        return record
    class_ids = sorted(handle.class_ids)
    X, y, _ = _arrays(handle, "train")
    if cfg.val_fraction > 0:
        # last ceil(v * n) training images of each class (by index) become the validation set
        idx = np.array([r["index"] for r in handle.records("train")])
        held = idx >= cfg.train_per_class - per_class_quota(cfg.val_fraction, cfg.train_per_class)
        if held.all():
            raise ValidationError("val_fraction leaves no training images")
        X, y, Xv, yv = X[~held], y[~held], X[held], y[held]
    else:
        Xv, yv, _ = _arrays(handle, "test")
    if X.shape[1:] != (3, cfg.image_size, cfg.image_size):
        raise ValidationError(f"{name} holds {X.shape[2]}px images, config says {cfg.image_size}")
    model = build_model(cfg, len(class_ids), init_seed)
    t = time.perf_counter()
    res = nn.train(model, X, _labels(y, class_ids), epochs=cfg.epochs, lr=cfg.lr, seed=shuffle_seed,
                   batch_size=cfg.batch_size, optimizer=cfg.optimizer,
                   X_val=Xv, y_val=_labels(yv, class_ids))
    elapsed = time.perf_counter() - t
    io.save_checkpoint(res.final, checkpoint_path(cfg.out, name, seed, "final"))
    io.save_checkpoint(res.best, checkpoint_path(cfg.out, name, seed, "best"))
    loss_log = model_stem(cfg.out, name, seed).with_name(f"{name}_s{seed}_loss.csv")
    io.write_loss_log(loss_log, res.log)
    io.write_json(record, {
        "train_set": name, "seed": seed, "init_seed": init_seed, "shuffle_seed": shuffle_seed,
        "class_ids": class_ids, "epochs": cfg.epochs, "lr": cfg.lr, "optimizer": cfg.optimizer,
        "batch_size": cfg.batch_size, "best_epoch": res.best_epoch,
        "selection": "heldout" if cfg.val_fraction > 0 else "test",
        "final_checkpoint": checkpoint_path(cfg.out, name, seed, "final").name,
        "best_checkpoint": checkpoint_path(cfg.out, name, seed, "best").name,
        "loss_log": loss_log.name,
    })
    log.info("trained %s seed %s in %.1fs (best epoch %d)", name, seed, elapsed, res.best_epoch)
    return record


def cmd_train(manifest, cfg: ExperimentConfig) -> list[Path]:
    """Train every configured seed on one dataset; returns the checkpoint paths."""
    cfg.validate()
    handle = io.load_dataset(manifest)
    out = []
    for s in cfg.seeds:
        train_one(cfg, handle, s)
        out += [checkpoint_path(cfg.out, handle.name, s, k) for k in CHECKPOINTS]
    return out


# ---------------------------------------------------------------- evaluation

def evaluate_model(model: nn.Model, class_ids, handle: io.DatasetHandle) -> dict:
    X, y, _ = _arrays(handle, "test")
    missing = set(int(v) for v in y) - set(class_ids)
    if missing:
        raise ValidationError(f"{handle.name} holds classes {sorted(missing)} the model does not know")
    pred = np.asarray(class_ids)[nn.predict_batch(model, X)]
    per_class = {str(c): float(np.mean(pred[y == c] == c)) for c in sorted(set(int(v) for v in y))}
    return {"accuracy": stats.top1_accuracy(pred, y), "n": int(len(y)), "per_class": per_class}


def cmd_eval(model_path, datasets, out_path=None) -> dict:
    """Accuracy of one checkpoint on each test split in ``datasets`` (manifests or handles)."""
    model = io.load_checkpoint(model_path)
    class_ids = model_class_ids(model_path, model)
    results = {}
    for d in datasets:
        h = d if isinstance(d, io.DatasetHandle) else io.load_dataset(d)
        results[h.name] = evaluate_model(model, class_ids, h)
    report = {"model": Path(model_path).name, "results": results}
    side = _sidecar(model_path)
    if side.exists():
        rec = io.read_json(side)
        kind = Path(model_path).stem.rsplit("_", 1)[-1]
        report.update(train_set=rec["train_set"], seed=rec["seed"], checkpoint=kind)
    if out_path is not None:
        io.write_json(out_path, report)
    return report


# ---------------------------------------------------------------- attribution

def attribute_image(model, predict_fn, image, mask, cfg: ExperimentConfig, method: str, rng):
    grid = cfg.grid
    if method == "ks":
        amap = attr.kernel_shap(predict_fn, image, grid, n_samples=cfg.n_samples, baseline=cfg.baseline,
                                rng=rng, antithetic=cfg.antithetic)
    else:
        amap = attr.gradcam(model, image, cfg.cam_layer)
    try:
        ratio = stats.pixel_ratio(attr.expand_to_pixels(amap), mask, cfg.ratio_denominator)
        reason = None
    except stats.NoPositiveAttribution:
        ratio, reason = None, "no_positive_attribution"
    return amap, ratio, reason


def cmd_attribute(model_path, manifest, cfg: ExperimentConfig, method: str, fraction: float | None = None,
                  out_path=None, context: dict | None = None) -> Path:
    """Attribute the first ceil(fraction * n) test images per class; write ratio and map dumps.

    ``manifest`` may also be a DatasetHandle (e.g. an in-memory shape view).
    """
    cfg.validate()
    if method not in METHODS:
        raise ValidationError(f"method must be one of {sorted(METHODS)}")
    fraction = cfg.eval_fraction if fraction is None else fraction
    if not 0 < fraction <= 1:
        raise ValidationError("fraction must lie in (0, 1]")
    handle = manifest if isinstance(manifest, io.DatasetHandle) else io.load_dataset(manifest)
    model = io.load_checkpoint(model_path)
    class_ids = model_class_ids(model_path, model)
    per_class = max(sum(1 for r in handle.records("test") if r["class_id"] == c) for c in handle.class_ids)
    view = handle.take_first(per_class_quota(fraction, per_class), split="test")
    ctx = dict(context or {})
    ctx.setdefault("method", METHOD_TAGS[method])
    ctx.setdefault("eval_set", handle.name)
    seed_base = ctx.pop("seed_base", derive_seed(cfg.seed, "attr", method, Path(model_path).stem, handle.name))
    if out_path is None:
        out_path = Path(cfg.out) / "attributions" / method / f"{Path(model_path).stem}_{handle.name}.jsonl"
    out_path = Path(out_path)
    dtype = np.dtype(cfg.attribution_dtype)
    m_attr = model.astype(dtype)
    predict_fn = attr.make_predict_fn(m_attr, dtype=dtype)
    rows, dumps = [], []
    recs = view.records("test")
    if not recs:
        raise ValidationError(f"{handle.name}: no test images to attribute")
    for i, rec in enumerate(recs):
        image, mask, _ = view.load_sample("test", i)
        rng = np.random.default_rng([seed_base, rec["class_id"], rec["index"]])
        amap, ratio, reason = attribute_image(m_attr, predict_fn, image.astype(dtype), mask, cfg, method, rng)
        row = {"image": rec["image"], "class": rec["class_id"], "predicted": class_ids[amap.target_class],
               "ratio": ratio, **ctx}
        if reason:
            row["excluded_reason"] = reason
        rows.append(row)
        dumps.append({"image": rec["image"], **amap.to_dict()})
    io.write_jsonl(maps_path(out_path), dumps)
    io.write_jsonl(out_path, rows)  # completion marker, written last
    return out_path


# ---------------------------------------------------------------- statistics

def _check_complete(present: set, expected: set, what: str, allow_partial: bool):
    missing = sorted(expected - present)
    if missing and not allow_partial:
        shown = ", ".join("/".join(map(str, m)) for m in missing[:6])
        raise IncompleteFactorial(f"{what}: {len(missing)} missing cells ({shown}"
                                  f"{', ...' if len(missing) > 6 else ''}); pass --allow-partial to proceed")


def _write_table(path, summary, header=stats.RESULT_COLUMNS, extra=None):
    rows = stats.table_rows(summary)
    if extra:
        rows = [r + tuple(extra(s)) for r, s in zip(rows, summary)]
    io.write_csv(path, header, rows)
    return path


def accuracy_rows(reports, arch="tinycnn") -> list[dict]:
    rows = []
    for rep in reports:
        for ev, res in rep["results"].items():
            rows.append({"train_set": rep["train_set"], "eval_set": ev, "arch": f"{arch}_{rep['checkpoint']}",
                         "method": "top1", "value": res["accuracy"], "seed": rep["seed"],
                         "checkpoint": rep["checkpoint"]})
    return rows


def permutation_report(acc_rows, stages, resamples, seed, checkpoints=CHECKPOINTS) -> dict:
    """U-trained vs C-trained accuracy on the correlated test set, paired by (stage, checkpoint, seed)."""
    cell = {(r["train_set"], r["eval_set"], r["checkpoint"], r["seed"]): r["value"] for r in acc_rows}
    pairs = []
    for st in stages:
        for ck in checkpoints:
            for s in sorted({r["seed"] for r in acc_rows}):
                u = cell.get(("U" + st, "C" + st, ck, s))
                c = cell.get(("C" + st, "C" + st, ck, s))
                if u is not None and c is not None:
                    pairs.append({"stage": st, "checkpoint": ck, "seed": s, "u": u, "c": c})
    if len(pairs) < 2:
        raise IncompleteFactorial("permutation test needs at least two U/C accuracy pairs")
    rng = np.random.default_rng(seed)
    res = stats.paired_permutation_test([p["u"] for p in pairs], [p["c"] for p in pairs],
                                        resamples=resamples, rng=rng)
    return {**res.to_dict(), "test_set": "C<stage>", "pairs": pairs}


def ratio_rows(dumps, arch="tinycnn", catalog=None) -> list[dict]:
    """Pixel-ratio value rows; with ``catalog`` each image also feeds its shape-subset row."""
    shape_of = {c.class_id: c.shape for c in catalog} if catalog else {}
    letter = {v: k for k, v in scene.SHAPE_LETTERS.items()}
    rows = []
    for d in dumps:
        base = {"train_set": d["train_set"], "arch": arch, "method": d["method"], "value": d["ratio"],
                "seed": d["seed"]}
        rows.append({**base, "eval_set": d["eval_set"]})
        if shape_of and len(d["eval_set"]) == 2:
            rows.append({**base, "eval_set": d["eval_set"] + letter[shape_of[d["class"]]]})
    return rows


def cmd_stats(cfg: ExperimentConfig, accuracy_reports=(), ratio_dumps=(), out=None) -> dict:
    """Build the result tables from eval reports and ratio dumps (paths or loaded objects)."""
    out = Path(cfg.out if out is None else out)
    written = {}
    reports = [r if isinstance(r, dict) else io.read_json(r) for r in accuracy_reports]
    dumps = []
    for d in ratio_dumps:
        if not isinstance(d, list) and str(d).endswith("_maps.jsonl"):
            log.info("skipping attribution maps %s", d)
            continue
        rows = io.read_jsonl(d) if not isinstance(d, list) else d
        if not rows:
            raise ValidationError(f"ratio dump {d if not isinstance(d, list) else '<rows>'} is empty")
        dumps += rows
    if not reports and not dumps:
        raise ValidationError("nothing to summarize: no accuracy reports or ratio dumps given")
    z = cfg.ci_z
    full = set(cfg.stages) == set(FACTORIAL_STAGES) and set(cfg.correlations) == set(FACTORIAL_CORRELATIONS)
    if not full and not cfg.allow_partial:
        raise IncompleteFactorial("configuration covers only part of the 2x3 factorial; "
                                  "pass --allow-partial to proceed")
    seeds = set(cfg.seeds)
    six = [c + s for s in FACTORIAL_STAGES for c in FACTORIAL_CORRELATIONS]
    if reports:
        rows = accuracy_rows(reports, cfg.arch)
        present = {(r["train_set"], r["checkpoint"], r["seed"]) for r in rows}
        _check_complete(present, {(n, k, s) for n in six for k in CHECKPOINTS for s in seeds},
                        "accuracy table", cfg.allow_partial)
        table = [r for r in rows if r["train_set"] in six]
        if table:
            written["accuracy"] = _write_table(out / "tables" / "accuracy.csv", stats.summarize_table(table, z))
        runs = sorted((r["train_set"], r["eval_set"], r["checkpoint"], r["seed"], repr(r["value"])) for r in rows)
        io.write_csv(out / "tables" / "accuracy_runs.csv",
                     ("train_set", "eval_set", "checkpoint", "seed", "accuracy"), runs)
        perm = permutation_report(rows, [s for s in FACTORIAL_STAGES if s in cfg.stages],
                                  cfg.permutation_resamples, derive_seed(cfg.seed, "permutation"))
        io.write_json(out / "permutation.json", perm)
        written["permutation"] = out / "permutation.json"
    if dumps:
        catalog = scene.build_catalog(cfg.n_classes, cfg.n_both)
        for tag in sorted({d["method"] for d in dumps}):
            mine = [d for d in dumps if d["method"] == tag]
            main = [d for d in mine if d["train_set"] in six]
            present = {(d["train_set"], d["seed"]) for d in main}
            _check_complete(present, {(n, s) for n in six for s in seeds},
                            f"pixel ratio table ({tag})", cfg.allow_partial)
            if main:
                path = out / "tables" / f"pixel_ratio_{tag}.csv"
                written[f"pixel_ratio_{tag}"] = _write_table(
                    path, stats.summarize_table(ratio_rows(main, cfg.arch, catalog), z))
        shape_rows = [d for d in dumps if len(d["train_set"]) == 3]
        if shape_rows:
            written["shape_subsets"] = _shape_table(cfg, out, dumps, shape_rows, catalog, seeds, z)
        elif reports or dumps:
            _check_complete(set(), {(n,) for n in cfg.subset_names}, "shape subset table", cfg.allow_partial)
    return written


def _shape_table(cfg, out, dumps, shape_rows, catalog, seeds, z):
    present = {(d["train_set"], d["method"], d["seed"]) for d in shape_rows}
    tags = sorted({d["method"] for d in shape_rows})
    _check_complete(present, {(n, t, s) for n in cfg.subset_names for t in tags for s in seeds},
                    "shape subset table", cfg.allow_partial)
    summary = stats.summarize_table(ratio_rows(shape_rows, cfg.arch), z)
    ref_rows = ratio_rows([d for d in dumps if d["train_set"] == cfg.subset_source], cfg.arch, catalog)
    ref = {(r["eval_set"], r["method"]): r for r in stats.summarize_table(ref_rows, z)} if ref_rows else {}

    def extra(s):
        r = ref.get((s["eval_set"], s["method"]))
        if r is None:
            return ("", "", "")
        return (cfg.subset_source, f"{r['stat'].mean:.4f}", f"{s['stat'].mean - r['stat'].mean:+.4f}")

    header = stats.RESULT_COLUMNS + ("reference", "reference_mu", "delta")
    return _write_table(out / "tables" / "shape_subsets.csv", summary, header, extra)


# ---------------------------------------------------------------- experiment

def _run_train(args):
    cfg_dict, name, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    logging.basicConfig(level=logging.INFO)
    return str(train_one(cfg, _open(cfg.out, name), seed))


def _run_attribute(args):
    cfg_dict, job = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    path = ratio_path(cfg.out, job["method"], job["train_set"], job["seed"], job["eval_set"])
    if path.exists() and not cfg.force:
        return str(path)
    ck = checkpoint_path(cfg.out, job["train_set"], job["seed"], cfg.attribution_checkpoint)
    ctx = {"train_set": job["train_set"], "seed": job["seed"], "method": METHOD_TAGS[job["method"]],
           "eval_set": job["eval_set"], "seed_base": job["seed_base"]}
    return str(cmd_attribute(ck, _open(cfg.out, job["eval_set"]), cfg, job["method"], out_path=path,
                             context=ctx))


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


@dataclass
class _Progress:
    record: io.RunRecord
    path: Path
    started: dict = field(default_factory=dict)

    def done(self, step, artifacts, t0):
        if step not in self.record.completed:
            self.record.completed.append(step)
            self.record.timings[step] = round(time.perf_counter() - t0, 3)
        self.record.artifacts[step] = [str(a) for a in artifacts]
        self.record.save(self.path)


def cmd_experiment(cfg: ExperimentConfig) -> dict:
    """gen -> train -> eval -> attribute -> stats, resumable through runs/<id>/run.json."""
    cfg.validate()
    plan = build_plan(cfg)
    if cfg.dry_run:
        return plan
    out = Path(cfg.out)
    run_path = out / "runs" / cfg.experiment_id / "run.json"
    others = sorted(p.parent.name for p in (out / "runs").glob("*/run.json") if p.parent.name != cfg.experiment_id) \
        if (out / "runs").is_dir() else []
    if others and not cfg.force:
        raise ValidationError(f"{out} holds artifacts of experiment {others[0]}; "
                              "use a fresh --out or pass --force to overwrite")
    if run_path.exists() and not cfg.force:
        record = io.RunRecord.load(run_path)
        if record.config != cfg.science():
            raise ValidationError(f"{run_path} was produced by a different configuration")
    else:
        record = io.RunRecord(cfg.experiment_id, cfg.science(),
                              seeds={"master": cfg.seed, "datasets": {g["dataset"]: g["seed"] for g in plan["gen"]},
                                     "permutation": plan["permutation_seed"]})
    if cfg.force:
        record.completed.clear()
    prog = _Progress(record, run_path)
    cfg_dict = cfg.to_dict()

    t0 = time.perf_counter()
    manifests = cmd_gen(cfg, subsets=True)
    prog.done("gen", manifests, t0)

    t0 = time.perf_counter()
    jobs = [(cfg_dict, j["train_set"], j["seed"]) for j in plan["train"]]
    prog.done("train", _map(_run_train, jobs, cfg.jobs), t0)

    t0 = time.perf_counter()
    reports = []
    for j in plan["eval"]:
        path = eval_path(out, j["train_set"], j["seed"], j["checkpoint"])
        if not path.exists() or cfg.force:
            ck = checkpoint_path(out, j["train_set"], j["seed"], j["checkpoint"])
            cmd_eval(ck, [_open(out, e) for e in j["eval_sets"]], out_path=path)
        reports.append(path)
    prog.done("eval", reports, t0)

    t0 = time.perf_counter()
    dumps = _map(_run_attribute, [(cfg_dict, j) for j in plan["attribute"]], cfg.jobs)
    prog.done("attribute", dumps, t0)

    t0 = time.perf_counter()
    written = cmd_stats(cfg, reports, dumps)
    prog.done("stats", written.values(), t0)
    return {"run_record": run_path, **written}
