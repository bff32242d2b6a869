import json
import os

import numpy as np
import pytest

from bgeffect import io, nn, scene


def tiny_cfg(name, n=6, train=4, test=3, size=16):
    return scene.DatasetConfig(name, scene.build_catalog(n), train, test, image_size=size, sprite_size=32)


@pytest.fixture(scope="module")
def cm(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return io.load_dataset(io.generate_dataset(tiny_cfg("CM"), root))


# ---------------------------------------------------------------- datasets

def test_round_trip_counts_and_arrays(cm):
    assert len(cm) == 6 * 4 + 6 * 3
    X, y, masks = cm.arrays("train")
    assert X.shape == (24, 3, 16, 16) and X.dtype == np.float32
    assert 0.0 <= X.min() and X.max() <= 1.0
    assert masks.dtype == bool and masks.shape == (24, 16, 16)
    assert sorted(set(y.tolist())) == list(range(6))
    img, mask, rec = cm.load_sample("train", 5)
    assert rec["class_id"] == y[5]
    assert np.array_equal(img, X[5]) and np.array_equal(mask, masks[5])


def test_png_round_trip(tmp_path):
    a = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    io.write_png(tmp_path / "a.png", a)
    assert np.array_equal(io.read_png(tmp_path / "a.png"), a)


def copy_manifest(handle, tmp_path, mutate):
    m = json.loads(json.dumps(handle.manifest))
    mutate(m)
    p = handle.root / f"mutant_{os.getpid()}_{tmp_path.name}.json"
    p.write_text(json.dumps(m))
    return p


def test_dangling_path_names_the_file(cm, tmp_path):
    def drop(m):
        m["splits"]["train"][2]["image"] = "train/0/nope.png"
    p = copy_manifest(cm, tmp_path, drop)
    with pytest.raises(io.DatasetError, match="nope.png"):
        io.load_dataset(p)


def test_non_bilevel_mask_rejected(cm, tmp_path):
    bad = np.zeros((16, 16), np.uint8)
    bad[3, 3] = 128
    io.write_png(cm.root / "bad_mask.png", bad)

    def swap(m):
        m["splits"]["test"][0]["mask"] = "bad_mask.png"
    p = copy_manifest(cm, tmp_path, swap)
    with pytest.raises(io.DatasetError, match="128"):
        io.load_dataset(p)
    io.load_dataset(p, check_masks=False)


def test_unknown_class_and_future_version(cm, tmp_path):
    def stray(m):
        m["splits"]["train"][0]["class_id"] = 99
    with pytest.raises(io.DatasetError):
        io.load_dataset(copy_manifest(cm, tmp_path, stray))

    def future(m):
        m["version"] = io.MANIFEST_VERSION + 1
    with pytest.raises(io.UnsupportedFormat):
        io.load_dataset(copy_manifest(cm, tmp_path, future))
    with pytest.raises(FileNotFoundError):
        io.load_dataset(tmp_path / "absent.json")


def test_shape_subset(cm):
    sub = cm.shape_subset("C")
    assert sub.name == "CMC"
    assert len(sub.class_ids) == 2
    assert all(c.shape == "circle" for c in sub.catalog)
    assert {r["class_id"] for r in sub.records("train")} == set(sub.class_ids)
    again = sub.shape_subset("C")
    assert again.name == "CMC" and again.manifest["splits"] == sub.manifest["splits"]
    with pytest.raises(io.DatasetError):
        sub.shape_subset("T")
    with pytest.raises(ValueError):
        cm.shape_subset("X")
    assert io.subset_name("CF", "T") == "CFT"


def test_take_first(cm):
    view = cm.take_first(2, split="test")
    assert len(view.records("test")) == 12 and len(view.records("train")) == 24
    assert max(r["index"] for r in view.records("test")) == 1


def test_saved_view_is_standalone(cm, tmp_path):
    p = cm.shape_subset("T").save_manifest(tmp_path / "sub" / "CMT.json")
    h = io.load_dataset(p)
    assert h.name == "CMT"
    X, _, _ = h.arrays("test")
    X0, _, _ = cm.shape_subset("T").arrays("test")
    assert np.array_equal(X, X0)


def test_subset_matches_direct_generation(cm, tmp_path):
    # a shape-filtered dataset renders the very same pixels as the filtered view
    direct = io.load_dataset(io.generate_dataset(tiny_cfg("CMC"), tmp_path))
    assert np.array_equal(direct.arrays("train")[0], cm.shape_subset("C").arrays("train")[0])


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    m = nn.tiny_cnn((3, 16, 16), 6, seed=4)
    io.save_checkpoint(m, tmp_path / "m.tnnc")
    back = io.load_checkpoint(tmp_path / "m.tnnc")
    x = np.random.default_rng(0).random((3, 3, 16, 16)).astype(np.float32)
    assert np.array_equal(nn.forward(m, x).logits, nn.forward(back, x).logits)
    assert io.checkpoint_bytes(back) == io.checkpoint_bytes(m)
    assert back.rng_seed == m.rng_seed
    assert (tmp_path / "m.tnnc").read_bytes()[:4] == b"TNNC"


def test_checkpoint_rejects_bad_input():
    data = io.checkpoint_bytes(nn.tiny_cnn((1, 8, 8), 2, seed=0))
    with pytest.raises(io.UnsupportedFormat, match="magic"):
        io.model_from_bytes(b"XXXX" + data[4:])
    future = data[:4] + (io.CHECKPOINT_VERSION + 1).to_bytes(2, "little") + data[6:]
    with pytest.raises(io.UnsupportedFormat, match="version"):
        io.model_from_bytes(future)
    for cut in (3, 20, len(data) - 1):
        with pytest.raises(io.UnsupportedFormat):
            io.model_from_bytes(data[:cut])
    with pytest.raises(io.UnsupportedFormat):
        io.model_from_bytes(data + b"\0")


# ---------------------------------------------------------------- misc writers

def test_atomic_write_leaves_no_temp(tmp_path):
    io.write_json(tmp_path / "a" / "x.json", {"b": 1, "a": [1, 2]})
    assert io.read_json(tmp_path / "a" / "x.json") == {"a": [1, 2], "b": 1}
    assert os.listdir(tmp_path / "a") == ["x.json"]


def test_atomic_write_failure_keeps_old_file(tmp_path):
    p = tmp_path / "x.txt"
    io.write_text(p, "old")

    class Boom:
        def __len__(self):
            raise RuntimeError

    with pytest.raises(TypeError):
        io.atomic_write_bytes(p, Boom())
    assert p.read_text() == "old"
    assert os.listdir(tmp_path) == ["x.txt"]


def test_loss_log_csv(tmp_path):
    log = [nn.EpochLog(1, 0.5, 0.25, float("nan")), nn.EpochLog(2, 0.125, 0.75, 0.5)]
    io.write_loss_log(tmp_path / "l.csv", log)
    rows = io.read_csv(tmp_path / "l.csv")
    assert rows[0] == {"epoch": "1", "loss": "0.5", "train_acc": "0.25", "val_acc": ""}
    assert float(rows[1]["loss"]) == 0.125


def test_run_record_and_jsonl(tmp_path):
    r = io.RunRecord("abc", {"seed": 0}, seeds={"UF_s0": [1, 2]}, completed=["gen:UF"])
    r.save(tmp_path / "run.json")
    assert io.RunRecord.load(tmp_path / "run.json") == r
    rows = [{"image": 0, "ratio": 0.5}, {"image": 1, "ratio": None}]
    io.write_jsonl(tmp_path / "d.jsonl", rows)
    assert io.read_jsonl(tmp_path / "d.jsonl") == rows
