import json

import pytest

from bgeffect import cli, io
from bgeffect.harness import (ExperimentConfig, build_model, checkpoint_path, dataset_manifest, per_class_quota,
                              train_seeds)

TINY = {
    "n_classes": 6, "image_size": 16, "sprite_size": 32, "cell_size": 4,
    "train_per_class": 4, "test_per_class": 6, "epochs": 2, "seeds": [0, 1],
    "n_samples": 40, "eval_fraction": 0.34, "permutation_resamples": 99,
}


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    """A generated and trained tiny workspace shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    conf = root / "tiny.json"
    conf.write_text(json.dumps(TINY))
    out = root / "out"
    assert run("gen", "--config", conf, "--out", out) == 0
    for name in ("CF", "UF"):
        assert run("train", "--config", conf, "--out", out, "--dataset", dataset_manifest(out, name)) == 0
    return conf, out


# ---------------------------------------------------------------- exit codes and config

def test_usage_errors_exit_1(capsys):
    assert run() == 1
    assert run("frobnicate") == 1
    assert run("attribute", "--model", "m", "--dataset", "d", "--method", "lime") == 1
    assert run("gen", "--epochs", "ten") == 1
    assert "usage" in capsys.readouterr().err


def test_validation_errors_exit_2(tmp_path, conf, capsys):
    assert run("gen", "--out", tmp_path, "--epochs", "-1") == 2
    assert run("train", "--config", conf, "--dataset", tmp_path / "missing.json") == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochz": 3}))
    assert run("gen", "--config", bad) == 2
    assert "epochz" in capsys.readouterr().err


def test_runtime_errors_exit_3(tmp_path, conf):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("gen", "--config", conf, "--out", blocker / "sub") == 3


def test_precedence_defaults_file_flags(conf):
    p = cli.build_parser()
    assert cli.resolve_config(p.parse_args(["gen"])).epochs == ExperimentConfig().epochs
    assert cli.resolve_config(p.parse_args(["gen", "--config", str(conf)])).epochs == 2
    cfg = cli.resolve_config(p.parse_args(["gen", "--config", str(conf), "--epochs", "5", "--seeds", "3", "4",
                                           "--no-antithetic", "--ratio-denominator", "absolute"]))
    assert cfg.epochs == 5 and cfg.seeds == (3, 4) and cfg.antithetic is False
    assert cfg.ratio_denominator == "absolute" and cfg.image_size == 16


def test_dry_run_lists_seeds(conf, capsys, tmp_path):
    assert run("experiment", "--config", conf, "--out", tmp_path / "o", "--dry-run") == 0
    plan = json.loads(capsys.readouterr().out)
    assert not (tmp_path / "o").exists()
    assert len(plan["train"]) == 9 * 2
    first = plan["train"][0]
    cfg = ExperimentConfig.load(conf)
    assert (first["init_seed"], first["shuffle_seed"]) == train_seeds(cfg, first["train_set"], first["seed"])
    assert run("experiment", "--config", conf, "--dry-run", "--seed", "1") == 0
    other = json.loads(capsys.readouterr().out)
    assert other["train"][0]["init_seed"] != first["init_seed"]


# ---------------------------------------------------------------- steps

def test_gen_writes_six_manifests_and_subsets(tmp_path, conf):
    out = tmp_path / "o"
    assert run("gen", "--config", conf, "--out", out) == 0
    assert sorted(p.name for p in (out / "datasets").iterdir()) == ["CF", "CH", "CM", "UF", "UH", "UM"]
    assert run("gen", "--config", conf, "--out", out, "--subsets") == 0
    for n in ("CMC", "CMT", "CMR"):
        h = io.load_dataset(dataset_manifest(out, n))
        assert len(h.class_ids) == 2


def test_train_writes_seed_stamped_pairs(built):
    _, out = built
    for s in (0, 1):
        for k in ("final", "best"):
            assert checkpoint_path(out, "CF", s, k).exists()
    rec = io.read_json(checkpoint_path(out, "CF", 0, "final").with_name("CF_s0_train.json"))
    assert rec["class_ids"] == list(range(6)) and rec["epochs"] == 2


def test_train_resume_and_force(tmp_path, built):
    conf, out = built
    ck = checkpoint_path(out, "UF", 1, "final")
    before = ck.stat().st_mtime_ns
    assert run("train", "--config", conf, "--out", out, "--dataset", dataset_manifest(out, "UF")) == 0
    assert ck.stat().st_mtime_ns == before
    data = ck.read_bytes()
    assert run("train", "--config", conf, "--out", out, "--dataset", dataset_manifest(out, "UF"), "--force") == 0
    assert ck.stat().st_mtime_ns != before
    assert ck.read_bytes() == data  # retraining is deterministic


def test_epochs_zero_saves_initialization(tmp_path, built):
    conf, out = built
    o2 = tmp_path / "o"
    assert run("train", "--config", conf, "--out", o2, "--epochs", "0", "--seeds", "0",
               "--dataset", dataset_manifest(out, "CF")) == 0
    cfg = ExperimentConfig.load(conf).replace(epochs=0)
    init = build_model(cfg, 6, train_seeds(cfg, "CF", 0)[0])
    assert checkpoint_path(o2, "CF", 0, "final").read_bytes() == io.checkpoint_bytes(init)


def test_eval_own_and_counterpart(tmp_path, built, capsys):
    conf, out = built
    rep = tmp_path / "r.json"
    assert run("eval", "--model", checkpoint_path(out, "CF", 0, "best"), "--dataset",
               dataset_manifest(out, "CF"), dataset_manifest(out, "UF"), "--report", rep) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown == io.read_json(rep)
    assert set(shown["results"]) == {"CF", "UF"}
    assert shown["train_set"] == "CF" and shown["checkpoint"] == "best" and shown["seed"] == 0
    assert len(shown["results"]["UF"]["per_class"]) == 6 and shown["results"]["CF"]["n"] == 36


def test_attribute_quota_and_dumps(tmp_path, built):
    conf, out = built
    assert per_class_quota(1 / 3, 600) == 200 and per_class_quota(0.1, 60) == 6 and per_class_quota(0.01, 5) == 1
    ck = checkpoint_path(out, "UF", 0, "final")
    for method in ("ks", "gradcam"):
        dump = tmp_path / method / "d.jsonl"
        assert run("attribute", "--config", conf, "--out", out, "--model", ck, "--dataset",
                   dataset_manifest(out, "CF"), "--method", method, "--fraction", 1 / 3, "--dump", dump) == 0
        rows = io.read_jsonl(dump)
        assert len(rows) == 6 * 2
        assert {r["method"] for r in rows} == {"ks" if method == "ks" else "gc"}
        assert all(r["ratio"] is None or 0 <= r["ratio"] <= 1 for r in rows)
        maps = io.read_jsonl(dump.with_name("d_maps.jsonl"))
        assert [m["image"] for m in maps] == [r["image"] for r in rows]


def test_stats_rejects_empty_and_partial(tmp_path, conf):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert run("stats", "--config", conf, "--out", tmp_path, "--ratios", empty) == 2
    assert run("stats", "--config", conf, "--out", tmp_path) == 2
    rows = [{"train_set": "UF", "eval_set": "CF", "method": "ks", "seed": s, "ratio": 0.5 + s / 10, "class": 0}
            for s in (0, 1)]
    dump = tmp_path / "d.jsonl"
    io.write_jsonl(dump, rows)
    assert run("stats", "--config", conf, "--out", tmp_path, "--ratios", dump) == 2
    assert run("stats", "--config", conf, "--out", tmp_path, "--ratios", dump, "--allow-partial") == 0
    table = io.read_csv(tmp_path / "tables" / "pixel_ratio_ks.csv")
    assert {(r["train_set"], r["eval_set"]) for r in table} == {("UF", "CF"), ("UF", "CFC")}


# ---------------------------------------------------------------- full pipeline

@pytest.mark.slow
def test_experiment_deterministic_and_resumable(tmp_path, conf):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("experiment", "--config", conf, "--out", a) == 0
    assert run("experiment", "--config", conf, "--out", b) == 0
    for t in ("accuracy.csv", "pixel_ratio_ks.csv", "pixel_ratio_gc.csv", "shape_subsets.csv"):
        assert (a / "tables" / t).read_bytes() == (b / "tables" / t).read_bytes()
    assert (a / "permutation.json").read_bytes() == (b / "permutation.json").read_bytes()

    run_json = next((a / "runs").iterdir()) / "run.json"
    first = io.RunRecord.load(run_json)
    assert first.completed == ["gen", "train", "eval", "attribute", "stats"]
    ck = checkpoint_path(a, "CM", 1, "final")
    stamp = ck.stat().st_mtime_ns
    assert run("experiment", "--config", conf, "--out", a) == 0
    assert ck.stat().st_mtime_ns == stamp
    assert io.RunRecord.load(run_json).timings == first.timings
    # another configuration must not silently reuse these artifacts
    assert run("experiment", "--config", conf, "--out", a, "--epochs", "3") == 2
    assert run("train", "--config", conf, "--out", a, "--epochs", "3", "--dataset", dataset_manifest(a, "CF")) == 2


def test_float32_attribution_matches_float64(tmp_path, built):
    # well-posed regression (n_samples >> cells); near-singular draws amplify rounding
    conf, out = built
    ck = checkpoint_path(out, "CF", 1, "final")
    ratios = {}
    for dt in ("float64", "float32"):
        dump = tmp_path / f"{dt}.jsonl"
        assert run("attribute", "--config", conf, "--out", out, "--model", ck, "--dataset",
                   dataset_manifest(out, "CF"), "--method", "ks", "--dump", dump,
                   "--attribution-dtype", dt, "--n-samples", "400") == 0
        ratios[dt] = [r["ratio"] for r in io.read_jsonl(dump)]
    assert ratios["float32"] == pytest.approx(ratios["float64"], abs=1e-4)


def test_stats_skips_map_dumps(tmp_path, conf):
    rows = [{"train_set": "UF", "eval_set": "CF", "method": "gc", "seed": s, "ratio": 0.4, "class": 1}
            for s in (0, 1)]
    io.write_jsonl(tmp_path / "x.jsonl", rows)
    io.write_jsonl(tmp_path / "x_maps.jsonl", [{"image": "a", "values": [1.0]}])
    assert run("stats", "--config", conf, "--out", tmp_path, "--allow-partial",
               "--ratios", tmp_path / "x.jsonl", tmp_path / "x_maps.jsonl") == 0
    assert (tmp_path / "tables" / "pixel_ratio_gc.csv").exists()
