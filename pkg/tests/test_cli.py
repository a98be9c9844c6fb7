import json
import subprocess
import sys
import time

import numpy as np
import pytest
import yaml

from segdistill.cli import main
from segdistill.guidance import read_feature_bank
from segdistill.masks import MaskDataset, compute_class_stats, distribution_report, read_histogram_cache

from conftest import three_record_maps, toy_config_dict


def run(*argv):
    return main([str(a) for a in argv])


def write_config(tmp_path, fixture_dir, **over):
    p = tmp_path / "toy.yaml"
    p.write_text(yaml.safe_dump(toy_config_dict(fixture_dir, **over)))
    return p


def test_ingest_and_stats(fixture_dir, tmp_path, capsys):
    cache = tmp_path / "hist.jsonl"
    assert run("ingest", "--dataset", fixture_dir, "--num-classes", 3, "--out", cache) == 0
    assert [r.id for r in read_histogram_cache(cache)] == ["m1", "m2", "m3"]
    out = tmp_path / "stats.json"
    assert run("stats", "--cache", cache, "--num-classes", 3, "--out", out) == 0
    ds = MaskDataset.from_arrays(three_record_maps(), 3)
    stats = compute_class_stats(ds.records, 3)
    expected = distribution_report(stats.image_freq, stats.present)
    payload = json.loads(out.read_text())
    assert payload["imbalance_factor"] == expected.imbalance_factor == 2.0
    assert f"IF={expected.imbalance_factor:.2f}" in capsys.readouterr().out


def test_stats_pixel_mode(fixture_dir, tmp_path):
    out = tmp_path / "s.json"
    assert run("stats", "--dataset", fixture_dir, "--num-classes", 3, "--mode", "pixel", "--out", out) == 0
    payload = json.loads(out.read_text())
    assert payload["mode"] == "pixel"
    assert payload["coverage"] == [64 + 32, 32 + 31, 32]


def test_stats_malformed_cache(tmp_path, capsys):
    cache = tmp_path / "bad.jsonl"
    cache.write_text('{"id": "a", "width": 1, "height": 1, "histogram": {"0": 1}, "ignored": 0}\n{oops\n')
    assert run("stats", "--cache", cache) == 2
    assert "2" in capsys.readouterr().err


def test_missing_path_is_usage_error(tmp_path):
    assert run("stats", "--dataset", tmp_path / "nope", "--num-classes", 3) == 2


def test_select_greedy_fixture(fixture_dir, tmp_path, capsys):
    out = tmp_path / "sel.json"
    argv = ["select", "--dataset", fixture_dir, "--num-classes", 3, "--strategy", "greedy",
            "--budget", 2, "--temperature", 0.5, "--out", out]
    assert run(*argv) == 0
    assert json.loads(out.read_text())["selected"] == ["m3", "m2"]


def test_select_budget_errors(fixture_dir):
    base = ["select", "--dataset", fixture_dir, "--num-classes", 3]
    assert run(*base, "--budget", 0) == 2
    assert run(*base, "--budget", 4) == 2
    assert run(*base) == 2


def test_select_ratio_floor(tmp_path):
    rows = [json.dumps({"id": f"r{i:03d}", "width": 1, "height": 1, "histogram": {str(i % 7): 1}, "ignored": 0})
            for i in range(250)]
    cache = tmp_path / "h.jsonl"
    cache.write_text("\n".join(rows) + "\n")
    out = tmp_path / "sel.json"
    assert run("select", "--cache", cache, "--ratio", 0.01, "--out", out) == 0
    assert len(json.loads(out.read_text())["selected"]) == 2  # floor(2.5)


def test_select_kcenter_needs_features(fixture_dir, tmp_path):
    assert run("select", "--dataset", fixture_dir, "--num-classes", 3, "--strategy", "kcenter", "--budget", 2) == 2
    feats = tmp_path / "f.txt"
    feats.write_text("dim 2\nm1 0 0\nm2 1 0\nm3 5 5\n")
    out = tmp_path / "k.json"
    for strategy in ("kcenter", "herding"):
        assert run("select", "--dataset", fixture_dir, "--num-classes", 3, "--strategy", strategy,
                   "--budget", 2, "--features", feats, "--out", out) == 0
    assert run("select", "--dataset", fixture_dir, "--num-classes", 3, "--strategy", "kcenter",
               "--budget", 2, "--features", feats, "--out", out) == 0
    assert json.loads(out.read_text())["selected"] == ["m1", "m3"]


def test_select_random_seeded(fixture_dir, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.json"
        assert run("select", "--dataset", fixture_dir, "--num-classes", 3, "--strategy", "random",
                   "--budget", 2, "--seed", 5, "--out", out) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_distill_end_to_end(fixture_dir, tmp_path, capsys):
    cfg = write_config(tmp_path, fixture_dir)
    t0 = time.perf_counter()
    assert run("distill", "--config", cfg, "--out", tmp_path / "o1") == 0
    assert time.perf_counter() - t0 < 60
    assert run("distill", "--config", cfg, "--out", tmp_path / "o2") == 0
    assert run("distill", "--config", cfg, "--out", tmp_path / "o3", "--jobs", 2) == 0
    out = capsys.readouterr().out
    assert "m3: ok" in out and "m2: ok" in out
    files = sorted(p.relative_to(tmp_path / "o1") for p in (tmp_path / "o1").rglob("*") if p.is_file())
    assert {str(f) for f in files} >= {"manifest.json", "report.json", "images/m3.npy", "labels/m2.png"}
    for f in files:
        if f.name == "report.json":  # carries wall-clock timings
            continue
        assert (tmp_path / "o1" / f).read_bytes() == (tmp_path / "o2" / f).read_bytes(), f
        if f.parts[0] in ("images", "labels", "previews"):
            assert (tmp_path / "o1" / f).read_bytes() == (tmp_path / "o3" / f).read_bytes(), f
    manifest = json.loads((tmp_path / "o1" / "manifest.json").read_text())
    assert [s["id"] for s in manifest["samples"]] == ["m3", "m2"]
    assert len(manifest["samples"][0]["trace"]) == 10


def test_distill_dry_run_writes_nothing(fixture_dir, tmp_path):
    cfg = write_config(tmp_path, fixture_dir)
    assert run("distill", "--config", cfg, "--out", tmp_path / "dry", "--dry-run") == 0
    assert not (tmp_path / "dry").exists()


def test_distill_bad_key(fixture_dir, tmp_path, capsys):
    cfg = write_config(tmp_path, fixture_dir, sampler={"stepz": 3})
    assert run("distill", "--config", cfg, "--dry-run") == 2
    assert "sampler.stepz" in capsys.readouterr().err


def test_bank_toy_round_trip_and_jobs(fixture_dir, tmp_path):
    cfg = write_config(tmp_path, fixture_dir)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run("bank", "--config", cfg, "--toy-extractor", "--jobs", 1, "--out", a) == 0
    assert run("bank", "--config", cfg, "--toy-extractor", "--jobs", 3, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    assert read_feature_bank(a).counts[(0, 0)] == 2


def test_bank_images_and_geometry_mismatch(fixture_dir, tmp_path, capsys):
    cfg = write_config(tmp_path, fixture_dir, models={"latent_channels": 3})
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    rng = np.random.default_rng(0)
    for rid in ("m1", "m2", "m3"):
        np.save(imgs / f"{rid}.npy", rng.normal(size=(3, 8, 8)))
    assert run("bank", "--config", cfg, "--images", imgs, "--out", tmp_path / "bank.json") == 0
    np.save(imgs / "m2.npy", rng.normal(size=(3, 4, 8)))
    assert run("bank", "--config", cfg, "--images", imgs, "--out", tmp_path / "bank2.json") == 1
    assert "m2" in capsys.readouterr().err


def test_console_entry_point(fixture_dir):
    proc = subprocess.run([sys.executable, "-m", "segdistill.cli", "select", "--dataset", str(fixture_dir),
                           "--num-classes", "3", "--budget", "0"], capture_output=True, text=True)
    assert proc.returncode == 2 and "budget" in proc.stderr
