import json
import math

import pytest

from novis import synth, tracker
from novis.cli import SWEEP_FIELDS, main


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen", "--out", str(data), "--num-train", "3", "--num-val", "2",
                 "--num-frames", "8", "--seed", "4"]) == 0
    ck = root / "ck"
    assert main(["train", "--data", str(data), "--out", str(ck), "--steps", "3"]) == 0
    return root, data, ck


def snapshot(folder, pattern):
    return {p.name: p.read_bytes() for p in sorted(folder.glob(pattern))}


def read_log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_gen_defaults_and_determinism(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "a"), "--num-train", "2", "--num-val", "1"]) == 0
    assert main(["gen", "--out", str(tmp_path / "b"), "--num-train", "2", "--num-val", "1"]) == 0
    a, b = synth.load_dataset(tmp_path / "a"), synth.load_dataset(tmp_path / "b")
    assert len(a.videos) == 3 and a.videos[0].frames.shape == (24, 64, 64, 3)
    for x, y in zip(a.videos, b.videos):
        assert x.frames.tobytes() == y.frames.tobytes() and x.masks.tobytes() == y.masks.tobytes()


@pytest.mark.parametrize("k", ["0", "4"])
def test_gen_invalid_class_count_is_usage_error(tmp_path, k):
    assert main(["gen", "--out", str(tmp_path / "x"), "--num-classes", k]) == 2


def test_unknown_flag_is_usage_error(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--bogus"]) == 2


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"num_train": 1, "num_val": 1, "num_frames": 5}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d"), "--num-frames", "6"]) == 0
    ds = synth.load_dataset(tmp_path / "d")
    assert len(ds.videos) == 2 and ds.videos[0].num_frames == 6


def test_config_unknown_key_rejected(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"frames": 5}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2


def test_train_one_step_log(tmp_path, work):
    _, data, _ = work
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "c"), "--steps", "1"]) == 0
    recs = read_log(tmp_path / "c" / "train_log.jsonl")
    assert len(recs) == 1 and recs[0]["step"] == 0
    assert all(math.isfinite(recs[0][k]) for k in ("total", "class", "mask", "dice"))


def test_step_zero_loss_matches_uniform_closed_forms(tmp_path):
    # single-object clips; the fresh model's logits are close to uniform so each
    # decoder layer contributes about w_cls*ln(K+1) and w_mask*ln2
    data = tmp_path / "one"
    assert main(["gen", "--out", str(data), "--num-train", "2", "--num-val", "1", "--num-frames", "8",
                 "--min-objects", "1", "--max-objects", "1"]) == 0
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "c"), "--steps", "1"]) == 0
    rec = read_log(tmp_path / "c" / "train_log.jsonl")[0]
    layers = 6
    assert rec["class"] == pytest.approx(layers * 2.0 * math.log(4), rel=0.05)
    assert rec["mask"] == pytest.approx(layers * 5.0 * math.log(2), rel=0.1)
    assert 0 < rec["dice"] <= layers * 5.0


def test_train_same_seed_same_log(tmp_path, work):
    _, data, ck = work
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "c"), "--steps", "3"]) == 0
    assert (tmp_path / "c" / "train_log.jsonl").read_bytes() == (ck / "train_log.jsonl").read_bytes()
    assert snapshot(tmp_path / "c", "*.nvt") == snapshot(ck, "*.nvt")


def test_train_refuses_existing_checkpoint(work):
    _, data, ck = work
    before = snapshot(ck, "*")
    assert main(["train", "--data", str(data), "--out", str(ck), "--steps", "1"]) == 1
    assert snapshot(ck, "*") == before


def test_train_force_overwrites(tmp_path, work):
    _, data, _ = work
    out = tmp_path / "c"
    assert main(["train", "--data", str(data), "--out", str(out), "--steps", "1"]) == 0
    assert main(["train", "--data", str(data), "--out", str(out), "--steps", "2", "--force"]) == 0
    assert len(read_log(out / "train_log.jsonl")) == 2


def test_train_clip_len_beyond_table(tmp_path, work):
    _, data, _ = work
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "c"), "--clip-len", "9"]) == 2


def test_infer_online_equals_unit_clip(tmp_path, work):
    _, data, ck = work
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["infer", "--checkpoint", str(ck), "--data", str(data), "--out", str(a),
                 "--mode", "online"]) == 0
    assert main(["infer", "--checkpoint", str(ck), "--data", str(data), "--out", str(b),
                 "--mode", "embedding", "--clip-len", "1", "--stride", "1"]) == 0
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


@pytest.mark.parametrize("flags", [["--mode", "nope"], ["--clip-len", "2", "--stride", "3"],
                                   ["--split", "test"]])
def test_infer_bad_args(tmp_path, work, flags):
    _, data, ck = work
    assert main(["infer", "--checkpoint", str(ck), "--data", str(data), "--out", str(tmp_path / "p"),
                 *flags]) == 2


def test_infer_missing_checkpoint(tmp_path, work):
    _, data, _ = work
    assert main(["infer", "--checkpoint", str(tmp_path / "none"), "--data", str(data),
                 "--out", str(tmp_path / "p")]) == 1


def test_eval_ground_truth_copy_and_empty(tmp_path, work):
    _, data, _ = work
    videos = synth.load_dataset(data).split("val")
    from novis.cli import ground_truth
    gts = ground_truth(videos)
    results = {v.video_id: (v.num_frames, v.frames.shape[1], v.frames.shape[2], gts[v.video_id])
               for v in videos}
    tracker.save_tracks(tmp_path / "gt", results)
    assert main(["eval", "--pred", str(tmp_path / "gt"), "--data", str(data),
                 "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["AP"] == 1.0 and rep["AR10"] == 1.0
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "AP,AP50,AP75,AR1,AR10" and lines[1].startswith("1.000000")

    empty = {vid: (r[0], r[1], r[2], []) for vid, r in results.items()}
    tracker.save_tracks(tmp_path / "empty", empty)
    assert main(["eval", "--pred", str(tmp_path / "empty"), "--data", str(data),
                 "--out", str(tmp_path / "e.json"), "--csv", str(tmp_path / "e2.csv")]) == 0
    assert json.loads((tmp_path / "e.json").read_text())["AP"] == 0.0
    assert (tmp_path / "e2.csv").exists()


def test_sweep_rows_and_determinism(tmp_path, work, monkeypatch):
    _, data, ck = work
    args = ["sweep", "--checkpoint", str(ck), "--data", str(data), "--grid", "1:1:embedding,4:2:overlap",
            "--seeds", "0,1"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    monkeypatch.setenv("NOVIS_THREADS", "2")
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    text = (tmp_path / "a.csv").read_text()
    assert text == (tmp_path / "b.csv").read_text()
    rows = text.splitlines()
    assert rows[0] == ",".join(SWEEP_FIELDS) and len(rows) == 5
    assert rows[1].startswith("1,1,embedding,0,") and rows[4].startswith("4,2,overlap,1,")
    assert all(0.0 <= float(x) <= 1.0 for r in rows[1:] for x in r.split(",")[4:])


def test_sweep_seed_placeholder_missing(tmp_path, work):
    _, data, _ = work
    assert main(["sweep", "--checkpoint", str(tmp_path / "ck_{seed}"), "--data", str(data),
                 "--out", str(tmp_path / "s.csv")]) == 1


def test_sweep_bad_grid(tmp_path, work):
    _, data, ck = work
    assert main(["sweep", "--checkpoint", str(ck), "--data", str(data), "--out", str(tmp_path / "s.csv"),
                 "--grid", "4:x:embedding"]) == 2


def test_module_entry_point():
    import subprocess, sys
    r = subprocess.run([sys.executable, "-m", "novis", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "sweep" in r.stdout
