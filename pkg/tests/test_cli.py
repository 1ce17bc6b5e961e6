import json

import pytest

from lesionkit.cli import main
from lesionkit.detector import init_detector, save_checkpoint
from lesionkit.evaluation import read_detections_csv
from lesionkit.synthetic import default_synthetic_spec


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One small synth -> mine -> categorize -> train -> detect -> evaluate run."""
    root = tmp_path_factory.mktemp("pipeline")
    spec = default_synthetic_spec(num_studies=12)
    (root / "spec.json").write_text(spec.to_json())
    assert main(["synth", "--config", str(root / "spec.json"), "--seed", "3",
                 "--out", str(root / "synth")]) == 0
    assert main(["mine", str(root / "synth" / "bookmarks.jsonl"),
                 "--out", str(root / "mine")]) == 0

    ldpo_cfg = {
        "k_range": [2, 6], "threshold": 0.0, "max_iter": 5, "seed": 3,
        "min_patches": 10, "encoder": {"hidden_dim": 32, "epochs": 1},
        "kmeans": {"restarts": 2},
    }
    (root / "ldpo.json").write_text(json.dumps(ldpo_cfg))
    assert main(["categorize", "--manifest", str(root / "mine" / "manifest.csv"),
                 "--rasters", str(root / "synth" / "rasters"),
                 "--config", str(root / "ldpo.json"),
                 "--out", str(root / "categorize")]) == 0

    train_cfg = {"max_iterations": 25, "lr_decay_every": 10, "seed": 3}
    (root / "train.json").write_text(json.dumps(train_cfg))
    assert main(["train", "--manifest", str(root / "mine" / "manifest.csv"),
                 "--rasters", str(root / "synth" / "rasters"),
                 "--labels", str(root / "categorize" / "pseudo_labels.csv"),
                 "--config", str(root / "train.json"),
                 "--out", str(root / "train")]) == 0
    assert main(["detect", "--model", str(root / "train" / "model.ckpt"),
                 "--rasters", str(root / "synth" / "rasters"),
                 "--out", str(root / "detect")]) == 0
    assert main(["evaluate", "--detections", str(root / "detect" / "detections.csv"),
                 "--gt", str(root / "mine" / "manifest.csv"),
                 "--labels", str(root / "categorize" / "pseudo_labels.csv"),
                 "--out", str(root / "eval")]) == 0
    return root


class TestPipeline:
    def test_outputs_exist_with_run_json(self, pipeline):
        for sub in ("synth", "mine", "categorize", "train", "detect", "eval"):
            assert (pipeline / sub / "run.json").is_file(), sub
        assert (pipeline / "mine" / "manifest.csv").is_file()
        assert (pipeline / "categorize" / "history.csv").is_file()
        assert (pipeline / "train" / "loss_trace.csv").is_file()
        assert (pipeline / "eval" / "iou_curve.csv").is_file()
        assert (pipeline / "eval" / "summary.csv").is_file()

    def test_manifest_has_all_rows(self, pipeline):
        lines = (pipeline / "mine" / "manifest.csv").read_text().strip().splitlines()
        assert len(lines) == 13  # header + one box per study

    def test_detections_capped_at_five_per_image(self, pipeline):
        dets = read_detections_csv(pipeline / "detect" / "detections.csv")
        for image_id, rows in dets.items():
            assert len(rows) <= 5
            for d in rows:
                assert d.score > 0.5

    def test_report_renders_table(self, pipeline):
        out = pipeline / "report"
        assert main(["report", "--single", str(pipeline / "eval"),
                     "--multi", str(pipeline / "eval"), "--out", str(out)]) == 0
        table = (out / "table1.csv").read_text().splitlines()
        assert table[0] == "cluster,size,acc_single,acc_multi"
        assert table[-1].startswith("overall,12,")

    def test_evaluate_byte_identical_on_rerun(self, pipeline, tmp_path):
        out = tmp_path / "eval2"
        assert main(["evaluate", "--detections", str(pipeline / "detect" / "detections.csv"),
                     "--gt", str(pipeline / "mine" / "manifest.csv"),
                     "--labels", str(pipeline / "categorize" / "pseudo_labels.csv"),
                     "--out", str(out)]) == 0
        for name in ("iou_curve.csv", "summary.csv", "clusters.csv"):
            assert (out / name).read_bytes() == (pipeline / "eval" / name).read_bytes()

    def test_synth_idempotent(self, pipeline, tmp_path):
        spec_path = pipeline / "spec.json"
        assert main(["synth", "--config", str(spec_path), "--seed", "3",
                     "--out", str(tmp_path / "again")]) == 0
        a = (pipeline / "synth" / "bookmarks.jsonl").read_bytes()
        b = (tmp_path / "again" / "bookmarks.jsonl").read_bytes()
        assert a == b
        img = sorted((pipeline / "synth" / "rasters").glob("*.pgm"))[0]
        img2 = tmp_path / "again" / "rasters" / img.name
        assert img.read_bytes() == img2.read_bytes()


class TestExitCodes:
    def test_mine_missing_file(self, tmp_path):
        assert main(["mine", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]) == 2

    def test_mine_bad_line_warns_but_succeeds(self, tmp_path, capsys):
        bookmarks = tmp_path / "bm.jsonl"
        bookmarks.write_text(
            '{"patient_id":"P","study_id":"S","image_id":"I","image_w":512,'
            '"image_h":512,"d1":[10,10,40,40],"d2":[15,35,35,15]}\n'
            "garbage\n"
        )
        assert main(["mine", str(bookmarks), "--out", str(tmp_path / "o")]) == 0
        assert "1 rejected" in capsys.readouterr().err
        rows = (tmp_path / "o" / "manifest.csv").read_text().strip().splitlines()
        assert len(rows) == 2
        rejections = (tmp_path / "o" / "rejections.csv").read_text().strip().splitlines()
        assert len(rejections) == 2

    def test_categorize_too_few_patches(self, pipeline, tmp_path):
        assert main(["categorize", "--manifest", str(pipeline / "mine" / "manifest.csv"),
                     "--rasters", str(pipeline / "synth" / "rasters"),
                     "--out", str(tmp_path / "o")]) == 1  # default min_patches is 50

    def test_train_zero_iterations_equals_init(self, pipeline, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"max_iterations": 0, "seed": 11}')
        out = tmp_path / "train0"
        assert main(["train", "--manifest", str(pipeline / "mine" / "manifest.csv"),
                     "--rasters", str(pipeline / "synth" / "rasters"),
                     "--config", str(cfg), "--out", str(out)]) == 0
        reference = tmp_path / "ref.ckpt"
        save_checkpoint(init_detector(n_classes=1, seed=11), reference)
        assert (out / "model.ckpt").read_bytes() == reference.read_bytes()

    def test_train_corrupt_resume(self, pipeline, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"junkjunkjunk")
        assert main(["train", "--manifest", str(pipeline / "mine" / "manifest.csv"),
                     "--rasters", str(pipeline / "synth" / "rasters"),
                     "--resume", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_detect_class_mismatch(self, pipeline, tmp_path):
        assert main(["detect", "--model", str(pipeline / "train" / "model.ckpt"),
                     "--rasters", str(pipeline / "synth" / "rasters"),
                     "--expect-classes", "99", "--out", str(tmp_path / "o")]) == 1

    def test_detect_empty_raster_dir(self, pipeline, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        out = tmp_path / "o"
        assert main(["detect", "--model", str(pipeline / "train" / "model.ckpt"),
                     "--rasters", str(empty), "--out", str(out)]) == 0
        assert (out / "detections.csv").read_text().strip().splitlines() == [
            "image_id,class_index,score,left_x,top_y,width,height"
        ]

    def test_evaluate_unknown_image_ids(self, pipeline, tmp_path):
        rogue = tmp_path / "dets.csv"
        rogue.write_text(
            "image_id,class_index,score,left_x,top_y,width,height\n"
            "GHOST,1,0.900000,10.00,10.00,50.00,50.00\n"
        )
        assert main(["evaluate", "--detections", str(rogue),
                     "--gt", str(pipeline / "mine" / "manifest.csv"),
                     "--out", str(tmp_path / "o")]) == 1
