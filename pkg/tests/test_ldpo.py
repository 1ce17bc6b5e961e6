import numpy as np
import pytest

from conftest import make_raster
from lesionkit.bookmarks import BoundingBox
from lesionkit.clustering import purity
from lesionkit.datasets import LesionPatch
from lesionkit.encoder import EncoderConfig, MlpEncoder
from lesionkit.errors import ValidationError
from lesionkit.ldpo import (
    LdpoConfig,
    l2_normalize,
    read_pseudo_labels_csv,
    run_ldpo,
    write_history_csv,
    write_pseudo_labels_csv,
)


def constant_patches(n, value=3000, side=16):
    box = BoundingBox(left_x=0, top_y=0, width=side, height=side)
    pixels = make_raster(np.full((side, side), value))
    return [LesionPatch(source=(f"P{i}", "S", f"I{i}"), box=box, pixels=pixels) for i in range(n)]


@pytest.fixture(scope="module")
def quick_run(synthetic_patches):
    patches, truth = synthetic_patches
    config = LdpoConfig(seed=314, threshold=0.9)
    final, history, encoder = run_ldpo(patches, None, config)
    return final, history, encoder, truth, config


class TestRunLdpo:
    def test_too_few_patches(self):
        with pytest.raises(ValidationError):
            run_ldpo(constant_patches(10), None, LdpoConfig(seed=0))

    def test_identical_patches_terminate_at_iteration_one(self):
        patches = constant_patches(60)
        config = LdpoConfig(seed=1, threshold=0.9, k_range=(2, 4))
        final, history, _ = run_ldpo(patches, None, config)
        assert final.iteration == 1
        assert len(history) == 2
        assert final.agreement() == pytest.approx(1.0)

    def test_threshold_zero_stops_after_iteration_one(self, synthetic_patches):
        patches, _ = synthetic_patches
        config = LdpoConfig(seed=2, threshold=0.0)
        final, history, _ = run_ldpo(patches[:80], None, config)
        assert len(history) == 2
        assert final.iteration == 1

    def test_converges_and_recovers_true_classes(self, quick_run):
        final, history, _, truth, config = quick_run
        assert final.agreement() is not None and final.agreement() >= config.threshold
        assert len(history) <= config.max_iter + 1
        assert final.k == 5
        assert purity(final.assignments, truth) >= 0.95

    def test_history_invariants(self, quick_run):
        final, history, _, _, _ = quick_run
        ks = {s.k for s in history}
        assert ks == {final.k}
        for s in history:
            assert s.assignments.shape[0] == 200
            assert np.all((0 <= s.assignments) & (s.assignments < s.k))
            assert np.bincount(s.assignments, minlength=s.k).min() >= 1
            if s.iteration == 0:
                assert s.purity_vs_prev is None and s.nmi_vs_prev is None
            else:
                assert 0.0 <= s.purity_vs_prev <= 1.0
                assert 0.0 <= s.nmi_vs_prev <= 1.0

    def test_deterministic(self, synthetic_patches):
        patches, _ = synthetic_patches
        config = LdpoConfig(seed=9, threshold=0.9)
        a = run_ldpo(patches[:100], None, config)[0]
        b = run_ldpo(patches[:100], None, config)[0]
        assert np.array_equal(a.assignments, b.assignments)
        assert a.test_top1_accuracy == b.test_top1_accuracy

    def test_top1_trajectory_non_decreasing_after_warmup(self, synthetic_patches):
        """Held-out accuracy should not regress by more than 0.05 between
        consecutive iterations once the loop has warmed up. A single-restart
        clustering config keeps the loop running for several iterations."""
        patches, _ = synthetic_patches
        config = LdpoConfig(
            seed=21, threshold=0.99, kmeans_restarts=1,
            encoder=EncoderConfig(hidden_dim=64, epochs=2),
        )
        final, history, _ = run_ldpo(patches, None, config)
        assert final.agreement() >= config.threshold
        accs = [s.test_top1_accuracy for s in history]
        for prev, cur in zip(accs[1:], accs[2:]):
            assert cur >= prev - 0.05

    def test_existing_encoder_is_reused_and_returned(self, synthetic_patches):
        patches, _ = synthetic_patches
        enc = MlpEncoder(input_dim=64 * 64, hidden_dim=32, seed=5)
        config = LdpoConfig(seed=5, threshold=0.0)
        _, _, out = run_ldpo(patches[:60], enc, config)
        assert out is enc


def test_l2_normalize_handles_zero_rows():
    x = np.array([[3.0, 4.0], [0.0, 0.0]])
    out = l2_normalize(x)
    assert np.allclose(out[0], [0.6, 0.8])
    assert np.allclose(out[1], [0.0, 0.0])


def test_history_and_labels_csv(tmp_path, quick_run):
    final, history, _, _, _ = quick_run
    hist_path = tmp_path / "history.csv"
    write_history_csv(hist_path, history)
    lines = hist_path.read_text().strip().splitlines()
    assert lines[0] == "iter,k,purity,nmi,test_top1"
    assert len(lines) == len(history) + 1
    assert lines[1].split(",")[2] == ""  # iteration 0 has no agreement

    patches_stub = [
        LesionPatch(
            source=(f"P{i}", "S", f"I{i}"),
            box=BoundingBox(left_x=0, top_y=0, width=4, height=4),
            pixels=make_raster(np.zeros((4, 4))),
        )
        for i in range(final.assignments.shape[0])
    ]
    labels_path = tmp_path / "labels.csv"
    write_pseudo_labels_csv(labels_path, patches_stub, final.assignments)
    loaded = read_pseudo_labels_csv(labels_path)
    assert len(loaded) == final.assignments.shape[0]
    assert loaded[("P0", "S", "I0")] == int(final.assignments[0])


def test_config_from_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(
        '{"k_range": [2, 6], "threshold": 0.8, "max_iter": 12, "seed": 4,'
        ' "encoder": {"hidden_dim": 20, "epochs": 2}, "kmeans": {"max_iter": 50, "tol": 1e-5}}'
    )
    cfg = LdpoConfig.from_json(path)
    assert cfg.k_range == (2, 6)
    assert cfg.threshold == 0.8
    assert cfg.encoder.hidden_dim == 20
    assert cfg.kmeans_max_iter == 50
