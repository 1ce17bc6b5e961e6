import numpy as np
import pytest

from lesionkit.bookmarks import bbox_from_diameters
from lesionkit.datasets import LesionPatch, crop_patch
from lesionkit.evaluation import EvalReport
from lesionkit.raster import Raster
from lesionkit.synthetic import default_synthetic_spec, generate_synthetic_study, study_seed


def make_raster(values) -> Raster:
    return Raster.from_array(np.asarray(values, dtype=np.uint16))


# Stored reference values for the comparison-table renderer golden test:
# five clusters with their test-set sizes and top-1 accuracies under the
# single-class and multi-class configurations, plus the published overall rows.
TABLE1_NAMES = ["Liver lesion", "Lung nodule", "abdomen lesions", "Chest lymph node", "Mixed lesions"]
TABLE1_SIZES = [774, 837, 1270, 860, 1292]
TABLE1_ACC_SINGLE = [0.5604, 0.7330, 0.4879, 0.7077, 0.5485]
TABLE1_ACC_MULTI = [0.6059, 0.7634, 0.5622, 0.7628, 0.5867]
TABLE1_OVERALL_SINGLE = 0.5945
TABLE1_OVERALL_MULTI = 0.6430


def table1_reference_reports() -> tuple[EvalReport, EvalReport]:
    single = EvalReport(
        overall_top1_accuracy=TABLE1_OVERALL_SINGLE,
        per_cluster=[(i + 1, n, a) for i, (n, a) in enumerate(zip(TABLE1_SIZES, TABLE1_ACC_SINGLE))],
    )
    multi = EvalReport(
        overall_top1_accuracy=TABLE1_OVERALL_MULTI,
        per_cluster=[(i + 1, n, a) for i, (n, a) in enumerate(zip(TABLE1_SIZES, TABLE1_ACC_MULTI))],
    )
    return single, multi


@pytest.fixture(scope="session")
def synthetic_patches():
    """200 mined patches from the 5-class generator plus hidden true classes."""
    spec = default_synthetic_spec(num_studies=200, width=192, height=192)
    patches, truth = [], []
    for i in range(200):
        raster, blobs = generate_synthetic_study(spec, study_seed(314, i))
        blob = blobs[0]
        box = bbox_from_diameters(blob.diameters, spec.width, spec.height)
        patches.append(
            LesionPatch(source=(f"P{i:04d}", "S0", f"I{i:04d}"), box=box,
                        pixels=crop_patch(raster, box, 64))
        )
        truth.append(blob.true_class)
    return patches, np.asarray(truth)
