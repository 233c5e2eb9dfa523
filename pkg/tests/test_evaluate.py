import numpy as np
import pytest

from pairdiff.data import SyntheticSpec, generate_arrays
from pairdiff.errors import ContractError
from pairdiff.evaluate import (FEATURE_VERSION, EvalReport, diversity, evaluate, extract_lesions, fid_lite,
                               frechet_distance, image_features, iou, pair_consistency,
                               pair_consistency_scores)
from pairdiff.rng import Rng

# regression baselines on the default spec, seed 0
FID_SELF_512 = 0.0070540630028088636     # images[:512] vs images[512:1024]
DIVERSITY_256 = 0.9242382046417795       # masks[:256]


@pytest.fixture(scope="module")
def real():
    spec = SyntheticSpec(n_samples=1024)
    batch, _ = generate_arrays(spec)
    return spec, batch


def test_iou_basics():
    a = np.array([[1, 1, 0, 0]], bool)
    b = np.array([[0, 1, 1, 0]], bool)
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(a, a) == 1.0
    assert iou(np.zeros(4, bool), np.zeros(4, bool)) == 1.0


def test_real_pairs_score_high(real):
    spec, batch = real
    scores, empty = pair_consistency_scores(batch.masks[:300], batch.images[:300], spec)
    assert empty == 0
    assert scores.mean() >= 0.7


def test_all_negative_mask_scores_zero(real):
    spec, batch = real
    assert pair_consistency(-np.ones((16, 16)), batch.images[0], spec) == 0.0
    _, empty = pair_consistency_scores([-np.ones((16, 16))], [batch.images[0]], spec)
    assert empty == 1


def test_full_contrast_self_consistency(real):
    spec, batch = real
    ious = [pair_consistency(m, m, spec) for m in batch.masks[:100]]
    assert np.mean(ious) > 0.95


@pytest.mark.parametrize("shift", [-0.1, -0.03, 0.05, 0.1])
def test_constant_shift_invariance(real, shift):
    spec, batch = real
    for m, img in zip(batch.masks[:50], batch.images[:50]):
        assert pair_consistency(m, img + shift, spec) == pytest.approx(pair_consistency(m, img, spec), abs=1e-9)


def test_extractor_finds_nothing_in_flat_image(real):
    spec, _ = real
    assert not extract_lesions(np.full((16, 16), 0.2), spec).any()


def test_features_shape_and_version():
    f = image_features(np.zeros((3, 1, 16, 16)))
    assert f.shape == (3, 20)
    assert FEATURE_VERSION == 1
    with pytest.raises(ContractError):
        image_features(np.zeros((2, 10, 10)))


def test_frechet_closed_form_1d_like():
    mu1, mu2 = np.zeros(2), np.array([1.0, 2.0])
    c1, c2 = np.diag([1.0, 4.0]), np.diag([4.0, 1.0])
    # diagonal case: |mu1-mu2|^2 + sum (sqrt(a) - sqrt(b))^2
    want = 5.0 + (1 - 2) ** 2 + (2 - 1) ** 2
    assert frechet_distance(mu1, c1, mu2, c2) == pytest.approx(want, abs=1e-5)


def test_fid_identical_sets_zero(real):
    _, batch = real
    assert fid_lite(batch.images[:200], batch.images[:200]) < 1e-9


def test_fid_symmetry(real):
    _, batch = real
    a, b = batch.images[:300], batch.images[300:600]
    assert abs(fid_lite(a, b) - fid_lite(b, a)) < 1e-9


def test_fid_self_distance_regression(real):
    _, batch = real
    assert fid_lite(batch.images[:512], batch.images[512:]) == pytest.approx(FID_SELF_512, rel=1e-6)


def test_fid_separates_noise(real):
    _, batch = real
    noise = np.clip(Rng(1).normal((512, 1, 16, 16), np.float64) * 0.5, -1, 1)
    assert fid_lite(batch.images[:512], noise) >= 10 * FID_SELF_512


def test_fid_monotone_in_perturbation(real):
    _, batch = real
    a, b = batch.images[:400], batch.images[400:800]
    noise = Rng(2).normal(b.shape, np.float64)
    values = [fid_lite(a, b + amp * noise) for amp in (0.02, 0.1, 0.3)]
    assert values[0] <= values[1] <= values[2]


def test_fid_min_samples():
    with pytest.raises(ContractError):
        fid_lite(np.zeros((10, 16, 16)), np.zeros((100, 16, 16)))


def test_fid_singular_covariance_is_finite():
    flat = np.zeros((64, 16, 16))
    val = fid_lite(flat, flat + 0.5)
    assert np.isfinite(val) and val > 0


def test_diversity_extremes():
    m = np.where(np.arange(16).reshape(4, 4) < 5, 1.0, -1.0)
    assert diversity([m, m, m]) == 0.0
    a = -np.ones((4, 4))
    b = -np.ones((4, 4))
    a[0, 0], b[3, 3] = 1, 1
    assert diversity([a, b]) == 1.0
    with pytest.raises(ContractError):
        diversity([a])


def test_diversity_regression(real):
    _, batch = real
    assert diversity(batch.masks[:256]) == pytest.approx(DIVERSITY_256, rel=1e-12)


def test_evaluate_report_round_trip(real, tmp_path):
    spec, batch = real
    report = evaluate(batch.masks[:100], batch.images[:100], batch.images[100:300], spec, "abc")
    assert 0.7 <= report.pair_iou_mean <= 1 and report.n_samples == 100 and report.empty_masks == 0
    path = tmp_path / "report.txt"
    report.write(path)
    text = path.read_text()
    assert "config_hash = abc" in text
    assert any(line.startswith("metric\tfid_lite\t") for line in text.splitlines())
    assert EvalReport.read(path) == report


def test_report_validation():
    with pytest.raises(ContractError):
        EvalReport(1.5, 0, 0, 0, 1, 0).validate()
    with pytest.raises(ContractError):
        EvalReport(0.5, 0, -1, 0, 1, 0).validate()
