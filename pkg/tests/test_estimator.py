"""Estimator facade tests.

Fitting is expensive relative to the rest of the suite, so the fitted
instance is shared module-wide and the tests only assert structural
contracts (shapes, threshold, bit assignment); detection quality on a
real benchmark belongs to the acceptance suite.
"""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from raad.data import DefectSpec, SceneSpec, inject_defect, render_normal
from raad.errors import DimensionError, ParameterError
from raad.estimator import RaadDetector
from raad.rng import Rng, derive

SIZE = 32
SPEC = SceneSpec(image_size=SIZE)
DEFECT = DefectSpec(size_min=2, size_max=4, margin=1)

FAST = dict(image_size=SIZE, teacher_channels=8, hidden_channels=8,
            pretrain_iterations=6, train_iterations=8,
            finetune_iterations=4, calibration_size=4, random_state=0)


def normal_images(seed, n):
    return [render_normal(SPEC, Rng(derive(seed, i))) for i in range(n)]


def anomalous_images(seed, n):
    out = []
    for i in range(n):
        rng = Rng(derive(seed, 100 + i))
        img, _ = inject_defect(render_normal(SPEC, rng), SPEC, DEFECT, rng)
        out.append(img)
    return out


@pytest.fixture(scope="module")
def fitted():
    det = RaadDetector(**FAST)
    det.fit(normal_images(1, 6))
    return det


def test_fit_returns_self_and_sets_state(fitted):
    assert isinstance(fitted, RaadDetector)
    assert hasattr(fitted, "teacher_")
    assert hasattr(fitted, "student_")
    assert hasattr(fitted, "autoencoder_")
    assert np.isfinite(fitted.threshold_)


def test_bit_assignment_endpoints(fitted):
    bits = fitted.bit_assignment_
    assert len(bits) == fitted.teacher_.n_convs
    assert bits[0] == 8 and bits[-1] == 8
    assert all(b in (2, 3, 4, 8) for b in bits)
    assert len(fitted.layer_scores_) == len(bits)


def test_score_samples_shape_and_sign(fitted):
    X = normal_images(2, 3)
    scores = fitted.score_samples(X)
    assert scores.shape == (3,)
    assert np.all(np.isfinite(scores))
    assert np.all(scores >= 0.0)


def test_decision_function_is_shifted_score(fitted):
    X = normal_images(3, 2)
    np.testing.assert_allclose(fitted.decision_function(X),
                               fitted.score_samples(X) - fitted.threshold_)


def test_predict_is_binary(fitted):
    X = normal_images(4, 2) + anomalous_images(4, 2)
    pred = fitted.predict(X)
    assert pred.shape == (4,)
    assert pred.dtype == int
    assert set(np.unique(pred)).issubset({0, 1})


def test_anomaly_maps_shapes(fitted):
    maps = fitted.anomaly_maps(normal_images(5, 2))
    assert len(maps) == 2
    for m in maps:
        assert m.resized.shape == (SIZE, SIZE)
        assert np.isfinite(m.image_score)


def test_single_image_accepted(fitted):
    scores = fitted.score_samples(normal_images(6, 1)[0])
    assert scores.shape == (1,)


def test_not_fitted_errors():
    det = RaadDetector(**FAST)
    X = normal_images(7, 1)
    with pytest.raises(NotFittedError):
        det.score_samples(X)
    with pytest.raises(NotFittedError):
        det.predict(X)
    with pytest.raises(NotFittedError):
        det.anomaly_maps(X)


def test_input_validation(fitted):
    with pytest.raises(DimensionError, match="32x32"):
        fitted.score_samples([np.zeros((3, 16, 16))])
    with pytest.raises(DimensionError, match="channel"):
        fitted.score_samples([np.zeros((1, SIZE, SIZE))])
    with pytest.raises(ParameterError, match="at least one"):
        fitted.score_samples(np.zeros((0, 3, SIZE, SIZE)))
    bad = np.full((3, SIZE, SIZE), 2.0)
    with pytest.raises(ParameterError, match=r"\[0,1\]"):
        fitted.score_samples([bad])
    nan = np.zeros((3, SIZE, SIZE))
    nan[0, 0, 0] = np.nan
    with pytest.raises(ParameterError, match="finite"):
        fitted.score_samples([nan])


def test_get_params_set_params_clone():
    det = RaadDetector(**FAST)
    params = det.get_params()
    assert params["image_size"] == SIZE
    assert params["train_iterations"] == 8
    assert params["random_state"] == 0
    det.set_params(lr=5e-4, lambda_tae=0.5)
    assert det.lr == 5e-4
    assert det.lambda_tae == 0.5
    dup = clone(det)
    assert dup.get_params() == det.get_params()
    assert not hasattr(dup, "teacher_")


def test_fit_determinism():
    X = normal_images(8, 5)
    probe = normal_images(9, 3)
    a = RaadDetector(**FAST).fit(X).score_samples(probe)
    b = RaadDetector(**FAST).fit(X).score_samples(probe)
    np.testing.assert_array_equal(a, b)


def test_random_state_changes_fit():
    X = normal_images(10, 5)
    probe = normal_images(11, 3)
    kw = dict(FAST)
    a = RaadDetector(**kw).fit(X).score_samples(probe)
    kw["random_state"] = 1
    b = RaadDetector(**kw).fit(X).score_samples(probe)
    assert not np.array_equal(a, b)


def test_quantize_disabled_skips_allocation():
    kw = dict(FAST)
    kw["quantize"] = False
    det = RaadDetector(**kw).fit(normal_images(12, 4))
    assert det.bit_assignment_ is None
    assert det.layer_scores_ is None
    scores = det.score_samples(normal_images(13, 2))
    assert scores.shape == (2,)
