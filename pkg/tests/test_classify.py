import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from s2fl import (
    DimensionError,
    EmbeddingConfig,
    ProjectionModel,
    ValidationError,
    cml_predict,
    embed_modality,
    evaluate,
    fuse,
    nn_classify,
    transform,
)
from s2fl.classify import confusion_matrix, report_from_confusion

from conftest import random_stack
from oracles import brute_metrics, brute_nn


def random_model(rng, dims, d_s=3, C=3):
    return ProjectionModel(rng.standard_normal((d_s, sum(dims))),
                           [rng.standard_normal((d_s, d)) for d in dims],
                           rng.standard_normal((C, d_s)))


def test_modes_decompose(rng):
    dims = [4, 3]
    m = random_model(rng, dims)
    X = [rng.standard_normal((d, 20)) for d in dims]
    for k in (1, 2):
        both = embed_modality(m, X[k - 1], k, "both")
        parts = embed_modality(m, X[k - 1], k, "shared_only") + embed_modality(m, X[k - 1], k, "specific_only")
        np.testing.assert_allclose(both, parts, atol=1e-12, rtol=0)


def test_fusions(rng):
    a, b = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    np.testing.assert_array_equal(fuse([a, b], "concatenate"), np.vstack([a, b]))
    np.testing.assert_allclose(fuse([a, b], "sum"), a + b)
    np.testing.assert_allclose(fuse([a, b], "mean"), (a + b) / 2)
    with pytest.raises(DimensionError):
        fuse([a, rng.standard_normal((2, 5))], "sum")
    with pytest.raises(DimensionError):
        fuse([a, rng.standard_normal((3, 4))], "concatenate")


def test_transform_shapes_and_selection(rng):
    dims = [4, 3]
    m = random_model(rng, dims)
    X = [rng.standard_normal((d, 7)) for d in dims]
    assert transform(m, X).shape == (6, 7)
    assert transform(m, X, EmbeddingConfig(fusion="mean")).shape == (3, 7)
    only2 = transform(m, X, EmbeddingConfig(modalities=(2,)))
    np.testing.assert_array_equal(only2, embed_modality(m, X[1], 2))
    with pytest.raises(DimensionError):
        transform(m, [X[0]])
    with pytest.raises(DimensionError):
        embed_modality(m, X[0], 2)
    with pytest.raises(ValidationError):
        EmbeddingConfig(mode="bogus")
    with pytest.raises(ValidationError):
        transform(m, X, EmbeddingConfig(modalities=(3,)))


def test_nn_tie_goes_to_first_index():
    train = np.array([[0.0, 2.0, 2.0, -2.0]])
    labels = np.array([1, 2, 3, 4])
    # 1.0 is equidistant from training samples 0 and 1
    pred = nn_classify(train, labels, np.array([[1.0, 2.0, -1.0]]))
    np.testing.assert_array_equal(pred, [1, 2, 1])


def test_nn_chunking_does_not_matter(rng):
    A = rng.standard_normal((3, 30))
    y = rng.integers(1, 4, 30)
    B = rng.standard_normal((3, 101))
    np.testing.assert_array_equal(nn_classify(A, y, B, chunk=7), nn_classify(A, y, B))


def test_nn_errors(rng):
    with pytest.raises(ValidationError):
        nn_classify(np.zeros((2, 0)), np.zeros(0, int), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        nn_classify(np.zeros((2, 3)), np.ones(2, int), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        nn_classify(np.zeros((2, 3)), np.ones(3, int), np.zeros((3, 3)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_nn_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    A = rng.integers(-2, 3, size=(2, 15)).astype(float)
    y = rng.integers(1, 5, 15)
    B = rng.integers(-2, 3, size=(2, 20)).astype(float)
    np.testing.assert_array_equal(nn_classify(A, y, B), brute_nn(A, y, B))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_nn_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((4, 25))
    y = rng.integers(1, 4, 25)
    B = rng.standard_normal((4, 30))
    Q = ortho_group.rvs(4, random_state=rng)
    np.testing.assert_array_equal(nn_classify(A, y, B), nn_classify(Q @ A, y, Q @ B))


def test_nn_independent_of_test_order(rng):
    A = rng.standard_normal((3, 20))
    y = rng.integers(1, 4, 20)
    B = rng.standard_normal((3, 40))
    perm = rng.permutation(40)
    np.testing.assert_array_equal(nn_classify(A, y, B)[perm], nn_classify(A, y, B[:, perm]))


def test_metrics_examples():
    r = evaluate([1, 2, 3, 3], [1, 2, 3, 3], 3)
    assert r.oa == 1.0 and r.aa == 1.0 and r.kappa == 1.0
    r = evaluate([1, 1, 2, 2], [1, 2, 1, 2], 2)
    assert r.oa == 0.5 and r.kappa == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_array_equal(r.confusion, [[1, 1], [1, 1]])


def test_kappa_degenerate():
    r = evaluate([1, 1, 1], [1, 1, 1], 2)
    assert r.kappa == 0.0 and r.kappa_degenerate
    assert r.oa == 1.0


def test_aa_excludes_absent_classes():
    r = evaluate([1, 2, 3, 1], [1, 1, 3, 3], 4)
    assert r.excluded_classes == [2, 4]
    assert r.aa == pytest.approx((0.5 + 0.5) / 2)
    assert "aa_excluded=2,4" in r.to_text()


def test_confusion_orientation():
    cm = confusion_matrix([2, 2, 1], [1, 1, 1], 2)
    # rows are reference labels
    np.testing.assert_array_equal(cm, [[1, 2], [0, 0]])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), C=st.integers(1, 10))
def test_metrics_match_loop_oracle(seed, C):
    rng = np.random.default_rng(seed)
    cm = rng.integers(0, 20, size=(C, C))
    cm[rng.integers(C), rng.integers(C)] += 1
    r = report_from_confusion(cm)
    oa, aa, kappa = brute_metrics(cm.tolist())
    assert abs(r.oa - oa) <= 1e-12 and abs(r.aa - aa) <= 1e-12 and abs(r.kappa - kappa) <= 1e-12


def test_report_text_and_csv():
    r = evaluate([1, 2, 2], [1, 2, 1], 2)
    text = r.to_text()
    assert "oa=0.666667" in text and "samples=3" in text
    assert r.confusion_csv().splitlines() == ["reference\\prediction,1,2", "1,1,1", "2,0,1"]


def test_cml_uses_training_modalities_mean(rng):
    s = random_stack(rng, K=2, dims=[4, 3], N=30)
    m = random_model(rng, s.dims, C=s.C)
    Xt = rng.standard_normal((3, 12))
    pred = cml_predict(m, s, Xt, 2)
    train = (embed_modality(m, s.X[0], 1) + embed_modality(m, s.X[1], 2)) / 2
    np.testing.assert_array_equal(pred, nn_classify(train, s.labels, embed_modality(m, Xt, 2)))
    with pytest.raises(ValidationError):
        cml_predict(m, s, Xt, 3)
