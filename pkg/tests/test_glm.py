import numpy as np
import pytest

from perfmap.errors import GeometryError, ParameterError, ValidationError
from perfmap.glm import (
    CohortTable,
    DesignMatrix,
    Subject,
    cluster_extent,
    fit_voxelwise,
    permutation_fwe,
    permutation_null,
    run_glm,
)
from perfmap.volume import ScalarVolume, save_nifti


def design(rng, n=20, shift=0.0, scale=1.0):
    score = rng.integers(0, 20, n).astype(float)
    age = rng.uniform(40, 90, n)
    gender = np.arange(n) % 2
    x = np.column_stack([np.ones(n), score * scale + shift, age, gender])
    return x


def volumes(rng, x, shape=(6, 6, 6), beta_score=0.0):
    out = []
    for row in x:
        data = rng.normal(size=shape) + beta_score * row[1] + 0.01 * row[2]
        out.append(ScalarVolume.from_array(data))
    return out


def test_fit_matches_lstsq(rng):
    x = design(rng)
    vols = volumes(rng, x)
    betas, t = fit_voxelwise(vols, DesignMatrix(x))
    y = np.stack([v.data.ravel() for v in vols])
    ref, res, *_ = np.linalg.lstsq(x, y, rcond=None)
    for b, r in zip(betas, ref):
        np.testing.assert_allclose(b.data.ravel(), r, atol=1e-10)
    sigma2 = res / (x.shape[0] - x.shape[1])
    se = np.sqrt(sigma2 * np.linalg.inv(x.T @ x)[1, 1])
    np.testing.assert_allclose(t.data.ravel(), ref[1] / se, rtol=1e-9)


def test_score_shift_and_scale_invariance(rng):
    base = design(np.random.default_rng(3))
    vols = volumes(rng, base)
    b0, t0 = fit_voxelwise(vols, DesignMatrix(base))
    shifted = base.copy()
    shifted[:, 1] += 7.5
    b1, t1 = fit_voxelwise(vols, DesignMatrix(shifted))
    np.testing.assert_allclose(b1[1].data, b0[1].data, atol=1e-8)
    np.testing.assert_allclose(t1.data, t0.data, atol=1e-8)
    assert np.abs(b1[0].data - b0[0].data).max() > 1e-3
    scaled = base.copy()
    scaled[:, 1] *= 4.0
    b2, t2 = fit_voxelwise(vols, DesignMatrix(scaled))
    np.testing.assert_allclose(b2[1].data, b0[1].data / 4.0, atol=1e-8)
    np.testing.assert_allclose(t2.data, t0.data, atol=1e-8)


def test_design_validation(rng):
    x = design(rng)
    with pytest.raises(ParameterError, match="rank"):
        DesignMatrix(np.column_stack([x, x[:, 1]]), np.zeros(5))
    bad = x.copy()
    bad[0, 0] = 2
    with pytest.raises(ParameterError, match="intercept"):
        DesignMatrix(bad)
    with pytest.raises(ParameterError, match="n >= p"):
        DesignMatrix(x[:5])
    with pytest.raises(ParameterError):
        DesignMatrix(x, np.ones(3))


def test_cohort_validation_and_csv(tmp_path):
    rows = [Subject(f"s{i}", f"p{i}.nii.gz", float(i), 50.0 + i * i, i % 2) for i in range(6)]
    assert len(CohortTable(tuple(rows))) == 6
    with pytest.raises(ValidationError, match="duplicate"):
        CohortTable(tuple(rows[:5] + [rows[0]]))
    with pytest.raises(ValidationError):
        CohortTable(tuple(rows[:5]))
    with pytest.raises(ValidationError):
        CohortTable(tuple(rows[:5] + [Subject("x", "p", -1.0, 50.0, 0)]))
    csv_path = tmp_path / "c.csv"
    csv_path.write_text(
        "subject_id,ppm_path,score,age,gender\n"
        + "".join(f"{r.subject_id},{r.ppm_path},{r.score},{r.age},{r.gender}\n" for r in rows)
    )
    back = CohortTable.read_csv(csv_path)
    assert back.rows[0].ppm_path == str(tmp_path / "p0.nii.gz")
    assert DesignMatrix.from_cohort(back).matrix.shape == (6, 4)
    (tmp_path / "bad.csv").write_text("subject_id,score\n")
    with pytest.raises(ValidationError, match="missing columns"):
        CohortTable.read_csv(tmp_path / "bad.csv")


def test_mismatched_grids(rng):
    x = design(rng, n=8)
    vols = volumes(rng, x)
    vols[3] = ScalarVolume.from_array(np.zeros((6, 6, 7)))
    with pytest.raises(GeometryError):
        fit_voxelwise(vols, DesignMatrix(x))
    with pytest.raises(ValidationError):
        fit_voxelwise(vols[:5], DesignMatrix(x))


def test_permutation_null_properties(rng):
    x = design(rng)
    y = rng.normal(size=(20, 50))
    d = DesignMatrix(x)
    null = permutation_null(y, d, n_perm=150, rng_seed=4)
    assert len(null) == 150
    np.testing.assert_array_equal(null, permutation_null(y, d, n_perm=150, rng_seed=4))
    # first sample is the observed statistic
    _, t = fit_voxelwise([ScalarVolume.from_array(r.reshape(5, 5, 2)) for r in y], d)
    assert null[0] == pytest.approx(t.data.max())
    assert permutation_fwe(y, d, n_perm=150, alpha=1.0, rng_seed=4) == pytest.approx(null.min())
    with pytest.raises(ParameterError):
        permutation_null(y, d, n_perm=50)


def test_cluster_extent_counts():
    t = np.zeros((20, 20, 20))
    t[1:6, 1:6, 1:7] = 5.0  # 150 voxels
    t[10:19, 10:21, 10:11] = 4.0  # 99 voxels
    vol = ScalarVolume.from_array(t)
    clusters, mask = cluster_extent(vol, 3.0, 100)
    assert [c.size for c in clusters] == [150]
    assert mask.count() == 150
    clusters, mask = cluster_extent(vol, 3.0, 1)
    np.testing.assert_array_equal(mask.data.astype(bool), t >= 3.0)
    assert sum(c.size for c in clusters) == mask.count()
    assert clusters[0].peak_t >= clusters[1].peak_t
    assert cluster_extent(vol, 10.0)[0] == []
    with pytest.raises(ParameterError):
        cluster_extent(vol, 1.0, 0)


def test_diagonal_voxels_form_one_cluster():
    t = np.zeros((4, 4, 4))
    t[0, 0, 0] = t[1, 1, 1] = t[2, 2, 2] = 1
    assert [c.size for c in cluster_extent(ScalarVolume.from_array(t), 0.5, 1)[0]] == [3]


def test_run_glm_planted_effect(rng):
    n = 30
    x = design(rng, n=n)
    vols = []
    for row in x:
        data = rng.normal(size=(10, 10, 10))
        data[2:7, 2:7, 2:7] += 5.0 * (row[1] - x[:, 1].mean()) / x[:, 1].std()
        vols.append(ScalarVolume.from_array(data))
    res = run_glm(vols, DesignMatrix(x), n_perm=200, min_extent=50, rng_seed=1)
    assert res.clusters and res.clusters[0].size >= 50
    assert res.significant_mask.data[2:7, 2:7, 2:7].any()
    assert (res.t_map.data[res.significant_mask.data.astype(bool)] >= res.fwe_threshold).all()
    assert len(res.beta) == 4


def test_glm_output_files_round_trip(tmp_path, rng):
    x = design(rng, n=8)
    vols = volumes(rng, x)
    _, t = fit_voxelwise(vols, DesignMatrix(x))
    save_nifti(t, tmp_path / "t.nii.gz")
    assert (tmp_path / "t.nii.gz").stat().st_size > 0
