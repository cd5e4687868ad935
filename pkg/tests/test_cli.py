import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from perfmap.cli import main
from perfmap.volume import ScalarVolume, load_mask, load_nifti, save_nifti


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    spec = "dims=40,40,48;branches=3;branch_length_range=10,14;noise_sigma=4;rng_seed=9"
    assert main(["phantom", "--spec", spec, "--out-dir", str(out)]) == 0
    return out


def test_stage_by_stage_matches_pipeline(phantom_dir, tmp_path):
    d = phantom_dir
    t = tmp_path
    assert main(["dsa", "--ct", str(d / "ct.nii.gz"), "--cta", str(d / "cta.nii.gz"), "--out", str(t / "dsa.nii.gz")]) == 0
    assert main(["enhance", "--in", str(t / "dsa.nii.gz"), "--out", str(t / "vsp.nii.gz")]) == 0
    assert main(["segment", "--in", str(t / "vsp.nii.gz"), "--out", str(t / "mask.nii.gz")]) == 0
    assert main(["skeletonize", "--in", str(t / "mask.nii.gz"), "--out", str(t / "skel.nii.gz")]) == 0
    assert main(["seeds", "--skeleton", str(t / "skel.nii.gz"), "--vsp", str(t / "vsp.nii.gz"), "--out", str(t / "seeds.csv")]) == 0
    assert main(["fastmarch", "--speed", str(t / "dsa.nii.gz"), "--seeds", str(t / "seeds.csv"), "--out", str(t / "ppm.nii.gz")]) == 0
    assert main(["pipeline", "--ct", str(d / "ct.nii.gz"), "--cta", str(d / "cta.nii.gz"), "--out-dir", str(t / "p"), "--keep-intermediates"]) == 0
    for name in ("dsa", "vsp", "skel"):
        np.testing.assert_array_equal(load_nifti(t / f"{name}.nii.gz").data, load_nifti(t / "p" / f"{name}.nii.gz").data)
    assert (t / "seeds.csv").read_text() == (t / "p" / "seeds.csv").read_text()
    # the chained run re-reads the float32 DSA, as the pipeline's own speed is built from it
    np.testing.assert_allclose(load_nifti(t / "ppm.nii.gz").data, load_nifti(t / "p" / "ppm.nii.gz").data, rtol=1e-6)


def test_compare_and_render(phantom_dir, tmp_path, capsys):
    d = phantom_dir
    assert main(["pipeline", "--ct", str(d / "ct.nii.gz"), "--cta", str(d / "cta.nii.gz"), "--out-dir", str(tmp_path)]) == 0
    capsys.readouterr()
    rc = main([
        "compare", "--ppm", str(tmp_path / "ppm.nii.gz"), "--reference", str(d / "true_arrival.nii.gz"),
        "--out", str(tmp_path / "r.csv"), "--png", str(tmp_path / "r.png"),
    ])
    assert rc == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert float(rows[0]["rho_smoothed"]) > 0.9
    assert (tmp_path / "r.png").stat().st_size > 0
    assert list(csv.DictReader(open(tmp_path / "r.csv")))[0] == rows[0]
    assert main(["render", "--in", str(tmp_path / "ppm.nii.gz"), "--out", str(tmp_path / "ppm.png")]) == 0
    assert (tmp_path / "ppm.png").read_bytes()[:4] == b"\x89PNG"


def test_exit_codes(tmp_path, capsys):
    v = ScalarVolume.from_array(np.ones((6, 6, 6)))
    save_nifti(v, tmp_path / "a.nii.gz")
    assert main(["enhance", "--in", str(tmp_path / "a.nii.gz"), "--out", str(tmp_path / "b.nii.gz"), "--time-step", "0.2"]) == 2
    assert main(["dsa", "--ct", str(tmp_path / "a.nii.gz"), "--cta", str(tmp_path / "a.nii.gz"), "--out", str(tmp_path / "c.nii.gz")]) == 1
    assert main(["render", "--in", str(tmp_path / "missing.nii.gz"), "--out", str(tmp_path / "x.png")]) == 1
    assert main(["pipeline", "--out-dir", str(tmp_path)]) == 2
    assert "perfmap" in capsys.readouterr().err


def test_glm_command(tmp_path, capsys):
    rng = np.random.default_rng(0)
    rows = ["subject_id,ppm_path,score,age,gender"]
    for s in range(12):
        score, age = float(rng.integers(0, 20)), float(rng.uniform(40, 90))
        data = rng.normal(size=(12, 12, 12))
        data[3:9, 3:9, 3:9] += 0.8 * score
        save_nifti(ScalarVolume.from_array(data), tmp_path / f"s{s}.nii.gz")
        rows.append(f"s{s},s{s}.nii.gz,{score},{age},{s % 2}")
    (tmp_path / "cohort.csv").write_text("\n".join(rows) + "\n")
    out = tmp_path / "glm"
    rc = main(["glm", "--cohort", str(tmp_path / "cohort.csv"), "--out-dir", str(out), "--n-perm", "200", "--png"])
    assert rc == 0
    summary = json.loads((out / "glm_summary.json").read_text())
    assert summary["n_clusters"] >= 1 and summary["input_smoothing_fwhm"] == 0.0
    clusters = list(csv.DictReader(open(out / "clusters.csv")))
    assert int(clusters[0]["size"]) >= 100
    assert load_mask(out / "significant_mask.nii.gz").count() == sum(int(c["size"]) for c in clusters)
    for name in ("beta_intercept", "beta_score", "beta_age", "beta_gender", "tmap"):
        assert (out / f"{name}.nii.gz").exists()
    assert (out / "tmap.png").exists()
    assert main(["glm", "--cohort", str(tmp_path / "cohort.csv"), "--out-dir", str(out), "--n-perm", "10"]) == 2


def test_batch_cli(phantom_dir, tmp_path, capsys):
    (tmp_path / "b.csv").write_text(f"subject_id,ct,cta\nx,{phantom_dir}/ct.nii.gz,{phantom_dir}/cta.nii.gz\n")
    assert main(["pipeline", "--batch", str(tmp_path / "b.csv"), "--jobs", "1", "--out-dir", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "subject_id,status,ppm_sha256" and out[1].startswith("x,ok,")
    assert (tmp_path / "o" / "x" / "ppm.nii.gz").exists()


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "perfmap", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("dsa", "enhance", "segment", "skeletonize", "seeds", "fastmarch", "pipeline", "compare", "glm", "phantom", "render"):
        assert cmd in res.stdout
