import dataclasses
import json

import numpy as np
import pytest

from menseg.config import RunConfig
from menseg.errors import ConfigError, PlacementFailure
from menseg.phantom import CONTRAST, PhantomConfig, generate_cohort, generate_phantom, list_subjects
from menseg.pipeline import evaluate_stage
from menseg.volume_io import aggregate_regions, load_subject_dir, write_mask


def test_same_seed_bit_identical():
    cfg = PhantomConfig(shape=(32, 32, 32), n_lesions=(1, 1), radii=(3, 5), seed=4)
    v1, m1 = generate_phantom(cfg)
    v2, m2 = generate_phantom(cfg)
    assert np.array_equal(v1.data, v2.data) and np.array_equal(m1.data, m2.data)
    v3, _ = generate_phantom(dataclasses.replace(cfg, seed=5))
    assert not np.array_equal(v1.data, v3.data)


@pytest.mark.parametrize("seed", range(5))
def test_nesting_and_validity(seed):
    vol, mask = generate_phantom(PhantomConfig(seed=seed))
    r = aggregate_regions(mask)
    assert not (r.et & ~r.tc).any() and not (r.tc & ~r.wt).any()
    assert set(np.unique(mask.data)) == {0, 1, 2, 3}
    assert np.isfinite(vol.data).all() and vol.data.dtype == np.float32
    assert mask.shape == vol.shape == (64, 64, 64)


def test_contrast_profile_without_noise():
    vol, mask = generate_phantom(PhantomConfig(noise_std=0.0, seed=1))
    t1ce = vol.data[1]
    fg0 = (mask.data == 0) & (t1ce != 0)
    assert t1ce[mask.data == 3].mean() > t1ce[fg0].mean()
    # documented table: rim brightest in T1ce, shell brightest in FLAIR
    assert np.argmax(CONTRAST[:, 1]) == 3 and np.argmax(CONTRAST[:, 3]) == 2
    for label in range(1, 4):
        for c in range(4):
            assert np.unique(vol.data[c][mask.data == label]).tolist() == [np.float32(CONTRAST[label, c])]


def test_background_exactly_zero():
    vol, mask = generate_phantom(PhantomConfig(seed=2))
    corner = vol.data[:, :3, :3, :3]
    assert not corner.any()
    assert (vol.data[:, mask.data > 0] != 0).all()


def test_config_validation():
    with pytest.raises(ConfigError):
        PhantomConfig(shape=(16, 16, 16), radii=(4, 10))
    with pytest.raises(ConfigError):
        PhantomConfig(n_lesions=(3, 1))
    with pytest.raises(ConfigError):
        PhantomConfig(radii=(5, 4))


def test_placement_failure():
    cfg = PhantomConfig(shape=(24, 24, 24), n_lesions=(8, 8), radii=(3, 5), seed=0)
    with pytest.raises(PlacementFailure):
        generate_phantom(cfg)


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    dirs = generate_cohort(20, 1000, PhantomConfig(), out)
    return out, dirs


def test_cohort_layout_and_labels(cohort):
    out, dirs = cohort
    assert len(dirs) == 20 and list_subjects(out) == dirs
    manifest = json.loads((out / "manifest.json").read_text())
    assert [s["seed"] for s in manifest["subjects"]] == list(range(1000, 1020))
    for d in dirs:
        vol, mask = load_subject_dir(d)
        assert vol.shape == (64, 64, 64)
        assert set(np.unique(mask.data)) == {0, 1, 2, 3}


def test_cohort_regeneration_bit_identical(cohort, tmp_path):
    out, dirs = cohort
    generate_cohort(3, 1000, PhantomConfig(), tmp_path)
    for d in dirs[:3]:
        for f in sorted(d.iterdir()):
            assert (tmp_path / d.name / f.name).read_bytes() == f.read_bytes()


def test_oracle_predictor_through_evaluate(cohort, tmp_path):
    out, dirs = cohort
    preds = tmp_path / "pred"
    for d in dirs:
        _, mask = load_subject_dir(d)
        write_mask(mask, preds / f"{d.name}.nii.gz")
    report = evaluate_stage(preds, out, tmp_path / "report.csv", RunConfig())
    for row in report.rows:
        for r in ("et", "tc", "wt"):
            assert row[f"dice_{r}"] == 1.0 and row[f"hd95_{r}"] == 0.0
    assert (tmp_path / "report.csv").read_text().splitlines()[-1].startswith("median,1.000000")
