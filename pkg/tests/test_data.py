import numpy as np
import pytest

from mcmr.data import (
    CoilMaps,
    Dataset,
    ImageSequence,
    KSpaceSet,
    MotionConfig,
    MotionFieldSet,
    ReconConfig,
    SamplingMaskSet,
    validate,
    validate_coils,
    validate_masks,
    validate_motion,
)
from mcmr.phantom import PhantomSpec, make_coil_maps, make_masks, make_phantom, simulate_kspace


@pytest.fixture(scope="module")
def small_ds():
    spec = PhantomSpec(n_frames=4, height=16, width=16, motion_amplitude=0.5)
    ref, gt = make_phantom(spec)
    coils = make_coil_maps(2, 16, 16)
    masks = make_masks(4, 16, 16, 4, 2, seed=3)
    return Dataset(simulate_kspace(ref, coils, masks, 0.01, 3), coils, masks, ref, gt)


def test_valid_phantom_dataset_has_no_violations(small_ds):
    assert validate(small_ds) == []


def test_arrays_are_read_only(small_ds):
    with pytest.raises(ValueError):
        small_ds.reference.frames[0, 0, 0] = 1.0


def test_empty_mask_frame_named():
    m = SamplingMaskSet(16, 16, (np.arange(4), np.array([], dtype=int), np.arange(3)), 0)
    v = validate_masks(m)
    assert len(v) == 1 and "frame 1" in v[0].message


def test_missing_center_band_detected():
    m = SamplingMaskSet(16, 16, (np.array([7, 8, 1]), np.array([1, 2])), center_lines=2)
    v = validate_masks(m)
    assert len(v) == 1 and v[0].value == [7, 8]


def test_line_index_out_of_range():
    m = SamplingMaskSet(16, 16, (np.array([3, 16]), np.array([1])), 0)
    assert any("outside" in v.message for v in validate_masks(m))


def test_kspace_injection_reports_location(small_ds):
    y = small_ds.kspace.data.copy()
    unsampled = np.nonzero(~small_ds.masks.row_mask(2))[0][0]
    y[2, 1, unsampled, 5] = 1e-3
    v = validate(small_ds._replace(kspace=KSpaceSet(y)))
    assert len(v) == 1
    assert v[0].value == {"frame": 2, "coil": 1, "row": int(unsampled)}


def test_coil_scaling_violates_normalization(small_ds):
    bad = CoilMaps(2 * small_ds.coils.data, small_ds.coils.support)
    v = validate_coils(bad)
    assert [x.message for x in v] == ["coil normalization violated"]


def test_coils_outside_support_must_vanish():
    c = make_coil_maps(1, 8, 8)
    support = np.ones((8, 8), bool)
    support[0, 0] = False
    v = validate_coils(CoilMaps(c.data, support))
    assert any("outside support" in x.message for x in v)


def test_motion_invariants():
    f = np.zeros((3, 3, 2, 8, 8))
    f[1, 1, 0, 2, 2] = 0.5
    f[0, 2, 1, 0, 0] = 100.0
    msgs = [v.message for v in validate_motion(MotionFieldSet(f))]
    assert any("diagonal" in m for m in msgs)
    assert any("sanity bound" in m for m in msgs)
    f[0, 2, 1, 0, 0] = np.nan
    assert any("non-finite" in v.message for v in validate_motion(MotionFieldSet(f)))


def test_small_images_and_single_frame_rejected(small_ds):
    ds = small_ds._replace(reference=ImageSequence(np.ones((1, 16, 16))))
    assert any(v.field == "n_frames" or "shape" in v.field for v in validate(ds))


@pytest.mark.parametrize(
    "kwargs",
    [dict(lam=0), dict(lam=-1), dict(unroll_iters=0), dict(cg_tol=0), dict(psnr_stop_delta=-0.1)],
)
def test_recon_config_rejects(kwargs):
    with pytest.raises(ValueError):
        ReconConfig(**kwargs)


@pytest.mark.parametrize("kwargs", [dict(alpha=-1), dict(beta=-1), dict(gamma=0), dict(gamma=1.5),
                                    dict(pyramid_levels=0)])
def test_motion_config_rejects(kwargs):
    with pytest.raises(ValueError):
        MotionConfig(**kwargs)


def test_defaults():
    r, m = ReconConfig(), MotionConfig()
    assert (r.lam, r.unroll_iters, r.psnr_stop_delta) == (2.0, 3, 0.1)
    assert (m.alpha, m.beta, m.gamma) == (10.0, 10.0, 0.6)
    assert (m.charbonnier_eps, m.charbonnier_exp) == (1e-12, 0.45)


def test_mask_helpers():
    m = SamplingMaskSet(16, 8, (np.array([8, 7, 2, 2]), np.array([7, 8, 15, 0])), 2)
    assert m.lines[0].tolist() == [2, 7, 8]
    assert m.center_band().tolist() == [7, 8]
    assert m.acceleration() == pytest.approx(16 / 3.5)
    assert m.row_masks().sum(axis=1).tolist() == [3, 4]
