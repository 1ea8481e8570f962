import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import identity_rig
from itofuse.datagen import (
    SPEED_OF_LIGHT, ItofNoiseSpec, Primitive, SceneSpec, align_relative_depth, ambiguity_distance,
    depth_to_phase, discontinuity_mask, phase_to_depth, random_scene, render_pair, render_scene,
    simulate_itof, synth_mde_prior,
)
from itofuse.errors import DomainError, SingularFitError, ValidationError
from itofuse.geometry import Camera, CameraRig, Intrinsics, RigidTransform

CAM = Intrinsics(40.0, 40.0, 20.0, 15.0, 41, 31)
NOISELESS = ItofNoiseSpec(sigma_phi=0.0, flying_pixel_prob=0.0, dropout_prob=0.0)


def plane_scene(z, d_max=8.0):
    return SceneSpec(0, [Primitive("plane", [0, 0, z], [50, 50, 0])], (0.5, d_max))


class TestRender:
    def test_fronto_parallel_plane(self):
        _, depth = render_scene(plane_scene(2.0), CAM)
        np.testing.assert_allclose(depth, 2.0, rtol=1e-7)

    @pytest.mark.parametrize("dist, r", [(3.0, 0.5), (4.5, 1.2)])
    def test_sphere_center_pixel(self, dist, r):
        spec = SceneSpec(0, [Primitive("sphere", [0, 0, dist], [r, 0, 0])], (0.5, 8.0))
        _, depth = render_scene(spec, CAM)
        assert depth[15, 20] == pytest.approx(dist - r, rel=1e-6)

    def test_background_at_d_max(self):
        spec = SceneSpec(0, [Primitive("sphere", [0, 0, 3.0], [0.1, 0, 0])], (0.5, 6.0))
        _, depth = render_scene(spec, CAM)
        assert depth[0, 0] == pytest.approx(6.0, rel=1e-6)

    def test_box_front_face(self):
        spec = SceneSpec(0, [Primitive("box", [0, 0, 3.0], [0.5, 0.5, 0.25])], (0.5, 8.0))
        _, depth = render_scene(spec, CAM)
        assert depth[15, 20] == pytest.approx(2.75, rel=1e-6)

    def test_rgb_range_and_dtype(self):
        rgb, depth = render_scene(random_scene(3), CAM)
        assert rgb.shape == (31, 41, 3) and rgb.dtype == np.float32 and depth.dtype == np.float32
        assert rgb.min() >= 0 and rgb.max() <= 1

    def test_seed_determinism(self):
        a = render_scene(random_scene(11), CAM)
        b = render_scene(random_scene(11), CAM)
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()
        assert random_scene(11).to_dict() == random_scene(11).to_dict()
        assert random_scene(11).to_dict() != random_scene(12).to_dict()

    def test_scene_round_trip(self):
        s = random_scene(5)
        assert SceneSpec.from_dict(s.to_dict()).to_dict() == s.to_dict()

    def test_invalid_scene(self):
        with pytest.raises(ValidationError):
            SceneSpec(0, [], (1.0, 2.0))
        with pytest.raises(ValidationError):
            SceneSpec(0, [Primitive("plane", [0, 0, 1], [1, 1, 0])], (2.0, 1.0))
        with pytest.raises(ValidationError):
            Primitive("torus", [0, 0, 1], [1, 1, 1])


class TestRenderPair:
    def test_identity_rig_views_equal(self):
        pr = render_pair(random_scene(4), identity_rig())
        assert pr.depth.tobytes() == pr.itof_depth.tobytes()

    @pytest.mark.parametrize("t", [[0.05, 0, 0], [0.1, -0.03, 0.0]])
    def test_translated_plane(self, t):
        k = Intrinsics(40.0, 40.0, 20.0, 15.0, 41, 31)
        rig = CameraRig(Camera(k), Camera(k), RigidTransform(np.eye(3), t))
        pr = render_pair(plane_scene(2.5), rig)
        np.testing.assert_allclose(pr.itof_depth, 2.5, rtol=1e-6)
        np.testing.assert_allclose(pr.depth, 2.5, rtol=1e-6)

    def test_determinism(self):
        rig = identity_rig()
        a, b = render_pair(random_scene(9), rig), render_pair(random_scene(9), rig)
        assert a.rgb.tobytes() == b.rgb.tobytes() and a.itof_depth.tobytes() == b.itof_depth.tobytes()


class TestPhase:
    def test_quarter_wavelength_is_pi(self):
        f = 20e6
        assert depth_to_phase(SPEED_OF_LIGHT / (4 * f), f) == pytest.approx(np.pi, rel=1e-15)

    def test_small_depth(self):
        assert depth_to_phase(1e-9, 20e6) < 1e-6

    def test_wrap(self):
        assert ambiguity_distance(20e6) == 7.5
        assert depth_to_phase(8.0, 20e6) == pytest.approx(depth_to_phase(0.5, 20e6), rel=1e-12)
        assert phase_to_depth(depth_to_phase(8.0, 20e6), 20e6) == pytest.approx(0.5, rel=1e-12)

    @pytest.mark.parametrize("d, f", [(0.0, 20e6), (-1.0, 20e6), (1.0, 0.0)])
    def test_domain(self, d, f):
        with pytest.raises(DomainError):
            depth_to_phase(d, f)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-3, 100.0), st.floats(1e6, 1e8))
    def test_range(self, d, f):
        phi = depth_to_phase(d, f)
        assert 0.0 <= phi < 2 * np.pi


class TestSimulateItof:
    def test_noiseless_identity(self, rng):
        gt = rng.uniform(0.3, 7.4, (30, 40))
        assert np.array_equal(simulate_itof(gt, NOISELESS), gt)

    def test_wrap_oracle(self):
        out = simulate_itof(np.full((4, 4), 8.0), NOISELESS)
        assert np.all(out == 0.5)

    def test_seed_determinism(self):
        _, gt, alb = render_scene(random_scene(2), CAM, return_albedo=True)
        spec = ItofNoiseSpec(seed=42)
        a, b = simulate_itof(gt, spec, alb), simulate_itof(gt, spec, alb)
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != simulate_itof(gt, ItofNoiseSpec(seed=43), alb).tobytes()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.0, 0.5))
    def test_range_property(self, seed, sigma):
        gt = np.random.default_rng(seed).uniform(0.05, 12.0, (12, 12))
        out = simulate_itof(gt, ItofNoiseSpec(sigma_phi=sigma, seed=seed))
        ok = np.isfinite(out)
        assert np.all(out[ok] > 0)
        amb = 7.5
        tail = phase_to_depth(8 * sigma, 20e6) + 1e-12
        assert np.all(out[ok] < amb + tail)

    def test_flying_pixels_only_on_edges(self):
        gt = np.full((30, 40), 2.0)
        gt[:, 20:] = 4.0
        spec = ItofNoiseSpec(sigma_phi=0.0, flying_pixel_prob=1.0, dropout_prob=0.0, seed=1)
        out = simulate_itof(gt, spec)
        changed = out != gt
        assert changed.any()
        assert not (changed & ~discontinuity_mask(gt)).any()
        # mixed values stay within the two neighbouring depths
        assert np.all((out[changed] > 2.0) & (out[changed] < 4.0))

    def test_dropout_only_on_dark(self):
        gt = np.full((20, 20), 2.0)
        albedo = np.full((20, 20), 0.8)
        albedo[:, :10] = 0.05
        out = simulate_itof(gt, ItofNoiseSpec(sigma_phi=0.0, flying_pixel_prob=0.0, dropout_prob=1.0), albedo)
        assert np.isnan(out[:, :10]).all() and np.isfinite(out[:, 10:]).all()

    def test_invalid_input_stays_invalid(self):
        gt = np.full((5, 5), 3.0)
        gt[2, 2] = np.nan
        assert np.isnan(simulate_itof(gt, NOISELESS)[2, 2])

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            ItofNoiseSpec(f_m=0)
        with pytest.raises(ValidationError):
            ItofNoiseSpec(dropout_prob=1.5)


class TestPrior:
    def test_identity_parameters(self, rng):
        gt = rng.uniform(1, 5, (10, 12))
        np.testing.assert_array_equal(synth_mde_prior(gt, 0, a=1, gamma=1, b=0, field_amplitude=0), gt)

    def test_affine_parameters(self, rng):
        gt = rng.uniform(1, 5, (10, 12))
        np.testing.assert_allclose(synth_mde_prior(gt, 0, a=2, gamma=1, b=1, field_amplitude=0), 2 * gt + 1, rtol=1e-15)

    def test_determinism(self, rng):
        gt = rng.uniform(1, 5, (10, 12))
        assert synth_mde_prior(gt, 7).tobytes() == synth_mde_prior(gt, 7).tobytes()
        assert synth_mde_prior(gt, 7).tobytes() != synth_mde_prior(gt, 8).tobytes()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_positive_and_monotone_without_field(self, seed):
        gt = np.linspace(0.5, 7.0, 64).reshape(8, 8)
        rel = synth_mde_prior(gt, seed, field_amplitude=0.0)
        assert np.all(rel > 0)
        assert np.all(np.diff(rel.ravel()) > 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_field_amplitude_bounded(self, seed):
        gt = np.random.default_rng(seed).uniform(0.5, 7.0, (16, 16))
        rel = synth_mde_prior(gt, seed, a=1.0, gamma=1.0, b=0.0)
        assert np.max(np.abs(rel - gt)) <= 0.05 * np.ptp(gt) + 1e-12
        assert np.all(synth_mde_prior(gt, seed) > 0)


class TestAlign:
    def test_exact_affine(self, rng):
        ref = rng.uniform(0.5, 6.0, (20, 20))
        r = align_relative_depth(2 * ref + 1, ref)
        assert r.s == pytest.approx(0.5, rel=1e-9) and r.t == pytest.approx(-0.5, rel=1e-9)
        np.testing.assert_allclose(r.aligned, ref, rtol=1e-12)

    def test_identity(self, rng):
        ref = rng.uniform(0.5, 6.0, (20, 20))
        r = align_relative_depth(ref, ref)
        assert r.s == pytest.approx(1.0, rel=1e-12) and abs(r.t) < 1e-12

    def test_constant_is_singular(self):
        with pytest.raises(SingularFitError):
            align_relative_depth(np.ones((5, 5)), np.arange(25.0).reshape(5, 5) + 1)

    def test_too_few_pixels(self):
        m = np.zeros((5, 5), bool)
        m[0, 0] = True
        with pytest.raises(SingularFitError):
            align_relative_depth(np.arange(25.0).reshape(5, 5) + 1, np.ones((5, 5)), m)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.2, 5.0), st.floats(0.0, 2.0), st.floats(0.0, 0.1))
    def test_robust_to_outliers(self, seed, s, t, frac):
        g = np.random.default_rng(seed)
        rel = g.uniform(0.5, 3.0, 400)
        ref = s * rel + t
        bad = g.choice(400, int(frac * 400), replace=False)
        # gross outliers in both directions, kept positive so they stay valid
        up = g.random(bad.size) < 0.5
        ref[bad] = np.where(up, ref[bad] + g.uniform(2.0, 10.0, bad.size), ref[bad] * g.uniform(0.01, 0.2, bad.size))
        r = align_relative_depth(rel, ref)
        assert abs(r.s - s) <= 0.02 * s

    def test_mask_and_apply_outside(self, rng):
        ref = rng.uniform(1.0, 5.0, (10, 10))
        rel = 3 * ref - 1
        mask = np.zeros((10, 10), bool)
        mask[:5] = True
        ref_bad = ref.copy()
        ref_bad[5:] = np.nan
        r = align_relative_depth(rel, ref_bad, mask, trim=0.0)
        np.testing.assert_allclose(r.aligned, ref, rtol=1e-10)
        assert r.inlier_count == 50
