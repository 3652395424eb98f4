import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hmark.distortions import (
    PARAM_RANGES,
    SAMPLED_KINDS,
    DistortionSpec,
    apply_distortion,
    identity_spec,
    sample_distortion,
)


def make_batch(seed=0, n=2, size=16):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 3, size, size, generator=g) * 2 - 1) * 0.9


class TestSampling:
    def test_kind_frequencies_uniform(self):
        rng = np.random.default_rng(42)
        counts = {k: 0 for k in SAMPLED_KINDS}
        n = 10_000
        for _ in range(n):
            counts[sample_distortion(rng).kind] += 1
        p = 1 / len(SAMPLED_KINDS)
        se = math.sqrt(p * (1 - p) / n)
        for k, c in counts.items():
            assert abs(c / n - p) < 3 * se, (k, c / n)

    def test_params_always_within_ranges(self):
        rng = np.random.default_rng(1)
        for _ in range(2000):
            spec = sample_distortion(rng)
            name, lo, hi = PARAM_RANGES[spec.kind]
            assert lo <= spec.params[name] <= hi

    def test_same_seed_same_sequence(self):
        a = [sample_distortion(np.random.default_rng(9)) for _ in range(20)]
        b = [sample_distortion(np.random.default_rng(9)) for _ in range(20)]
        assert a == b


class TestApply:
    def test_identity_bit_exact(self):
        x = make_batch()
        assert torch.equal(apply_distortion(x, identity_spec()), x)

    def test_brightness_factor_one_bit_exact(self):
        x = make_batch()
        spec = DistortionSpec(kind="brightness", params={"factor": 1.0})
        assert torch.equal(apply_distortion(x, spec), x)

    def test_contrast_factor_one_bit_exact(self):
        x = make_batch()
        spec = DistortionSpec(kind="contrast", params={"factor": 1.0})
        assert torch.equal(apply_distortion(x, spec), x)

    def test_noise_matches_direct_recomputation(self):
        x = make_batch(3)
        spec = DistortionSpec(kind="gaussian_noise", params={"sigma": 0.02}, seed=77)
        got = apply_distortion(x, spec)
        gen = torch.Generator().manual_seed(77)
        want = (x + 0.02 * torch.randn(x.shape, generator=gen)).clamp(-1, 1)
        assert torch.equal(got, want)

    def test_contrast_matches_formula(self):
        x = make_batch(5)
        spec = DistortionSpec(kind="contrast", params={"factor": 0.93})
        got = apply_distortion(x, spec)
        m = x.mean()
        want = (0.93 * x + (1 - 0.93) * m).clamp(-1, 1)
        assert torch.allclose(got, want, atol=0, rtol=0)

    def test_blur_fixes_constant_images_exactly(self):
        x = torch.full((1, 3, 16, 16), 0.37)
        spec = DistortionSpec(kind="blur", params={"sigma": 0.8})
        out = apply_distortion(x, spec)
        assert torch.allclose(out, x, atol=1e-6)

    @pytest.mark.parametrize("kind", SAMPLED_KINDS)
    def test_shape_preserved(self, kind):
        x = make_batch(11, n=3, size=32)
        name, lo, hi = PARAM_RANGES[kind]
        spec = DistortionSpec(kind=kind, params={name: (lo + hi) / 2}, seed=5)
        out = apply_distortion(x, spec)
        assert out.shape == x.shape
        assert out.min() >= -1 and out.max() <= 1

    def test_determinism_as_pure_function(self):
        x = make_batch(13)
        rng = np.random.default_rng(0)
        for _ in range(10):
            spec = sample_distortion(rng)
            assert torch.equal(apply_distortion(x, spec), apply_distortion(x, spec))

    def test_jpeg_real_roundtrip_shape(self):
        # smooth gradient: JPEG should reproduce it closely
        ramp = torch.linspace(-0.8, 0.8, 32)
        x = (ramp.reshape(1, 1, 32, 1) + ramp.reshape(1, 1, 1, 32)).expand(1, 3, 32, 32) / 2
        spec = DistortionSpec(kind="jpeg_real", params={"quality": 80})
        out = apply_distortion(x, spec)
        assert out.shape == x.shape
        assert float((out - x).abs().mean()) < 0.05

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            DistortionSpec(kind="rotate", params={"deg": 5.0})


@settings(max_examples=30, deadline=None)
@given(
    kind=st.sampled_from(SAMPLED_KINDS),
    u=st.floats(min_value=0.0, max_value=1.0),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
def test_serialization_roundtrip(kind, u, seed):
    name, lo, hi = PARAM_RANGES[kind]
    spec = DistortionSpec(kind=kind, params={name: lo + u * (hi - lo)}, seed=seed)
    assert DistortionSpec.from_json(spec.to_json()) == spec


def test_out_of_range_param_rejected():
    with pytest.raises(ValueError):
        DistortionSpec(kind="blur", params={"sigma": 1.5})
