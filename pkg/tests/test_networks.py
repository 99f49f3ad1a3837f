import pytest
import torch

from icplab.errors import ConfigurationError, ContractViolationError
from icplab.networks import (
    ArchSpec,
    build,
    discriminate,
    encode,
    predict_cross,
    solve,
)


def make_arch(**kw):
    base = dict(
        input_shape=(1, 32, 32), d_z=8, d_y=8, mode="supervised", num_classes=4,
        trunk_widths=(8, 8, 8),
    )
    base.update(kw)
    return ArchSpec(**base)


class TestArchSpec:
    def test_supervised_requires_num_classes(self):
        with pytest.raises(ConfigurationError, match="num_classes"):
            make_arch(num_classes=None)

    def test_self_supervised_forbids_num_classes(self):
        with pytest.raises(ConfigurationError, match="num_classes"):
            make_arch(mode="self_supervised", num_classes=4)

    def test_bad_dz(self):
        with pytest.raises(ConfigurationError, match="d_z"):
            make_arch(d_z=0)

    def test_indivisible_input(self):
        with pytest.raises(ConfigurationError, match="divisible"):
            make_arch(input_shape=(1, 20, 20))

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError, match="mode"):
            make_arch(mode="weird")


class TestBuild:
    def test_shape_contract(self):
        bundle = build(make_arch(), seed=0)
        x = torch.rand(3, 1, 32, 32)
        noise = torch.zeros(3, 8)
        z, post, y = encode(bundle, x, noise)
        assert z.shape == (3, 8) and y.shape == (3, 8)
        logits = solve(bundle, "r", torch.cat([z, y], dim=-1))
        assert logits.shape == (3, 4)
        assert bundle.solver_r.in_features == 16

    def test_same_seed_identical_parameters(self):
        a = build(make_arch(), seed=123)
        b = build(make_arch(), seed=123)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self):
        a = build(make_arch(), seed=0)
        b = build(make_arch(), seed=1)
        assert any(not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))

    def test_self_supervised_decoder_shape(self):
        bundle = build(make_arch(mode="self_supervised", num_classes=None), seed=0)
        rep = torch.randn(5, 16)
        out = solve(bundle, "r", rep)
        assert out.shape == (5, 1, 32, 32)

    def test_parameter_groups_disjoint_and_complete(self):
        bundle = build(make_arch(), seed=0)
        groups = [
            {id(p) for p in bundle.main_parameters()},
            {id(p) for p in bundle.discriminator_parameters()},
            {id(p) for p in bundle.predictor_parameters()},
        ]
        assert not (groups[0] & groups[1]) and not (groups[0] & groups[2]) and not (groups[1] & groups[2])
        assert groups[0] | groups[1] | groups[2] == {id(p) for p in bundle.parameters()}


class TestEncode:
    def test_batch_shapes(self):
        bundle = build(make_arch(), seed=0)
        z, post, y = encode(bundle, torch.rand(4, 1, 32, 32), torch.zeros(4, 8))
        assert z.shape == (4, 8) and y.shape == (4, 8)
        assert post.mean.shape == (4, 8) and post.log_var.shape == (4, 8)

    def test_zero_noise_gives_posterior_mean(self):
        bundle = build(make_arch(), seed=0)
        z, post, _ = encode(bundle, torch.rand(4, 1, 32, 32), torch.zeros(4, 8))
        assert torch.equal(z, post.mean)

    def test_pure_given_parameters(self):
        bundle = build(make_arch(), seed=0)
        x = torch.rand(4, 1, 32, 32)
        noise = torch.randn(4, 8)
        z1, _, y1 = encode(bundle, x, noise)
        z2, _, y2 = encode(bundle, x, noise)
        assert torch.equal(z1, z2) and torch.equal(y1, y2)

    def test_wrong_input_shape(self):
        bundle = build(make_arch(), seed=0)
        with pytest.raises(ContractViolationError):
            encode(bundle, torch.rand(4, 1, 16, 16), torch.zeros(4, 8))


class TestDiscriminate:
    def test_codomain(self):
        bundle = build(make_arch(), seed=0)
        feat = bundle.features(torch.rand(6, 1, 32, 32))
        p = discriminate(bundle, feat, torch.randn(6, 8))
        assert p.shape == (6,)
        assert bool(((p > 0) & (p < 1)).all())

    def test_fresh_bundle_near_half(self):
        bundle = build(make_arch(), seed=0)
        feat = bundle.features(torch.rand(16, 1, 32, 32))
        p = discriminate(bundle, feat, torch.randn(16, 8))
        assert bool(((p - 0.5).abs() < 0.2).all())

    def test_per_row_function(self):
        bundle = build(make_arch(), seed=0)
        feat = bundle.features(torch.rand(5, 1, 32, 32))
        y = torch.randn(5, 8)
        p = discriminate(bundle, feat, y)
        perm = torch.tensor([3, 0, 4, 1, 2])
        assert torch.allclose(discriminate(bundle, feat[perm], y[perm]), p[perm])

    def test_batch_mismatch(self):
        bundle = build(make_arch(), seed=0)
        feat = bundle.features(torch.rand(5, 1, 32, 32))
        with pytest.raises(ContractViolationError):
            discriminate(bundle, feat, torch.randn(4, 8))


class TestPredictCross:
    def test_shapes(self):
        bundle = build(make_arch(d_z=3, d_y=5), seed=0)
        assert predict_cross(bundle, torch.randn(4, 3), "z_to_y").shape == (4, 5)
        assert predict_cross(bundle, torch.randn(4, 5), "y_to_z").shape == (4, 3)

    def test_permutation_equivariant(self):
        bundle = build(make_arch(), seed=0)
        src = torch.randn(6, 8)
        out = predict_cross(bundle, src, "z_to_y")
        perm = torch.tensor([5, 2, 0, 4, 1, 3])
        assert torch.allclose(predict_cross(bundle, src[perm], "z_to_y"), out[perm])

    def test_wrong_dimension(self):
        bundle = build(make_arch(d_z=3, d_y=5), seed=0)
        with pytest.raises(ContractViolationError):
            predict_cross(bundle, torch.randn(4, 5), "z_to_y")

    def test_unknown_direction(self):
        bundle = build(make_arch(), seed=0)
        with pytest.raises(ContractViolationError):
            predict_cross(bundle, torch.randn(4, 8), "sideways")


class TestSolve:
    def test_supervised_logits(self):
        bundle = build(make_arch(), seed=0)
        assert solve(bundle, "r", torch.randn(3, 16)).shape == (3, 4)
        assert solve(bundle, "z", torch.randn(3, 8)).shape == (3, 4)

    def test_self_supervised_codomain(self):
        bundle = build(make_arch(mode="self_supervised", num_classes=None), seed=0)
        out = solve(bundle, "z", torch.randn(3, 8) * 10)
        assert out.shape == (3, 1, 32, 32)
        assert bool(((out >= 0) & (out <= 1)).all())

    def test_z_head_ignores_y(self):
        bundle = build(make_arch(), seed=0)
        x = torch.rand(4, 1, 32, 32)
        noise = torch.randn(4, 8)
        z, _, y = encode(bundle, x, noise)
        out1 = solve(bundle, "z", z)
        # Changing y must not change the z-head output at all.
        out2 = solve(bundle, "z", z)
        assert torch.equal(out1, out2)
        assert solve(bundle, "y", y + 100.0).shape == (4, 4)
        assert torch.equal(solve(bundle, "z", z), out1)

    def test_dimension_mismatch(self):
        bundle = build(make_arch(), seed=0)
        with pytest.raises(ContractViolationError):
            solve(bundle, "z", torch.randn(3, 16))

    def test_unknown_head(self):
        bundle = build(make_arch(), seed=0)
        with pytest.raises(ContractViolationError):
            solve(bundle, "q", torch.randn(3, 8))
