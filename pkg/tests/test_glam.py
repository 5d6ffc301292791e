import pytest
import torch

from soma.errors import ValidationError
from soma.geometry import DisplacementField, affine_to_flow, compose, resize_flow
from soma.glam import (
    DEFAULT_AFFINE_LEVELS,
    DEFAULT_FLOW_LEVELS,
    AffineRegressor,
    FlowRegressor,
    GlamMatcher,
)

WIDTHS = {1: 8, 2: 8, 4: 16, 8: 16, 16: 16}

IDENTITY = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def make_pyramids(batch=1, size=32, widths=WIDTHS, seed=0, identical=False):
    g = torch.Generator().manual_seed(seed)
    def draw():
        return {l: torch.randn(batch, widths[l], size // l, size // l, generator=g)
                for l in (1, 2, 4, 8, 16)}
    a = draw()
    b = {l: t.clone() for l, t in a.items()} if identical else draw()
    return a, b


class TestRegressorInit:
    def test_fresh_affine_regressor_outputs_identity(self):
        torch.manual_seed(0)
        reg = AffineRegressor(16, 16)
        theta = reg(torch.randn(3, 16, 8, 8))
        assert torch.equal(theta, IDENTITY.expand(3, 2, 3))

    def test_fresh_flow_regressor_outputs_zero(self):
        torch.manual_seed(1)
        reg = FlowRegressor(16, 16)
        flow, feats = reg(torch.randn(2, 16, 8, 8))
        assert flow.shape == (2, 8, 8, 2)
        assert (flow == 0).all()
        assert feats.shape[1] == 16

    def test_batch_rows_are_independent(self):
        torch.manual_seed(2)
        reg = AffineRegressor(8, 8)
        for m in reg.mlp:
            if isinstance(m, torch.nn.Linear):
                torch.nn.init.normal_(m.weight)
        x = torch.randn(1, 8, 6, 6)
        pair = torch.cat([x, x], dim=0)
        theta = reg(pair)
        assert torch.allclose(theta[0], theta[1], atol=1e-6)


class TestMatchAtInit:
    def test_final_field_is_exactly_zero(self):
        torch.manual_seed(3)
        matcher = GlamMatcher(WIDTHS)
        pyr_o, pyr_s = make_pyramids(seed=4)
        result = matcher.match(pyr_o, pyr_s)
        assert result.final_field.shape == (1, 32, 32, 2)
        assert (result.final_field == 0).all()
        for out in result.per_level.values():
            assert (out.accumulated == 0).all()

    def test_identical_pyramids_also_give_zero(self):
        torch.manual_seed(5)
        matcher = GlamMatcher(WIDTHS)
        pyr_o, pyr_s = make_pyramids(seed=6, identical=True)
        assert (matcher.match(pyr_o, pyr_s).final_field == 0).all()

    def test_certainty_logits_shape(self):
        torch.manual_seed(7)
        matcher = GlamMatcher(WIDTHS)
        pyr_o, pyr_s = make_pyramids(batch=2, seed=8)
        result = matcher.match(pyr_o, pyr_s)
        assert result.certainty_logits.shape == (2, 32, 32)


class TestLevelBookkeeping:
    def _trained_ish_matcher(self, seed=9):
        # randomize the zero-initialized heads so fields are nontrivial
        torch.manual_seed(seed)
        matcher = GlamMatcher(WIDTHS)
        with torch.no_grad():
            for reg in matcher.flow.values():
                torch.nn.init.normal_(reg.head.weight, std=0.05)
            for reg in matcher.affine.values():
                torch.nn.init.normal_(reg.mlp[-1].weight, std=0.01)
        return matcher

    def test_per_level_keys_follow_the_stage_list(self):
        matcher = GlamMatcher(WIDTHS)
        pyr_o, pyr_s = make_pyramids(seed=10)
        result = matcher.match(pyr_o, pyr_s)
        assert set(result.per_level) == {16, 8, 4, 2, 1}
        assert result.affine_levels == DEFAULT_AFFINE_LEVELS
        assert result.flow_levels == DEFAULT_FLOW_LEVELS
        assert result.per_level[16].flow_residual is None
        assert result.per_level[2].theta is None

    def test_accumulated_equals_compose_of_prev_and_residual(self):
        matcher = self._trained_ish_matcher()
        pyr_o, pyr_s = make_pyramids(seed=11)
        result = matcher.match(pyr_o, pyr_s)
        for l in DEFAULT_FLOW_LEVELS:
            out = result.per_level[l]
            redone = compose(out.previous, out.flow_residual)
            assert torch.equal(out.accumulated, redone)

    def test_previous_is_the_upsampled_coarser_field(self):
        matcher = self._trained_ish_matcher(seed=12)
        pyr_o, pyr_s = make_pyramids(seed=13)
        result = matcher.match(pyr_o, pyr_s)
        for coarse, fine in ((16, 8), (8, 4), (4, 2), (2, 1)):
            carried = result.per_level[fine].previous
            h, w = carried.shape[1:3]
            redone = resize_flow(result.per_level[coarse].accumulated, (h, w), 2.0)
            assert torch.equal(carried, redone)

    def test_affine_field_round_trips_through_theta(self):
        matcher = self._trained_ish_matcher(seed=14)
        pyr_o, pyr_s = make_pyramids(seed=15)
        result = matcher.match(pyr_o, pyr_s)
        for l in DEFAULT_AFFINE_LEVELS:
            out = result.per_level[l]
            h, w = out.affine_field.shape[1:3]
            redone = affine_to_flow(out.theta, h, w)
            assert torch.allclose(out.affine_field, redone, atol=1e-6)

    def test_final_displacement_wraps_level_one(self):
        matcher = GlamMatcher(WIDTHS)
        pyr_o, pyr_s = make_pyramids(seed=16)
        disp = matcher.match(pyr_o, pyr_s).final_displacement()
        assert isinstance(disp, DisplacementField)
        assert disp.level == 1


class TestConfigurations:
    def test_flow_only_ablation_drops_the_affine_path(self):
        torch.manual_seed(17)
        matcher = GlamMatcher(WIDTHS, affine_levels=(),
                              flow_levels=(16, 8, 4, 2, 1))
        pyr_o, pyr_s = make_pyramids(seed=18)
        result = matcher.match(pyr_o, pyr_s)
        assert result.affine_levels == ()
        assert result.flow_levels == (16, 8, 4, 2, 1)
        assert (result.final_field == 0).all()
        assert result.certainty_logits is not None

    def test_certainty_can_be_skipped_without_changing_the_field(self):
        torch.manual_seed(19)
        matcher = GlamMatcher(WIDTHS)
        pyr_o, pyr_s = make_pyramids(seed=20)
        with_c = matcher.match(pyr_o, pyr_s, with_certainty=True)
        without = matcher.match(pyr_o, pyr_s, with_certainty=False)
        assert without.certainty_logits is None
        assert torch.equal(with_c.final_field, without.final_field)

    def test_unknown_level_rejected(self):
        with pytest.raises(ValidationError):
            GlamMatcher(WIDTHS, affine_levels=(32,))

    def test_missing_width_rejected(self):
        with pytest.raises(ValidationError):
            GlamMatcher({1: 8, 2: 8}, flow_levels=(4, 2, 1))

    def test_empty_matcher_rejected(self):
        with pytest.raises(ValidationError):
            GlamMatcher(WIDTHS, affine_levels=(), flow_levels=())

    def test_pyramid_spatial_mismatch_rejected(self):
        matcher = GlamMatcher(WIDTHS)
        pyr_o, _ = make_pyramids(seed=21, size=32)
        _, pyr_s = make_pyramids(seed=22, size=64)
        with pytest.raises(ValidationError):
            matcher.match(pyr_o, pyr_s)

    def test_unbatched_pyramids_produce_batch_of_one(self):
        torch.manual_seed(23)
        matcher = GlamMatcher(WIDTHS)
        pyr_o, pyr_s = make_pyramids(seed=24)
        single_o = {l: t[0] for l, t in pyr_o.items()}
        single_s = {l: t[0] for l, t in pyr_s.items()}
        result = matcher.match(single_o, single_s)
        assert result.final_field.shape == (1, 32, 32, 2)


class TestGradients:
    def test_every_regressor_receives_gradient(self):
        torch.manual_seed(25)
        matcher = GlamMatcher(WIDTHS)
        pyr_o, pyr_s = make_pyramids(seed=26)
        result = matcher.match(pyr_o, pyr_s)
        proj = torch.randn_like(result.final_field)
        loss = (result.final_field * proj).sum()
        loss = loss + sum((out.affine_field * 0.1).sum()
                          for out in result.per_level.values()
                          if out.affine_field is not None)
        loss.backward()
        for name, p in matcher.named_parameters():
            if name.endswith("head.weight") or "mlp.2" in name:
                assert p.grad is not None, name
                assert p.grad.abs().sum().item() > 0, name
