import pytest
import torch

from soma.errors import ConfigurationError
from soma.model import ABLATION_PRESETS, AblationFlags, SomaModel, build_model

SLIM = {1: 8, 2: 8, 4: 16, 8: 16, 16: 16}


def slim_model(preset="full"):
    return build_model(preset, widths=SLIM)


class TestConstruction:

    @pytest.mark.parametrize("preset", sorted(ABLATION_PRESETS))
    def test_every_preset_builds_and_runs(self, preset):
        model = slim_model(preset)
        optical = torch.rand(1, 3, 32, 32)
        sar = torch.rand(1, 1, 32, 32)
        result = model(optical, sar)
        assert result.final_field.shape == (1, 32, 32, 2)

    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigurationError, match="preset"):
            build_model("everything")

    def test_flags_grid_is_complete(self):
        combos = {(f.dino, f.fge, f.glam) for f in ABLATION_PRESETS.values()}
        assert len(combos) == 8


class TestAblationWiring:

    def test_frozen_params_only_with_coarse_encoder(self):
        with_coarse = slim_model("dino").parameter_signature()
        without = slim_model("baseline").parameter_signature()
        assert with_coarse[1] > 0
        assert without[1] == 0

    def test_fge_flag_toggles_enhancer(self):
        assert slim_model("fge").fge.enabled
        assert not slim_model("baseline").fge.enabled

    def test_matcher_fallback_covers_all_levels(self):
        off = slim_model("baseline")
        assert off.matcher.affine_levels == ()
        assert off.matcher.flow_levels == (16, 8, 4, 2, 1)
        on = slim_model("glam")
        assert on.matcher.affine_levels == (16, 8, 4)
        assert on.matcher.flow_levels == (8, 4, 2, 1)

    def test_signatures_distinct_across_presets(self):
        signatures = {p: slim_model(p).parameter_signature()
                      for p in ABLATION_PRESETS}
        assert len(set(signatures.values())) == len(signatures)

    def test_adding_components_adds_parameters(self):
        base = slim_model("baseline").parameter_signature()[0]
        assert slim_model("fge").parameter_signature()[0] > base


class TestForward:

    def test_identity_at_init(self):
        model = slim_model("full")
        result = model(torch.rand(2, 3, 32, 32), torch.rand(2, 1, 32, 32))
        assert (result.final_field == 0).all()

    def test_certainty_logits_present_by_default(self):
        result = slim_model("full")(torch.rand(1, 3, 32, 32),
                                    torch.rand(1, 1, 32, 32))
        assert result.certainty_logits is not None
        assert result.certainty_logits.shape == (1, 32, 32)

    def test_certainty_can_be_skipped(self):
        result = slim_model("full")(torch.rand(1, 3, 32, 32),
                                    torch.rand(1, 1, 32, 32),
                                    with_certainty=False)
        assert result.certainty_logits is None

    def test_level_keys_follow_flags(self):
        res = slim_model("full")(torch.rand(1, 3, 32, 32),
                                 torch.rand(1, 1, 32, 32))
        assert res.affine_levels == (16, 8, 4)
        assert res.flow_levels == (8, 4, 2, 1)
        res_off = slim_model("baseline")(torch.rand(1, 3, 32, 32),
                                         torch.rand(1, 1, 32, 32))
        assert res_off.affine_levels == ()
        assert res_off.flow_levels == (16, 8, 4, 2, 1)


class TestDeterminism:

    def test_frozen_hash_matches_across_instances(self):
        a = SomaModel(widths=SLIM, flags=AblationFlags(), coarse_seed=7)
        b = SomaModel(widths=SLIM, flags=AblationFlags(), coarse_seed=7)
        assert a.frozen_parameter_hash() == b.frozen_parameter_hash()

    def test_frozen_hash_tracks_seed(self):
        a = SomaModel(widths=SLIM, flags=AblationFlags(), coarse_seed=1)
        b = SomaModel(widths=SLIM, flags=AblationFlags(), coarse_seed=2)
        assert a.frozen_parameter_hash() != b.frozen_parameter_hash()

    def test_gradients_reach_all_trainable_parts(self):
        model = slim_model("full")
        result = model(torch.rand(1, 3, 32, 32), torch.rand(1, 1, 32, 32))
        loss = sum(o.flow_residual.square().sum()
                   for o in result.per_level.values()
                   if o.flow_residual is not None)
        loss = loss + sum(o.theta.square().sum()
                          for o in result.per_level.values()
                          if o.theta is not None)
        loss.backward()
        missing = [n for n, p in model.named_parameters()
                   if p.requires_grad and p.grad is None
                   and "certainty" not in n]
        assert missing == []
