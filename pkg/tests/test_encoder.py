import hashlib

import pytest
import torch

from oracles import resize_bilinear_oracle
from soma.encoder import (
    DEFAULT_WIDTHS,
    CoarseEncoderHandle,
    FeaturePyramid,
    PyramidEncoder,
    adapt_coarse_grid,
    build_default_coarse,
)
from soma.errors import ConfigurationError, ValidationError

SMALL_WIDTHS = {1: 8, 2: 8, 4: 16, 8: 16, 16: 16}


def _param_hash(module):
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


class TestAdaptCoarseGrid:
    def test_matching_size_is_untouched(self):
        raw = torch.randn(4, 8, 8)
        assert adapt_coarse_grid(raw, (8, 8)) is raw

    def test_resampling_matches_loop_oracle(self):
        torch.manual_seed(0)
        raw = torch.randn(4, 9, 9, dtype=torch.float64)
        out = adapt_coarse_grid(raw, (8, 8))
        expected = resize_bilinear_oracle(raw.numpy(), 8, 8)
        assert torch.allclose(out, torch.from_numpy(expected), atol=1e-6)

    def test_constant_stays_constant(self):
        raw = torch.full((2, 5, 7), 1.25)
        out = adapt_coarse_grid(raw, (8, 8))
        assert torch.allclose(out, torch.full((2, 8, 8), 1.25), atol=1e-6)

    def test_batched_input_keeps_batch_dim(self):
        raw = torch.randn(2, 4, 5, 5)
        assert adapt_coarse_grid(raw, (10, 10)).shape == (2, 4, 10, 10)

    def test_degenerate_sizes_rejected(self):
        with pytest.raises(ValidationError):
            adapt_coarse_grid(torch.randn(4, 3, 3), (0, 8))


class TestPyramidShapes:
    def test_desk_schedule_on_128(self):
        torch.manual_seed(1)
        enc = PyramidEncoder()
        pyr = enc.encode(torch.randn(3, 128, 128), "optical")
        for level, size in ((1, 128), (2, 64), (4, 32), (8, 16), (16, 8)):
            feat = pyr.levels[level]
            assert feat.shape == (DEFAULT_WIDTHS[level], size, size)

    def test_batched_encode(self):
        torch.manual_seed(2)
        enc = PyramidEncoder(SMALL_WIDTHS)
        pyr = enc.encode(torch.randn(2, 1, 32, 48), "sar")
        assert pyr.levels[4].shape == (2, SMALL_WIDTHS[4], 8, 12)

    def test_batched_matches_unbatched(self):
        torch.manual_seed(3)
        enc = PyramidEncoder(SMALL_WIDTHS).eval()
        x = torch.randn(1, 32, 32)
        single = enc.encode(x, "sar")
        batched = enc.encode(x.unsqueeze(0), "sar")
        for level in (1, 2, 4, 8, 16):
            assert torch.allclose(single.levels[level],
                                  batched.levels[level][0], atol=1e-6)

    def test_indivisible_size_rejected(self):
        enc = PyramidEncoder(SMALL_WIDTHS)
        with pytest.raises(ValidationError):
            enc.encode(torch.randn(3, 100, 96), "optical")

    def test_unknown_modality_rejected(self):
        enc = PyramidEncoder(SMALL_WIDTHS)
        with pytest.raises(ValidationError):
            enc.encode(torch.randn(3, 32, 32), "thermal")

    def test_schedule_missing_level_rejected(self):
        with pytest.raises(ConfigurationError):
            PyramidEncoder({1: 8, 2: 8, 4: 16, 8: 16})

    def test_pyramid_check_flags_bad_spatial_size(self):
        levels = {l: torch.randn(4, 32 // l, 32 // l) for l in (1, 2, 4, 8, 16)}
        levels[4] = torch.randn(4, 9, 9)
        with pytest.raises(ValidationError):
            FeaturePyramid(levels, "optical").check()


class TestCoarseEncoder:
    def test_frozen_encode_is_deterministic(self):
        torch.manual_seed(4)
        enc = PyramidEncoder(SMALL_WIDTHS)
        x = torch.randn(3, 32, 32)
        a = enc.encode(x, "optical").levels[16]
        b = enc.encode(x, "optical").levels[16]
        assert torch.equal(a, b)

    def test_seeded_build_is_reproducible(self):
        a = build_default_coarse(16, seed=9)
        b = build_default_coarse(16, seed=9)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_frozen_parameters_take_no_gradient(self):
        torch.manual_seed(5)
        enc = PyramidEncoder(SMALL_WIDTHS)
        before = _param_hash(enc.coarse)
        opt = torch.optim.SGD([p for p in enc.parameters() if p.requires_grad], lr=0.1)
        pyr = enc.encode(torch.randn(3, 32, 32), "optical")
        loss = sum(f.square().mean() for f in pyr.levels.values())
        loss.backward()
        opt.step()
        assert _param_hash(enc.coarse) == before
        assert all(not p.requires_grad for p in enc.coarse.parameters())

    def test_trainable_parameters_move(self):
        torch.manual_seed(6)
        enc = PyramidEncoder(SMALL_WIDTHS)
        before = _param_hash(enc.optical)
        opt = torch.optim.SGD([p for p in enc.parameters() if p.requires_grad], lr=0.1)
        pyr = enc.encode(torch.randn(3, 32, 32), "optical")
        loss = sum(f.square().mean() for l, f in pyr.levels.items() if l != 16)
        loss.backward()
        opt.step()
        assert _param_hash(enc.optical) != before

    def test_missing_coarse_encoder_is_a_configuration_error(self):
        enc = PyramidEncoder(SMALL_WIDTHS, coarse=None)
        with pytest.raises(ConfigurationError):
            enc.encode(torch.randn(3, 32, 32), "optical")

    def test_single_channel_input_is_accepted(self):
        handle = CoarseEncoderHandle(build_default_coarse(16), frozen=True)
        out = handle(torch.randn(1, 1, 32, 32))
        assert out.shape == (1, 16, 2, 2)

    def test_trainable_coarse_stage_when_frozen_path_disabled(self):
        torch.manual_seed(7)
        enc = PyramidEncoder(SMALL_WIDTHS, frozen_coarse=False)
        assert enc.coarse is None
        pyr = enc.encode(torch.randn(3, 32, 32), "optical")
        assert pyr.levels[16].shape == (SMALL_WIDTHS[16], 2, 2)
        assert enc.optical.stage16 is not None
        assert all(p.requires_grad for p in enc.optical.stage16.parameters())


class TestModalitySeparation:
    def test_no_shared_parameters(self):
        enc = PyramidEncoder(SMALL_WIDTHS)
        optical_ids = {id(p) for p in enc.optical.parameters()}
        sar_ids = {id(p) for p in enc.sar.parameters()}
        assert optical_ids.isdisjoint(sar_ids)

    def test_same_image_encodes_differently_per_modality(self):
        torch.manual_seed(8)
        enc = PyramidEncoder(SMALL_WIDTHS, optical_channels=1, sar_channels=1)
        x = torch.randn(1, 32, 32)
        po = enc.encode(x, "optical")
        ps = enc.encode(x, "sar")
        assert not torch.allclose(po.levels[1], ps.levels[1])
