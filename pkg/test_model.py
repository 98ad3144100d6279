"""Tests for the assembled model and its configuration toggles."""

import re

import pytest
import torch

from src.config import Settings
from src.events import reverse_voxel
from src.model import SpaceTimeEnhancer, build_model, count_parameters
from src.video_inr import LocalGridConfig, QuerySpec


def inputs(batch=1, m=3, size=8):
    lr = torch.rand(batch, 2, 3, size, size)
    voxel = torch.randn(batch, m + 1, size, size)
    return lr, voxel


def zero_or_missing(params):
    return all(p.grad is None or not p.grad.any() for p in params)


class TestForward:
    def test_output_shape(self, toy_settings):
        model = build_model(toy_settings)
        lr, voxel = inputs(batch=2)
        out = model(lr, voxel, QuerySpec.uniform(2, 4))
        assert out.shape == (2, 5, 3, 16, 16)

    @pytest.mark.parametrize('s', [1, 1.5, 2, 4, 6])
    @pytest.mark.parametrize('t', [1, 2, 4, 8, 12])
    def test_arbitrary_scales(self, toy_settings, s, t):
        model = build_model(toy_settings).eval()
        lr, voxel = inputs()
        with torch.no_grad():
            out = model(lr, voxel, QuerySpec.uniform(s, t))
        oh, ow = QuerySpec.uniform(s, t).output_size(8, 8)
        assert out.shape == (1, t + 1, 3, oh, ow)
        assert torch.isfinite(out).all()

    def test_default_backward_voxel_is_reversed(self, toy_settings):
        model = build_model(toy_settings).eval()
        lr, voxel = inputs()
        query = QuerySpec.uniform(2, 2)
        with torch.no_grad():
            assert torch.equal(model(lr, voxel, query), model(lr, voxel, query, reverse_voxel(voxel)))

    def test_sequence_holds_segments_and_endpoints(self, toy_settings):
        model = build_model(toy_settings)
        seq = model.features(*inputs())
        assert len(seq) == 5
        assert seq.num_segments == 3

    def test_input_validation(self, toy_settings):
        model = build_model(toy_settings)
        lr, voxel = inputs()
        with pytest.raises(ValueError):
            model(lr[:, :1], voxel, QuerySpec.uniform(1, 1))
        with pytest.raises(ValueError):
            model(lr, voxel[:, :3], QuerySpec.uniform(1, 1))
        with pytest.raises(ValueError):
            model(lr, voxel[..., :6], QuerySpec.uniform(1, 1))

    def test_window_longer_than_sequence(self):
        with pytest.raises(ValueError):
            SpaceTimeEnhancer(channels=4, num_segments=1, frame_blocks=0, event_blocks=0,
                              grid=LocalGridConfig(t_g=4))


class TestAblations:
    def run_backward(self, settings):
        model = build_model(settings)
        lr, voxel = inputs()
        model(lr, voxel, QuerySpec.uniform(2, 2)).mean().backward()
        return model

    def test_forward_only_alignment(self, toy_settings):
        toy_settings.update({'ema.direction': 'fwd'})
        model = self.run_backward(toy_settings)
        assert zero_or_missing(model.synthesis.align_bwd.parameters())
        assert not zero_or_missing(model.synthesis.align_fwd.parameters())

    def test_compensation_disabled(self, toy_settings):
        toy_settings.update({'brc.enabled': False})
        model = self.run_backward(toy_settings)
        assert zero_or_missing(model.synthesis.brc.parameters())

    def test_attention_gates_disabled(self, toy_settings):
        toy_settings.update({'brc.attention.enabled': False})
        model = self.run_backward(toy_settings)
        for attention in (model.synthesis.brc.attention_b, model.synthesis.brc.attention_f):
            assert zero_or_missing(list(attention.squeeze.parameters()) + list(attention.excite.parameters()))
            assert not zero_or_missing(attention.fuse.parameters())

    def test_forward_only_recurrence(self, toy_settings):
        toy_settings.update({'brc.direction': 'fwd'})
        model = self.run_backward(toy_settings)
        assert zero_or_missing(model.synthesis.brc.cell_b.parameters())
        assert model.synthesis.brc.cell_f.conv_in is None

    @pytest.mark.parametrize('overrides', [
        {'livt.pos_encoding': 'learnable'},
        {'livt.local_grid': [1, 3, 3]},
        {'livt.local_grid': [5, 5, 5]},
        {'livt.attention': 'neighborhood'},
        {'ema.levels': 1},
        {'brc.residual': False},
        {'livt.cell_decode': False, 'livt.prev_query': False},
    ])
    def test_variants_train(self, toy_settings, overrides):
        toy_settings.update(overrides)
        model = self.run_backward(toy_settings)
        assert not zero_or_missing(model.decoder.decoder.parameters())


class TestGradientFlow:
    # Residual blocks start with a zeroed second conv, so only their first conv
    # is cut off from the loss on a fresh model.
    EXPECTED_DEAD = re.compile(r'_encoder\.blocks\.\d+\.conv1\.')

    @staticmethod
    def dead_parameters(model):
        return sorted(name for name, p in model.named_parameters()
                      if p.grad is None or not p.grad.any())

    @staticmethod
    def backward(model):
        lr, voxel = inputs()
        model.zero_grad(set_to_none=True)
        model(lr, voxel, QuerySpec.uniform(2, 2)).square().mean().backward()

    def test_fresh_model_reaches_alignment(self, toy_settings):
        model = build_model(toy_settings)
        self.backward(model)
        dead = self.dead_parameters(model)
        assert dead
        assert all(self.EXPECTED_DEAD.search(name) for name in dead), dead
        assert not zero_or_missing(model.synthesis.align_fwd.parameters())
        assert not zero_or_missing(model.synthesis.align_bwd.parameters())

    def test_every_parameter_trains_after_one_step(self, toy_settings):
        model = build_model(toy_settings)
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
        self.backward(model)
        optimizer.step()
        self.backward(model)
        assert self.dead_parameters(model) == []


class TestParameters:
    def test_counts_per_submodule(self, toy_settings):
        counts = count_parameters(build_model(toy_settings))
        assert list(counts) == ['frame_encoder', 'event_encoder', 'synthesis', 'decoder', 'total']
        assert counts['total'] == sum(v for k, v in counts.items() if k != 'total')

    def test_presets_order_by_size(self):
        sizes = {name: count_parameters(build_model(Settings({'preset': name})))['total']
                 for name in ('toy', 'light', 'full')}
        assert sizes['toy'] < sizes['light'] < sizes['full']
