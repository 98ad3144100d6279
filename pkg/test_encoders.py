"""Tests for the frame and event encoders."""

import pytest
import torch
import torch.nn.functional as F

from src.encoders import (LRELU_SLOPE, EventEncoder, FrameEncoder, ResidualBlock, extract_event_features,
                          extract_frame_features)


def test_fresh_residual_block_is_identity():
    block = ResidualBlock(4)
    x = torch.randn(2, 4, 5, 5)
    assert torch.equal(block(x), x)


def test_frame_encoder_shapes():
    encoder = FrameEncoder(channels=8, num_blocks=2)
    assert extract_frame_features(encoder, torch.rand(3, 6, 7)).shape == (8, 6, 7)
    assert extract_frame_features(encoder, torch.rand(2, 3, 6, 7)).shape == (2, 8, 6, 7)
    assert extract_frame_features(encoder, torch.rand(2, 4, 3, 6, 7)).shape == (2, 4, 8, 6, 7)


def test_event_encoder_shapes():
    encoder = EventEncoder(channels=8, num_blocks=1)
    assert extract_event_features(encoder, torch.randn(2, 3, 2, 5, 5)).shape == (2, 3, 8, 5, 5)


def test_batched_encoding_matches_single():
    encoder = EventEncoder(channels=4, num_blocks=1)
    segments = torch.randn(1, 3, 2, 6, 6)
    batched = extract_event_features(encoder, segments)
    single = extract_event_features(encoder, segments[0, 1])
    torch.testing.assert_close(batched[0, 1], single)


def test_fresh_encoder_is_head_and_activation():
    encoder = FrameEncoder(channels=4, num_blocks=3)
    x = torch.rand(1, 3, 8, 8)
    torch.testing.assert_close(encoder(x), F.leaky_relu(encoder.head(x), LRELU_SLOPE))


def test_wrong_channel_count_raises_type_error():
    with pytest.raises(TypeError):
        extract_frame_features(FrameEncoder(4, 1), torch.rand(1, 2, 5, 5))
    with pytest.raises(TypeError):
        extract_event_features(EventEncoder(4, 1), torch.rand(1, 3, 5, 5))
    with pytest.raises(TypeError):
        FrameEncoder(4, 1)(torch.rand(3, 5, 5))


def test_zero_blocks_allowed():
    encoder = EventEncoder(channels=4, num_blocks=0)
    assert encoder(torch.randn(1, 2, 3, 3)).shape == (1, 4, 3, 3)
