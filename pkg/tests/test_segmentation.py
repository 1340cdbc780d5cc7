import numpy as np
import pytest

from ctxpose.scenegen import Frame
from ctxpose.segmentation import ObjectNotInFrameError, bounding_box, crop_and_mask, gt_segment
from ctxpose.geometry import DESK_CAMERA


def _frame(mask, poses=None):
    H, W = mask.shape
    color = np.arange(H * W * 3, dtype=np.uint32).reshape(H, W, 3).astype(np.uint8)
    depth = np.where(mask > 0, 0.5, 1.2)
    return Frame(color, depth, mask.astype(np.uint8), poses or {}, DESK_CAMERA, "f")


def test_channels_partition_the_frame(tiny_frames):
    for fr in tiny_frames:
        seg = gt_segment(fr)
        seg.check()
        assert seg.channels.shape[0] == len(seg.object_ids) + 1
        assert np.array_equal(seg.to_mask(), fr.mask)


def test_fixed_channel_layout():
    mask = np.zeros((20, 30), np.uint8)
    mask[2:5, 3:9] = 2
    seg = gt_segment(_frame(mask), object_ids=[1, 2, 3])
    assert seg.object_ids == (1, 2, 3)
    assert not seg.channel(1).any() and seg.channel(2).sum() == 18
    with pytest.raises(ObjectNotInFrameError):
        seg.channel(4)


def test_crop_box_padding_and_clamping():
    mask = np.zeros((20, 30), np.uint8)
    mask[1:4, 10:15] = 1
    fr = _frame(mask)
    crop = crop_and_mask(gt_segment(fr), 1, fr, pad=5)
    assert crop.bbox == (0, 5, 9, 20)
    assert crop.color.shape == (9, 15, 3)
    assert crop.mask.sum() == 15 and len(crop.depth) == 15
    assert np.array_equal(crop.color, fr.color[0:9, 5:20])
    # pixels are row-major, and local coordinates index the crop
    assert np.array_equal(crop.pixels[0], [1, 10])
    loc = crop.local_pixels
    assert np.all(crop.mask[loc[:, 0], loc[:, 1]])


def test_missing_object():
    mask = np.zeros((20, 30), np.uint8)
    mask[1:4, 1:4] = 1
    fr = _frame(mask)
    seg = gt_segment(fr, object_ids=[1, 2])
    with pytest.raises(ObjectNotInFrameError):
        crop_and_mask(seg, 2, fr)
    with pytest.raises(ObjectNotInFrameError):
        crop_and_mask(seg, 5, fr)


def test_bounding_box_tight():
    ch = np.zeros((10, 10), bool)
    ch[3, 4] = ch[6, 7] = True
    assert bounding_box(ch, pad=0) == (3, 4, 7, 8)
