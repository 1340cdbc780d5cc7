"""Per-object masks and crops handed to the pose estimator.

The default mask source is the ground-truth object-id map rendered with each
frame, so pose results measure the estimation pipeline under perfect masks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scenegen import Frame

DEFAULT_PAD = 5


class ObjectNotInFrameError(LookupError):
    pass


@dataclass(frozen=True)
class SegmentationMap:
    """``N + 1`` binary channels; channel 0 is background, channel ``k`` is ``object_ids[k-1]``."""

    channels: np.ndarray  # (N + 1, H, W) bool
    object_ids: tuple[int, ...]

    def channel(self, object_id: int) -> np.ndarray:
        try:
            return self.channels[1 + self.object_ids.index(object_id)]
        except ValueError:
            raise ObjectNotInFrameError(f"object {object_id} has no segmentation channel") from None

    def to_mask(self) -> np.ndarray:
        """Recombine the channels into an object-id map."""
        ids = np.array((0, *self.object_ids), dtype=np.int64)
        return ids[np.argmax(self.channels, axis=0)]

    def check(self) -> None:
        counts = self.channels.sum(axis=0)
        if not np.all(counts == 1):
            raise ValueError("segmentation channels must be mutually exclusive and cover the frame")


def gt_segment(frame: Frame, object_ids: Sequence[int] | None = None) -> SegmentationMap:
    """Split the frame's object-id mask into one binary channel per object.

    ``object_ids`` fixes the channel layout (e.g. the dataset registry); by
    default it is every object with a pose or a mask label in the frame.
    """
    if object_ids is None:
        object_ids = sorted(set(frame.gt_poses) | set(frame.object_ids()))
    ids = tuple(int(i) for i in object_ids)
    mask = frame.mask.astype(np.int64)
    fg = [mask == oid for oid in ids]
    bg = ~np.any(fg, axis=0) if fg else np.ones(mask.shape, bool)
    return SegmentationMap(np.stack([bg, *fg]), ids)


@dataclass(frozen=True)
class Crop:
    color: np.ndarray  # (h, w, 3) uint8
    mask: np.ndarray  # (h, w) bool, object channel inside the box
    depth: np.ndarray  # (n,) meters at the object pixels
    pixels: np.ndarray  # (n, 2) full-frame (row, col), row-major order
    bbox: tuple[int, int, int, int]  # top, left, bottom, right (exclusive)

    @property
    def local_pixels(self) -> np.ndarray:
        return self.pixels - np.array(self.bbox[:2])


def bounding_box(channel: np.ndarray, pad: int = DEFAULT_PAD) -> tuple[int, int, int, int]:
    rows, cols = np.nonzero(channel)
    H, W = channel.shape
    return (
        max(0, int(rows.min()) - pad),
        max(0, int(cols.min()) - pad),
        min(H, int(rows.max()) + 1 + pad),
        min(W, int(cols.max()) + 1 + pad),
    )


def crop_and_mask(seg: SegmentationMap, object_id: int, frame: Frame, pad: int = DEFAULT_PAD) -> Crop:
    """Padded, image-clamped bounding-box crop plus the object's pixels and depths."""
    chan = seg.channel(object_id)
    if not chan.any():
        raise ObjectNotInFrameError(f"object {object_id} not visible in frame {frame.frame_id!r}")
    top, left, bottom, right = bounding_box(chan, pad)
    rows, cols = np.nonzero(chan)
    return Crop(
        color=frame.color[top:bottom, left:right],
        mask=chan[top:bottom, left:right],
        depth=frame.depth[rows, cols],
        pixels=np.stack([rows, cols], axis=1),
        bbox=(top, left, bottom, right),
    )
