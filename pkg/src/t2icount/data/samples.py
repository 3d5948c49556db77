from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

SPLITS = ("train", "val", "test")


def load_image(path):
    """RGB file -> float tensor [3, H, W] in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_pil(image):
    arr = (image.clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0 + 0.5).astype(np.uint8)
    return Image.fromarray(arr)


@dataclass
class CountingSample:
    image_id: str
    class_name: str
    points: np.ndarray  # [N, 2] (x, y) pixel coordinates
    split: str = "test"
    source: str = ""
    path: Path | None = None
    image_tensor: torch.Tensor | None = field(default=None, repr=False)
    size: tuple | None = None  # (H, W)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.class_name or not self.class_name.strip():
            raise ValueError(f"sample {self.image_id} has an empty class name")
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    @property
    def image(self):
        if self.image_tensor is not None:
            return self.image_tensor
        if self.path is None:
            raise ValueError(f"sample {self.image_id} has neither an image nor a path")
        return load_image(self.path)

    @property
    def count(self):
        return len(self.points)

    def with_image(self, image, points):
        return replace(self, image_tensor=image, points=np.asarray(points, dtype=np.float64).reshape(-1, 2),
                       size=tuple(image.shape[-2:]), path=None)
