"""Bounding boxes: overlap and the 7-d normalized geometry vector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float
    W: float
    H: float

    def __post_init__(self):
        if not (0 <= self.x1 < self.x2 <= self.W and 0 <= self.y1 < self.y2 <= self.H):
            raise ContractError(f"invalid box {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_json(self) -> dict:
        return {"x1": self.x1, "y1": self.y1, "x2": self.x2, "y2": self.y2, "W": self.W, "H": self.H}

    @classmethod
    def from_json(cls, d: dict) -> BBox:
        return cls(d["x1"], d["y1"], d["x2"], d["y2"], d["W"], d["H"])


def iou(a: BBox, b: BBox) -> float:
    if a.area <= 0 or b.area <= 0:
        raise ContractError("iou of a zero-area box")
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def positional_encode(box: BBox) -> np.ndarray:
    """[x1/W, y1/H, x2/W, y2/H, w/W, h/H, w*h/(W*H)]"""
    w, h = box.width, box.height
    return np.array(
        [box.x1 / box.W, box.y1 / box.H, box.x2 / box.W, box.y2 / box.H, w / box.W, h / box.H, (w * h) / (box.W * box.H)],
        dtype=np.float64,
    )
