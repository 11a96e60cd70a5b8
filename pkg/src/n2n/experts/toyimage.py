"""Procedural toy image domain: one coloured square on a black canvas.

Images are flat float arrays in ``[0, 1]`` laid out row-major as
``(row, col, channel)``.  The attribute tuple is ``(posx, posy, size, hue)``
where ``posx`` is the column and ``posy`` the row of the top-left corner.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from ..diffcore import Rng

# every colour keeps a common floor so squares of different hue at the same
# place still overlap in all channels (as hue edits of real images keep shape)
DEFAULT_PALETTE = (
    (1.0, 0.2, 0.2),  # red
    (0.2, 1.0, 0.2),  # green
    (0.2, 0.2, 1.0),  # blue
    (1.0, 1.0, 0.2),  # yellow
)


class ToyImageWorld:
    def __init__(self, size=8, sizes=(2, 3), palette=DEFAULT_PALETTE):
        self.size = size
        self.sizes = tuple(sizes)
        self.palette = np.asarray(palette, dtype=np.float64)
        self.n_hues = len(self.palette)
        self.n_hue_bits = max(1, math.ceil(math.log2(self.n_hues)))
        self.image_dim = size * size * 3
        attrs = [(x, y, s, c)
                 for c in range(self.n_hues)
                 for s in self.sizes
                 for y in range(size - s + 1)
                 for x in range(size - s + 1)]
        self.attrs = np.array(attrs, dtype=np.int64)
        self.templates = np.stack([self.render(*a) for a in attrs])
        self._lookup = {a: i for i, a in enumerate(attrs)}

    @property
    def n_images(self):
        return len(self.attrs)

    @property
    def n_attr_bits(self):
        return self.n_hue_bits + 1

    def render(self, posx, posy, size, hue):
        if size not in self.sizes or not 0 <= hue < self.n_hues:
            raise ValueError(f"invalid attributes {(posx, posy, size, hue)}")
        if not (0 <= posx <= self.size - size and 0 <= posy <= self.size - size):
            raise ValueError(f"square does not fit: {(posx, posy, size)}")
        img = np.zeros((self.size, self.size, 3))
        img[posy:posy + size, posx:posx + size] = self.palette[hue]
        return img.reshape(-1)

    def render_many(self, attrs):
        return np.stack([self.render(*a) for a in np.asarray(attrs)])

    def sample_attrs(self, rng: Rng, n, hues=None):
        """Uniform draws over all images (optionally restricted to ``hues``)."""
        pool = self.attrs if hues is None else self.attrs[np.isin(self.attrs[:, 3], hues)]
        return pool[rng.integers(len(pool), (n,))]

    def sample(self, rng: Rng, n, hues=None):
        attrs = self.sample_attrs(rng, n, hues)
        return self.templates[self._index(attrs)], attrs

    def _index(self, attrs):
        return np.array([self._lookup[tuple(a)] for a in np.asarray(attrs).tolist()])

    def attribute_bits(self, attrs):
        """Binary attribute vectors: hue class in binary, then a large-size flag."""
        attrs = np.atleast_2d(attrs)
        hue = attrs[:, 3]
        bits = [(hue >> i) & 1 for i in range(self.n_hue_bits)]
        bits.append((attrs[:, 2] == max(self.sizes)).astype(np.int64))
        return np.stack(bits, axis=1).astype(np.float64)

    def hue_from_bits(self, bits):
        bits = np.atleast_2d(bits)
        return sum((bits[:, i] > 0.5).astype(np.int64) << i for i in range(self.n_hue_bits))

    def classify(self, images):
        """Invert the renderer: attributes of the nearest renderable image."""
        images = np.atleast_2d(images)
        t = self.templates
        d = (images * images).sum(1)[:, None] - 2.0 * images @ t.T + (t * t).sum(1)[None, :]
        return self.attrs[np.argmin(d, axis=1)]

    def hue_of(self, images):
        """Hue read from the colour of the foreground pixels; -1 for a blank image.

        Unlike ``classify`` this does not need the square to be intact, so it
        also reads deformed (wrapped or cropped) images.
        """
        images = np.atleast_2d(images).reshape(-1, self.size * self.size, 3)
        fg = images.max(axis=2) > 0.5
        out = np.full(len(images), -1, dtype=np.int64)
        for i, (img, mask) in enumerate(zip(images, fg)):
            if mask.any():
                colour = img[mask].mean(axis=0)
                out[i] = int(np.argmin(((self.palette - colour) ** 2).sum(axis=1)))
        return out

    def segmentation(self, images):
        """Content expert: foreground mask (which pixels the square covers)."""
        images = np.atleast_2d(images).reshape(-1, self.size * self.size, 3)
        return (images.max(axis=2) > 0.5).astype(np.float64)

    def content_moments(self, images):
        """Content expert: centroid (row, col) and square root of the area of
        the foreground mask, centred and scaled to roughly unit range."""
        mask = self.segmentation(images).reshape(-1, self.size, self.size)
        area = np.maximum(mask.sum(axis=(1, 2)), 1.0)
        idx = np.arange(self.size)
        row = (mask.sum(axis=2) * idx).sum(axis=1) / area
        col = (mask.sum(axis=1) * idx).sum(axis=1) / area
        mid = (self.size - 1) / 2
        side = np.mean(self.sizes)
        return np.stack([(row - mid) / 2, (col - mid) / 2, np.sqrt(area) - side], axis=1)

    def dump(self, directory, images, attrs):
        """Write ``images.u8`` and ``attrs.csv``; returns per-image byte offsets."""
        os.makedirs(directory, exist_ok=True)
        images = np.atleast_2d(images)
        raw = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
        _atomic_write(os.path.join(directory, "images.u8"), raw.tobytes())
        bits = self.attribute_bits(attrs).astype(np.int64)
        rows = ["index,posx,posy,size,hue_class,attr_bits"]
        for i, (a, b) in enumerate(zip(np.asarray(attrs), bits)):
            rows.append(f"{i},{a[0]},{a[1]},{a[2]},{a[3]},{''.join(str(x) for x in b)}")
        _atomic_write(os.path.join(directory, "attrs.csv"), ("\n".join(rows) + "\n").encode())
        return [i * self.image_dim for i in range(len(images))]


def load_dump(directory, image_dim):
    with open(os.path.join(directory, "images.u8"), "rb") as fh:
        raw = np.frombuffer(fh.read(), dtype=np.uint8)
    images = raw.reshape(-1, image_dim).astype(np.float64) / 255.0
    with open(os.path.join(directory, "attrs.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    attrs = np.array([[int(r["posx"]), int(r["posy"]), int(r["size"]), int(r["hue_class"])]
                      for r in rows], dtype=np.int64)
    return images, attrs


def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# -- deformation -------------------------------------------------------------

@dataclass(frozen=True)
class Deformation:
    flip: bool = False
    shift_x: int = 0
    shift_y: int = 0
    crop: int | None = None  # side of the square crop; None keeps the full image
    crop_x: int = 0
    crop_y: int = 0


def sample_deformation(rng: Rng, size=8, max_shift=2, flip_prob=0.5, min_crop_area=0.75):
    sides = [c for c in range(1, size + 1) if c * c >= min_crop_area * size * size]
    flip = bool(rng.uniform() < flip_prob)
    sx, sy = (int(v) - max_shift for v in rng.integers(2 * max_shift + 1, (2,)))
    side = sides[int(rng.integers(len(sides)))]
    cx, cy = (int(v) for v in rng.integers(size - side + 1, (2,)))
    return Deformation(flip, sx, sy, None if side == size else side, cx, cy)


def apply_deformation(image, d: Deformation, size=8):
    img = np.asarray(image, dtype=np.float64).reshape(size, size, 3)
    if d.flip:
        img = img[:, ::-1]
    if d.shift_x or d.shift_y:
        img = np.roll(img, (d.shift_y, d.shift_x), axis=(0, 1))
    if d.crop is not None:
        if d.crop < 1 or d.crop > size:
            raise ValueError(f"crop side {d.crop} outside [1, {size}]")
        patch = img[d.crop_y:d.crop_y + d.crop, d.crop_x:d.crop_x + d.crop]
        idx = (np.arange(size) * d.crop) // size
        img = patch[idx][:, idx]
    return np.ascontiguousarray(img).reshape(-1)


def deform(image, rng: Rng, size=8, max_shift=2):
    """Random flip, toroidal translation and crop-and-resize.

    Every component moves pixels without changing their colour, so the
    appearance (hue) of the square is preserved.
    """
    if size < 4:
        raise ValueError("image too small to crop")
    return apply_deformation(image, sample_deformation(rng, size, max_shift), size)
