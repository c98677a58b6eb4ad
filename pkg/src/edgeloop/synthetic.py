"""Synthetic video corpora with known object boundaries.

Scenes are a textured background plus a few textured convex polygons.
Every region has its own base color and an internal texture (oriented
gratings plus smooth blobs), so raw gradients fire on texture as well as on
object outlines.  Between frames the background and each object move
rigidly; the true edges of a frame are the outlines of its label map.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np
from scipy import ndimage

from .imageio import write_edge_png, write_image


@dataclass
class Layer:
    color: np.ndarray           # (3,) base color
    gratings: np.ndarray        # (m, 5): amplitude, freq, angle, phase, channel mix
    mix: np.ndarray             # (m, 3) per-grating color weights
    blob: np.ndarray            # smooth noise field indexed in local coordinates
    blob_amp: float
    spots: np.ndarray = None     # hard-edged texture marks, indexed like ``blob``
    spot_color: np.ndarray = None
    vertices: np.ndarray = None  # (v, 2) polygon in local coordinates, None for background
    pos: np.ndarray = field(default_factory=lambda: np.zeros(2))
    angle: float = 0.0
    vel: np.ndarray = field(default_factory=lambda: np.zeros(2))
    spin: float = 0.0


@dataclass
class SceneParams:
    height: int = 96
    width: int = 96
    n_objects: tuple = (1, 3)
    radius: tuple = (16.0, 30.0)
    speed: tuple = (2.5, 6.0)
    bg_speed: float = 1.5
    max_spin_deg: float = 3.0
    texture_amp: float = 0.1
    spot_amp: float = 0.35
    min_contrast: float = 0.3
    blur: float = 0.7
    noise: float = 0.01


_BLOB = 64


def _texture(rng, amp, spot_amp=0.0, base=None):
    m = 3
    g = np.column_stack([
        rng.uniform(0.3, 1.0, m) * amp,
        rng.uniform(0.15, 0.6, m),
        rng.uniform(0, np.pi, m),
        rng.uniform(0, 2 * np.pi, m),
        np.zeros(m),
    ])
    mix = rng.uniform(-1, 1, (m, 3))
    blob = ndimage.gaussian_filter(rng.standard_normal((_BLOB, _BLOB)), 3.0, mode="wrap")
    blob /= blob.std() + 1e-12
    color = rng.uniform(0.15, 0.85, 3) if base is None else base
    spots = ndimage.gaussian_filter(rng.standard_normal((_BLOB, _BLOB)), rng.uniform(1.5, 3.0), mode="wrap")
    spots = (spots > np.quantile(spots, rng.uniform(0.6, 0.85))).astype(np.float64)
    spot_color = spot_amp * rng.uniform(0.6, 1.0) * _unit(rng.standard_normal(3))
    return Layer(color, g, mix, blob, amp * rng.uniform(0.5, 1.5), spots, spot_color)


def _unit(v):
    return v / (np.abs(v).max() + 1e-12)


def _shade(layer, lx, ly):
    out = np.broadcast_to(layer.color, lx.shape + (3,)).copy()
    for (a, fr, th, ph, _), mx in zip(layer.gratings, layer.mix):
        wave = a * np.sin(fr * (lx * np.cos(th) + ly * np.sin(th)) + ph)
        out += wave[..., None] * mx
    b = ndimage.map_coordinates(layer.blob, [ly.ravel() % _BLOB, lx.ravel() % _BLOB], order=1, mode="grid-wrap")
    out += layer.blob_amp * b.reshape(lx.shape)[..., None]
    if layer.spots is not None:
        sp = ndimage.map_coordinates(layer.spots, [ly.ravel() % _BLOB, lx.ravel() % _BLOB], order=0,
                                     mode="grid-wrap")
        out += sp.reshape(lx.shape)[..., None] * layer.spot_color
    return out


def _polygon(rng, radius):
    n = int(rng.integers(4, 8))
    # jittered even angles keep the polygon convex and non-degenerate
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False) + rng.uniform(-0.3, 0.3, n) * (np.pi / n)
    r = radius * rng.uniform(0.75, 1.0, n)
    return np.column_stack([r * np.cos(ang), r * np.sin(ang)])


def _inside(vertices, lx, ly):
    """Point-in-convex-polygon (counter-clockwise vertices)."""
    ok = np.ones(lx.shape, bool)
    v = vertices
    for a, b in zip(v, np.roll(v, -1, axis=0)):
        ok &= (b[0] - a[0]) * (ly - a[1]) - (b[1] - a[1]) * (lx - a[0]) >= 0
    return ok


class Scene:
    """A background and moving polygons; ``render(t)`` gives frame t."""

    def __init__(self, rng, params=None):
        p = params or SceneParams()
        self.p = p
        h, w = p.height, p.width
        self.background = _texture(rng, p.texture_amp, p.spot_amp)
        ang = rng.uniform(0, 2 * np.pi)
        self.background.vel = p.bg_speed * rng.uniform(0, 1) * np.array([np.cos(ang), np.sin(ang)])
        self.objects: List[Layer] = []
        n = int(rng.integers(p.n_objects[0], p.n_objects[1] + 1))
        for _ in range(n):
            obj = _texture(rng, p.texture_amp, p.spot_amp)
            # keep objects distinguishable from the background
            while np.abs(obj.color - self.background.color).max() < p.min_contrast:
                obj.color = rng.uniform(0.15, 0.85, 3)
            obj.vertices = _polygon(rng, rng.uniform(*p.radius))
            obj.pos = np.array([rng.uniform(0.2, 0.8) * w, rng.uniform(0.2, 0.8) * h])
            obj.angle = rng.uniform(0, 2 * np.pi)
            sp = rng.uniform(*p.speed)
            a = rng.uniform(0, 2 * np.pi)
            obj.vel = sp * np.array([np.cos(a), np.sin(a)]) + self.background.vel
            obj.spin = np.radians(rng.uniform(-p.max_spin_deg, p.max_spin_deg))
            self.objects.append(obj)
        self.noise_rng = np.random.default_rng(rng.integers(2 ** 63))

    def render(self, t):
        """(image HxWx3 in [0,1], label map HxW) at time ``t``."""
        p = self.p
        yy, xx = np.mgrid[0:p.height, 0:p.width].astype(np.float64)
        bg = self.background
        img = _shade(bg, xx - bg.vel[0] * t, yy - bg.vel[1] * t)
        lab = np.zeros((p.height, p.width), np.int64)
        for n, obj in enumerate(self.objects, start=1):
            c = obj.pos + obj.vel * t
            th = obj.angle + obj.spin * t
            dx, dy = xx - c[0], yy - c[1]
            lx = np.cos(th) * dx + np.sin(th) * dy
            ly = -np.sin(th) * dx + np.cos(th) * dy
            m = _inside(obj.vertices, lx, ly)
            img[m] = _shade(obj, lx[m], ly[m])
            lab[m] = n
        if p.blur > 0:
            img = ndimage.gaussian_filter(img, (p.blur, p.blur, 0), mode="nearest")
        img = img + p.noise * self.noise_rng.standard_normal(img.shape)
        return np.clip(img, 0.0, 1.0), lab


def boundaries(labels):
    """Thin true-edge map: pixels whose right or lower neighbor has another label."""
    e = np.zeros(labels.shape, bool)
    e[:, :-1] |= labels[:, 1:] != labels[:, :-1]
    e[:-1, :] |= labels[1:, :] != labels[:-1, :]
    return e


def make_corpus(root, n_sequences=100, frames_per_sequence=3, seed=0, params=None, n_val=20):
    """Write a corpus to ``root``.

    Layout::

        root/seqNNN/frame_KK.png           training frames
        root/seqNNN/gt/frame_KK.png        true edges of each frame
        root/val/images/valNNN.png         held-out images
        root/val/gt/valNNN/0.png           their true edges

    Returns the number of consecutive frame pairs.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    for s in range(n_sequences):
        scene = Scene(np.random.default_rng(rng.integers(2 ** 63)), params)
        d = root / f"seq{s:03d}"
        (d / "gt").mkdir(parents=True, exist_ok=True)
        for t in range(frames_per_sequence):
            img, lab = scene.render(t)
            write_image(img, d / f"frame_{t:02d}.png")
            write_edge_png(boundaries(lab).astype(float), d / "gt" / f"frame_{t:02d}.png")
    if n_val:
        (root / "val" / "images").mkdir(parents=True, exist_ok=True)
        for v in range(n_val):
            scene = Scene(np.random.default_rng(rng.integers(2 ** 63)), params)
            img, lab = scene.render(0)
            write_image(img, root / "val" / "images" / f"val{v:03d}.png")
            g = root / "val" / "gt" / f"val{v:03d}"
            g.mkdir(parents=True, exist_ok=True)
            write_edge_png(boundaries(lab).astype(float), g / "0.png")
    return n_sequences * (frames_per_sequence - 1)
