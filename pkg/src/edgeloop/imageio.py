"""Reading and writing images and edge maps.

PNG and binary PGM/PPM go through Pillow.  Edge maps can additionally be
stored losslessly in a small raw container: the 4 bytes ``EDGM``, uint32
width, uint32 height, then width*height float32 strengths, little-endian.
"""

import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import FormatError
from .imgproc import EdgeMap, as_image

EDGM_MAGIC = b"EDGM"


def read_image(path, rgb=True):
    """Load an 8-bit image as floats in [0, 1], shape (H, W, 3) or (H, W, 1)."""
    with PILImage.open(path) as im:
        if rgb:
            im = im.convert("RGB")
        elif im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def write_image(img, path):
    """Write an image as 8-bit; format follows the suffix (.png, .pgm, .ppm)."""
    img = as_image(img)
    q = np.round(img * 255.0).astype(np.uint8)
    if q.shape[2] == 1:
        PILImage.fromarray(q[:, :, 0], mode="L").save(path)
    else:
        PILImage.fromarray(q, mode="RGB").save(path)


def edge_to_uint8(edges):
    s = edges.strength if isinstance(edges, EdgeMap) else np.asarray(edges, dtype=np.float64)
    return np.round(np.clip(s, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_edge_png(edges, path):
    PILImage.fromarray(edge_to_uint8(edges), mode="L").save(path)


def read_edge_png(path):
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return EdgeMap(arr)


def write_edgm(edges, path):
    s = edges.strength if isinstance(edges, EdgeMap) else np.asarray(edges)
    h, w = s.shape
    with open(path, "wb") as f:
        f.write(EDGM_MAGIC + struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(s, dtype="<f4").tobytes())


def read_edgm(path):
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != EDGM_MAGIC:
        raise FormatError(f"{path}: not an EDGM file")
    w, h = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * w * h:
        raise FormatError(f"{path}: expected {12 + 4 * w * h} bytes, found {len(data)}")
    s = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w)
    return EdgeMap(s.astype(np.float64))
