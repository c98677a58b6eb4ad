"""Binary container for trained forests.

Layout (all little-endian)::

    b"SEDG"  u16 format_version  u16 recipe_version
    u32 param_len  param_len bytes of UTF-8 JSON (forest parameters, patch/label size)
    u32 n_trees
    per tree: u32 n_nodes  u32 n_leaves
              i32 feature[n]  f32 threshold[n]  i32 left[n]  i32 right[n]  i32 leaf[n]
              u8 segs[n_leaves * 16 * 16]
    u32 crc32 of every preceding byte
"""

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import ModelFormatError
from . import features as F
from .forest import ForestParams, StructuredForest, Tree

MAGIC = b"SEDG"
FORMAT_VERSION = 1


def dumps(forest):
    params = dict(asdict(forest.params), patch_size=forest.patch_size, label_size=forest.label_size)
    pblob = json.dumps(params, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HH", FORMAT_VERSION, forest.recipe_version),
             struct.pack("<I", len(pblob)), pblob, struct.pack("<I", forest.n_trees)]
    for t in forest.trees:
        parts.append(struct.pack("<II", t.n_nodes, len(t.segs)))
        parts += [
            np.ascontiguousarray(t.feature, "<i4").tobytes(),
            np.ascontiguousarray(t.threshold, "<f4").tobytes(),
            np.ascontiguousarray(t.left, "<i4").tobytes(),
            np.ascontiguousarray(t.right, "<i4").tobytes(),
            np.ascontiguousarray(t.leaf, "<i4").tobytes(),
            np.ascontiguousarray(t.segs, np.uint8).tobytes(),
        ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_model(forest, path):
    Path(path).write_bytes(dumps(forest))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ModelFormatError("truncated model file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def loads(buf, expected_recipe=F.RECIPE_VERSION):
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise ModelFormatError("not a SEDG model file")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ModelFormatError("checksum mismatch (corrupt or truncated model)")
    r = _Reader(body)
    r.take(4)
    fmt, recipe = r.unpack("<HH")
    if fmt != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {fmt}")
    if expected_recipe is not None and recipe != expected_recipe:
        raise ModelFormatError(f"model was trained with feature recipe v{recipe}, extractor is v{expected_recipe}")
    (plen,) = r.unpack("<I")
    try:
        params = json.loads(r.take(plen).decode("utf-8"))
    except ValueError as e:
        raise ModelFormatError(f"bad parameter block: {e}") from None
    patch = params.pop("patch_size", F.PATCH)
    label = params.pop("label_size", F.LABEL)
    (n_trees,) = r.unpack("<I")
    trees = []
    for _ in range(n_trees):
        n, nl = r.unpack("<II")
        trees.append(Tree(
            feature=r.array("<i4", n).astype(np.int32),
            threshold=r.array("<f4", n).astype(np.float32),
            left=r.array("<i4", n).astype(np.int32),
            right=r.array("<i4", n).astype(np.int32),
            leaf=r.array("<i4", n).astype(np.int32),
            segs=r.array(np.uint8, nl * label * label).reshape(nl, label, label),
        ))
    if r.pos != len(body):
        raise ModelFormatError("trailing bytes in model file")
    return StructuredForest(trees, ForestParams(**params), recipe_version=recipe, patch_size=patch,
                            label_size=label)


def load_model(path, expected_recipe=F.RECIPE_VERSION):
    return loads(Path(path).read_bytes(), expected_recipe)
