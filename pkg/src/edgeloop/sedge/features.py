"""Patch features for the structured edge forest (recipe version 1).

A 32x32 image patch maps to 16x16x13 shrunk channel values plus, for each
channel, the 300 pairwise differences between a 5x5 grid of cells taken from
a more heavily smoothed copy of the channels: 7228 features in all.

Samples are stored in a compact "raw" form (the 3328 channel values and the
325 cell values, plus a trailing zero); feature ``f`` is then
``raw[FEAT_A[f]] - raw[FEAT_B[f]]``.
"""

import numpy as np

from ..imgproc import N_FEATURE_CHANNELS, as_image, conv_tri, raw_channels

RECIPE_VERSION = 1
PATCH = 32
LABEL = 16
SHRINK = 2
GRID = 5
REG_SMOOTH = 1
SIM_SMOOTH = 4
PAD = PATCH // 2

_PS = PATCH // SHRINK                          # 16 shrunk pixels per patch side
N_REG = _PS * _PS * N_FEATURE_CHANNELS         # 3328
N_CELLS = GRID * GRID
N_SIM_RAW = N_CELLS * N_FEATURE_CHANNELS       # 325
N_RAW = N_REG + N_SIM_RAW + 1                  # trailing constant zero
ZERO = N_RAW - 1
_PAIRS = [(i, j) for i in range(N_CELLS) for j in range(i + 1, N_CELLS)]
N_FEATURES = N_REG + len(_PAIRS) * N_FEATURE_CHANNELS   # 7228

CELL_POS = np.round((np.arange(GRID) + 0.5) * _PS / GRID - 0.5).astype(np.int64)


def _tables():
    # raw index -> (channel in the 27-plane stack, dy, dx)
    ch = np.zeros(N_RAW, np.int64)
    dy = np.zeros(N_RAW, np.int64)
    dx = np.zeros(N_RAW, np.int64)
    r = np.arange(N_REG)
    ch[:N_REG] = r // (_PS * _PS)
    dy[:N_REG] = (r % (_PS * _PS)) // _PS
    dx[:N_REG] = r % _PS
    s = np.arange(N_SIM_RAW)
    cell = s % N_CELLS
    ch[N_REG:ZERO] = N_FEATURE_CHANNELS + s // N_CELLS
    dy[N_REG:ZERO] = CELL_POS[cell // GRID]
    dx[N_REG:ZERO] = CELL_POS[cell % GRID]
    ch[ZERO] = 2 * N_FEATURE_CHANNELS
    fa = np.empty(N_FEATURES, np.int64)
    fb = np.empty(N_FEATURES, np.int64)
    fa[:N_REG] = np.arange(N_REG)
    fb[:N_REG] = ZERO
    k = N_REG
    for c in range(N_FEATURE_CHANNELS):
        for i, j in _PAIRS:
            fa[k] = N_REG + c * N_CELLS + i
            fb[k] = N_REG + c * N_CELLS + j
            k += 1
    return ch, dy, dx, fa, fb


RAW_CH, RAW_DY, RAW_DX, FEAT_A, FEAT_B = _tables()


def pad_image(img):
    """Symmetric padding by half a patch, extended so both sides are even."""
    img = as_image(img)
    h, w = img.shape[:2]
    return np.pad(img, ((PAD, PAD + h % 2), (PAD, PAD + w % 2), (0, 0)), mode="symmetric")


def channel_planes(img):
    """Stack of 27 shrunk planes for a *padded* 3-channel image.

    Planes 0-12 are the lightly smoothed channels, 13-25 the heavily smoothed
    copies used for cell differences, 26 is all zeros.
    """
    raw = raw_channels(img, SHRINK)
    reg = conv_tri(raw, REG_SMOOTH)
    sim = conv_tri(raw, SIM_SMOOTH)
    zero = np.zeros(raw.shape[:2] + (1,))
    return np.ascontiguousarray(np.concatenate([reg, sim, zero], axis=2), dtype=np.float32)


def raw_at(planes, py, px):
    """Raw vectors (n, N_RAW) for patches whose shrunk top-left is (py, px)."""
    py = np.asarray(py, np.int64)[:, None]
    px = np.asarray(px, np.int64)[:, None]
    return planes[py + RAW_DY[None], px + RAW_DX[None], RAW_CH[None]]


def feature_values(raw, feats):
    """Features ``feats`` (shape (m,)) of raw vectors ``raw`` (n, N_RAW) -> (n, m)."""
    return raw[:, FEAT_A[feats]] - raw[:, FEAT_B[feats]]


def expand(raw):
    """Full 7228-long feature vectors from raw vectors."""
    return feature_values(np.atleast_2d(raw), np.arange(N_FEATURES))


def lookup(planes, py, px, feats):
    """Feature ``feats[i]`` of the patch at (py[i], px[i]), for every i."""
    a = FEAT_A[feats]
    b = FEAT_B[feats]
    va = planes[py + RAW_DY[a], px + RAW_DX[a], RAW_CH[a]]
    vb = planes[py + RAW_DY[b], px + RAW_DX[b], RAW_CH[b]]
    return va - vb
