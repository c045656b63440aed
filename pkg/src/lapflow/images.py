"""PNG reading/writing and sample grids (Pillow-backed, 8-bit exact)."""

import numpy as np
from PIL import Image


def to_uint8(img):
    """[-1, 1] float [C, H, W] -> uint8 [H, W] or [H, W, 3]."""
    arr = np.clip((np.asarray(img, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    arr = np.round(arr).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    return arr


def from_uint8(arr):
    """uint8 [H, W] or [H, W, C] -> float32 [C, H, W] in [-1, 1]."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return (arr / 127.5 - 1.0).astype(np.float32)


def save_png(path, arr):
    """Write uint8 [H, W] (grayscale) or [H, W, 3] (RGB) losslessly."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"save_png wants uint8, got {arr.dtype}")
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def load_png(path):
    """Read a PNG as uint8 [H, W, C] (C = 1 or 3)."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16"):
            arr = np.asarray(im.convert("L"))[:, :, None]
        elif im.mode in ("RGB", "RGBA", "P"):
            arr = np.asarray(im.convert("RGB"))
        else:
            arr = np.asarray(im.convert("RGB"))
    return arr.astype(np.uint8)


def save_grid(path, images, ncol=8, pad=1):
    """Tile [N, C, H, W] images (in [-1, 1]) into one PNG grid."""
    images = np.asarray(images)
    n, c, h, w = images.shape
    ncol = min(ncol, n)
    nrow = (n + ncol - 1) // ncol
    canvas_c = 3 if c == 3 else 1
    canvas = np.zeros((nrow * (h + pad) - pad, ncol * (w + pad) - pad, canvas_c),
                      dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, ncol)
        tile = to_uint8(images[i])
        if tile.ndim == 2:
            tile = tile[:, :, None]
        canvas[r * (h + pad): r * (h + pad) + h,
               col * (w + pad): col * (w + pad) + w] = tile
    save_png(path, canvas[:, :, 0] if canvas_c == 1 else canvas)
