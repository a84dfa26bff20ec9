"""Pixel-level primitives used by synthesis.

Image convention: float arrays shaped (H, W, C) with C in {1, 3} and values
in [0, 1]. Masks are uint8 arrays shaped (H, W) with values in {0, 1}.
8-bit I/O converts by value/255, rounding half up on write.

All functions here are pure: they never mutate their inputs.
"""

from __future__ import annotations

import numpy as np
from PIL import Image as PILImage

from .errors import ConvergenceError, InvalidArgumentError


def validate_image(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise InvalidArgumentError(f"image must be (H, W, 1|3), got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InvalidArgumentError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise InvalidArgumentError("image values must lie in [0, 1]")
    return img


def validate_mask(mask, like=None):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvalidArgumentError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise InvalidArgumentError("mask values must be exactly 0 or 1")
    if like is not None and mask.shape != like.shape[:2]:
        raise InvalidArgumentError(
            f"mask shape {mask.shape} does not match image {like.shape[:2]}")
    return mask.astype(np.uint8)


def gaussian_kernel1d(sigma):
    """Normalized 1-D Gaussian with radius ceil(3*sigma)."""
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma):
    """Separable Gaussian blur with reflect boundary handling; sigma=0 is identity."""
    img = validate_image(img)
    if sigma < 0:
        raise InvalidArgumentError("sigma must be non-negative")
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    out = img.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for i, w in enumerate(k):
            sl = [slice(None)] * 3
            sl[axis] = slice(i, i + out.shape[axis])
            acc += w * padded[tuple(sl)]
        out = acc
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def alpha_blend(fg, bg, mask, a):
    """Inside mask: (1-a)*fg + a*bg. Outside: bg."""
    fg = validate_image(fg)
    bg = validate_image(bg)
    if fg.shape != bg.shape:
        raise InvalidArgumentError(f"fg shape {fg.shape} != bg shape {bg.shape}")
    mask = validate_mask(mask, like=fg)
    if not 0.0 <= a <= 1.0:
        raise InvalidArgumentError("blend factor must lie in [0, 1]")
    m = mask[:, :, None].astype(fg.dtype)
    blended = (1.0 - a) * fg + a * bg
    return m * blended + (1.0 - m) * bg


def _sor_omega(h, w):
    # near-optimal over-relaxation factor for the 5-point Laplacian
    n = max(h, w)
    return 2.0 / (1.0 + np.sin(np.pi / (n + 1)))


def poisson_blend(src, dst, mask, tol=1e-4, max_iters=None, omega=None):
    """Seamless cloning: solve the discrete Poisson equation on the mask.

    Guidance field is the gradient of ``src``; Dirichlet boundary values come
    from ``dst``. Solved with red-black successive over-relaxation (omega=1
    recovers Gauss-Seidel) until the max residual of 4x - sum(neighbours) - b
    drops to ``tol``. Raises ConvergenceError (carrying the final residual)
    if ``max_iters`` sweeps are not enough. Result is clamped to [0, 1].
    """
    src = validate_image(src)
    dst = validate_image(dst)
    if src.shape != dst.shape:
        raise InvalidArgumentError(f"src shape {src.shape} != dst shape {dst.shape}")
    mask = validate_mask(mask, like=dst)
    interior = mask.astype(bool)
    if not interior.any():
        return dst.copy()
    h, w = mask.shape
    if interior[0, :].any() or interior[-1, :].any() or interior[:, 0].any() or interior[:, -1].any():
        raise InvalidArgumentError("mask must be strictly inside the image")
    n_interior = int(interior.sum())
    if max_iters is None:
        max_iters = 10 * n_interior
    if omega is None:
        ys, xs = np.where(interior)
        omega = _sor_omega(int(ys.max() - ys.min() + 1), int(xs.max() - xs.min() + 1))

    srcf = src.astype(np.float64)
    x = dst.astype(np.float64).copy()
    # b = discrete Laplacian of the guidance source
    b = (4.0 * srcf[1:-1, 1:-1] - srcf[:-2, 1:-1] - srcf[2:, 1:-1]
         - srcf[1:-1, :-2] - srcf[1:-1, 2:])

    inner = interior[1:-1, 1:-1]
    yy, xx = np.mgrid[0:h - 2, 0:w - 2]
    red = inner & ((yy + xx) % 2 == 0)
    black = inner & ((yy + xx) % 2 == 1)

    def neighbour_sum(f):
        return f[:-2, 1:-1] + f[2:, 1:-1] + f[1:-1, :-2] + f[1:-1, 2:]

    residual = np.inf
    for _ in range(max_iters):
        for colour in (red, black):
            nb = neighbour_sum(x)
            center = x[1:-1, 1:-1]
            gs = 0.25 * (nb + b)
            center[colour] += omega * (gs[colour] - center[colour])
        nb = neighbour_sum(x)
        res = 4.0 * x[1:-1, 1:-1] - nb - b
        residual = float(np.abs(res[inner]).max())
        if residual <= tol:
            break
    else:
        raise ConvergenceError(
            f"poisson_blend residual {residual:.3e} > tol {tol:.3e} after {max_iters} sweeps",
            residual,
        )
    out = dst.copy().astype(np.float64)
    out[interior] = x[interior]
    return np.clip(out, 0.0, 1.0).astype(dst.dtype)


def solve_homography(src_quad, dst_quad):
    """3x3 homography mapping src_quad corners onto dst_quad corners."""
    src = np.asarray(src_quad, dtype=np.float64)
    dst = np.asarray(dst_quad, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise InvalidArgumentError("quads must be 4x2 corner arrays")
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((sx, sy), (dx, dy)) in enumerate(zip(src, dst)):
        a[2 * i] = [sx, sy, 1, 0, 0, 0, -dx * sx, -dx * sy]
        a[2 * i + 1] = [0, 0, 0, sx, sy, 1, -dy * sx, -dy * sy]
        rhs[2 * i] = dx
        rhs[2 * i + 1] = dy
    try:
        sol = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as err:
        raise InvalidArgumentError(f"degenerate quad: {err}") from err
    return np.append(sol, 1.0).reshape(3, 3)


def _is_convex(quad):
    q = np.asarray(quad, dtype=np.float64)
    crosses = []
    for i in range(4):
        a = q[(i + 1) % 4] - q[i]
        b = q[(i + 2) % 4] - q[(i + 1) % 4]
        crosses.append(a[0] * b[1] - a[1] * b[0])
    crosses = np.array(crosses)
    return np.all(crosses > 1e-9) or np.all(crosses < -1e-9)


def homography_warp(img, quad, out_shape=None):
    """Warp ``img`` (the unit source rectangle) onto ``quad``.

    Returns (layer, alpha): the warped content on a canvas of ``out_shape``
    (default: the input shape) with bilinear sampling, and a float coverage
    map in [0, 1]. Pixels outside the quad carry zero alpha; the caller
    composites the layer, so the untouched-outside contract lives there.
    Corners are (x, y) with the source rectangle spanning the full image.
    """
    img = validate_image(img)
    quad = np.asarray(quad, dtype=np.float64)
    if quad.shape != (4, 2):
        raise InvalidArgumentError("quad must be 4 corner points")
    if not _is_convex(quad):
        raise InvalidArgumentError("quad must be convex and non-degenerate")
    h, w = img.shape[:2]
    if out_shape is None:
        out_shape = (h, w)
    oh, ow = out_shape
    # source rectangle corners, clockwise from top-left, in (x, y)
    src_quad = np.array([[0, 0], [w - 1.0, 0], [w - 1.0, h - 1.0], [0, h - 1.0]])
    hom = solve_homography(src_quad, quad)
    hom_inv = np.linalg.inv(hom)

    xs, ys = np.meshgrid(np.arange(ow, dtype=np.float64), np.arange(oh, dtype=np.float64))
    ones = np.ones_like(xs)
    pts = np.stack([xs, ys, ones], axis=0).reshape(3, -1)
    mapped = hom_inv @ pts
    sx = (mapped[0] / mapped[2]).reshape(oh, ow)
    sy = (mapped[1] / mapped[2]).reshape(oh, ow)

    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sxc = np.clip(sx, 0, w - 1)
    syc = np.clip(sy, 0, h - 1)
    x0 = np.floor(sxc).astype(int)
    y0 = np.floor(syc).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sxc - x0)[:, :, None]
    fy = (syc - y0)[:, :, None]

    img64 = img.astype(np.float64)
    top = img64[y0, x0] * (1 - fx) + img64[y0, x1] * fx
    bottom = img64[y1, x0] * (1 - fx) + img64[y1, x1] * fx
    layer = top * (1 - fy) + bottom * fy
    layer[~inside] = 0.0
    alpha = inside.astype(np.float64)
    return layer.astype(img.dtype), alpha


def disc_offsets(radius):
    """Offsets of the disc structuring element: center distance <= radius."""
    r = int(np.floor(radius))
    offs = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx <= radius * radius:
                offs.append((dy, dx))
    return offs


def dilate(mask, radius):
    """Morphological dilation with a Euclidean disc; radius 0 is identity."""
    mask = validate_mask(mask)
    if radius < 0:
        raise InvalidArgumentError("radius must be non-negative")
    if radius == 0:
        return mask.copy()
    h, w = mask.shape
    out = np.zeros_like(mask)
    for dy, dx in disc_offsets(radius):
        ys0, ys1 = max(0, dy), min(h, h + dy)
        xs0, xs1 = max(0, dx), min(w, w + dx)
        out[ys0:ys1, xs0:xs1] |= mask[max(0, -dy):min(h, h - dy), max(0, -dx):min(w, w - dx)]
    return out


def sobel_magnitude(gray):
    """Sobel gradient magnitude of a 2-D array, reflect boundary."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise InvalidArgumentError("sobel_magnitude expects a 2-D array")
    p = np.pad(gray, 1, mode="reflect")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]
          - p[:-2, :-2] - 2 * p[1:-1, :-2] - p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]
          - p[:-2, :-2] - 2 * p[:-2, 1:-1] - p[:-2, 2:])
    return np.sqrt(gx * gx + gy * gy)


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize; used for data preparation, not part of synthesis styling."""
    img = validate_image(img)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    img64 = img.astype(np.float64)
    top = img64[y0][:, x0] * (1 - fx) + img64[y0][:, x1] * fx
    bot = img64[y1][:, x0] * (1 - fx) + img64[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


# ---------------------------------------------------------------------------
# 8-bit PNG I/O


def to_uint8(img):
    """[0,1] floats to 8-bit with round-half-up."""
    return np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def from_uint8(arr):
    return (np.asarray(arr, dtype=np.float32) / 255.0).astype(np.float32)


def write_png(path, img):
    """Write an image as 8-bit RGB (or grayscale for 1-channel) PNG."""
    img = validate_image(img)
    arr = to_uint8(img)
    if arr.shape[2] == 1:
        pil = PILImage.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(arr, mode="RGB")
    pil.save(path, format="PNG")


def read_png(path):
    """Read a PNG as float32 (H, W, 3) in [0, 1]; grayscale becomes 1-channel."""
    with PILImage.open(path) as pil:
        if pil.mode == "L":
            arr = np.asarray(pil)[:, :, None]
        else:
            arr = np.asarray(pil.convert("RGB"))
    return from_uint8(arr)


def write_mask_png(path, mask):
    """Write a binary mask as 8-bit grayscale PNG with values {0, 255}."""
    mask = validate_mask(mask)
    pil = PILImage.fromarray((mask * 255).astype(np.uint8), mode="L")
    pil.save(path, format="PNG")


def read_mask_png(path):
    with PILImage.open(path) as pil:
        arr = np.asarray(pil.convert("L"))
    if not np.isin(arr, (0, 255)).all():
        raise InvalidArgumentError(f"mask PNG {path} has values other than 0/255")
    return (arr > 0).astype(np.uint8)
