"""The synthesis function: render one styled text instance at a blank spot.

Two mechanisms share the placement logic. Customization rasterizes a word
with the full appearance/geometry/structure pipeline; replication recovers
stroke pixels from a real text region (MSER) and pastes a rescaled copy.
Every residual random decision (content pick, blank pick, jitter, color
sampling) is drawn from a generator seeded by the style vector's seed, so
the whole pipeline is a pure function of (inputs, style).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw, ImageFont

from . import image as im
from . import style as st
from .errors import InvalidArgumentError, PlacementError
from .fonts import discover_fonts
from .mser import MserParams, extract_text_mask

DEFAULT_WORDS = ("sale", "new", "hello", "text", "offer", "menu",
                 "open", "shop", "free", "demo")

PALETTE = {
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "red": (0.8, 0.1, 0.1),
    "blue": (0.1, 0.2, 0.8),
    "green": (0.1, 0.6, 0.2),
    "yellow": (0.95, 0.85, 0.1),
}

ITALIC_SHEAR = 0.25
COVERAGE_EPS = 1e-3
MIN_FONT_PX = 6
SHRINK_FACTOR = 0.85
MAX_SHRINKS = 6


@dataclass(frozen=True)
class TextAnnotation:
    bbox: tuple        # (x0, y0, x1, y1), exclusive upper corners
    content: str

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise InvalidArgumentError(f"degenerate annotation bbox {self.bbox}")
        if not self.content:
            raise InvalidArgumentError("annotation content must be nonempty")


@dataclass
class SynthSample:
    i_syn: np.ndarray
    m_syn: np.ndarray
    ground_truth: np.ndarray
    style: st.StyleVector
    placement: tuple
    fallback: bool = False


class Synthesizer:
    """Holds the style space, fonts and parameters for repeated synthesis."""

    def __init__(self, space=None, fonts=None, mser_params=None, word_list=DEFAULT_WORDS,
                 poisson_tol=1e-3):
        if space is None:
            fonts = fonts or discover_fonts()
            space = st.default_space(fonts)
        self.space = space
        self.mser_params = mser_params or MserParams()
        self.word_list = tuple(word_list)
        self.poisson_tol = poisson_tol
        self._font_cache = {}

    # ------------------------------------------------------------------
    # glyph rasterization

    def _font(self, path, size):
        key = (path, size)
        if key not in self._font_cache:
            self._font_cache[key] = ImageFont.truetype(path, size)
        return self._font_cache[key]

    def _render_glyphs(self, content, font_path, size_px, spacing):
        """Antialiased glyph alpha in [0,1], tight canvas plus a small pad."""
        font = self._font(font_path, size_px)
        widths = [max(int(np.ceil(font.getlength(ch))), 1) for ch in content]
        total_w = sum(widths) + spacing * max(len(content) - 1, 0)
        ascent, descent = font.getmetrics()
        total_h = ascent + descent
        canvas = PILImage.new("L", (total_w + 4, total_h + 4), 0)
        drawer = ImageDraw.Draw(canvas)
        x = 2
        for ch, wdt in zip(content, widths):
            drawer.text((x, 2), ch, font=font, fill=255)
            x += wdt + spacing
        alpha = np.asarray(canvas, dtype=np.float32) / 255.0
        return _trim(alpha, pad=1)

    # ------------------------------------------------------------------
    # customization pipeline

    def _styled_layer(self, img, s, content, size_px, rng):
        """Build the colored text layer (rgb, alpha) for the customize mechanism."""
        font_path = s.value(self.space, "font")
        spacing = s.value(self.space, "spacing")
        glyph = self._render_glyphs(content, font_path, size_px, spacing)

        color = self._resolve_color(img, s.value(self.space, "color_mode"), rng)

        layers = []     # bottom-up: shadow, border, glyph
        shadow_on = s.choice(self.space, "shadow") == 1
        border_on = s.choice(self.space, "border") == 1
        pad = 1
        if border_on:
            pad += s.value(self.space, "border_width")
        if shadow_on:
            pad += s.value(self.space, "shadow_offset")
        glyph = np.pad(glyph, pad)

        if shadow_on:
            off = s.value(self.space, "shadow_offset")
            sval = s.value(self.space, "shadow_color")
            sh = np.zeros_like(glyph)
            sh[off:, off:] = glyph[:-off or None, :-off or None]
            layers.append((sh * 0.7, (sval, sval, sval)))
        if border_on:
            width = s.value(self.space, "border_width")
            bcol = PALETTE[s.value(self.space, "border_color")]
            body = (glyph > 0.5).astype(np.uint8)
            ring = im.dilate(body, width) & (1 - body)
            layers.append((ring.astype(np.float32), bcol))
        layers.append((glyph, color))

        h, w = glyph.shape
        rgb = np.zeros((h, w, 3), dtype=np.float64)
        alpha = np.zeros((h, w), dtype=np.float64)
        for a, col in layers:
            col = np.asarray(col, dtype=np.float64)
            rgb = col * a[:, :, None] + rgb * (1.0 - a[:, :, None])
            alpha = a + alpha * (1.0 - a)

        rgb, alpha = self._apply_geometry(rgb, alpha, s)
        rgb, alpha = self._apply_appearance(rgb, alpha, s)
        return rgb, alpha

    def _resolve_color(self, img, mode, rng):
        if mode in PALETTE:
            return PALETTE[mode]
        ys = rng.integers(img.shape[0], size=32)
        xs = rng.integers(img.shape[1], size=32)
        samples = img[ys, xs]
        luma = samples @ np.array([0.299, 0.587, 0.114])
        idx = int(np.argmin(luma) if mode == "sample_dark" else np.argmax(luma))
        return tuple(float(v) for v in samples[idx])

    def _apply_geometry(self, rgb, alpha, s):
        curve = s.value(self.space, "curve")
        if curve > 0:
            rgb, alpha = _curve_layer(rgb, alpha, curve)
        shear = ITALIC_SHEAR if s.choice(self.space, "italic") == 1 else 0.0
        tilt = s.value(self.space, "perspective")
        angle = s.value(self.space, "rotation")
        if shear or tilt or angle:
            rgb, alpha = _warp_layer(rgb, alpha, shear, tilt, angle)
        return rgb, alpha

    def _apply_appearance(self, rgb, alpha, s):
        sigma = s.value(self.space, "blur")
        if sigma > 0:
            r = int(np.ceil(3 * sigma))
            rgb = np.pad(rgb, ((r, r), (r, r), (0, 0)))
            alpha = np.pad(alpha, r)
            pre = np.clip(rgb * alpha[:, :, None], 0.0, 1.0)
            pre = im.gaussian_blur(pre, sigma)
            alpha = im.gaussian_blur(alpha[:, :, None], sigma)[:, :, 0]
            safe = np.maximum(alpha, 1e-6)[:, :, None]
            rgb = np.clip(pre / safe, 0.0, 1.0)
        alpha = alpha * s.value(self.space, "opacity")
        rgb, alpha = _trim_layer(rgb, alpha)
        return rgb, alpha

    # ------------------------------------------------------------------
    # placement

    def _choose_blank(self, img, blanks, lw, lh, jitter_frac, rng):
        """Top-left position for an lw x lh layer, >=1 px inside the canvas."""
        h, w = img.shape[:2]
        feasible = []
        for bx0, by0, bx1, by1 in blanks:
            bx0, by0 = max(bx0, 1), max(by0, 1)
            bx1, by1 = min(bx1, w - 1), min(by1, h - 1)
            if bx1 - bx0 >= lw and by1 - by0 >= lh:
                feasible.append((bx0, by0, bx1, by1))
        if not feasible:
            return None
        pick = feasible[int(rng.integers(len(feasible)))]
        bx0, by0, bx1, by1 = pick
        free_x, free_y = bx1 - bx0 - lw, by1 - by0 - lh
        jx = int(round(jitter_frac * float(rng.random()) * free_x))
        jy = int(round(jitter_frac * float(rng.random()) * free_y))
        return bx0 + jx, by0 + jy

    def _sliding_window_blank(self, img, lw, lh):
        """Fallback when no blanks are given: min Sobel density window."""
        h, w = img.shape[:2]
        if lw > w - 2 or lh > h - 2:
            return None
        gray = img.mean(axis=2)
        density = im.sobel_magnitude(gray)
        integral = np.zeros((h + 1, w + 1))
        integral[1:, 1:] = density.cumsum(0).cumsum(1)
        ys = np.arange(1, h - lh - 1)
        xs = np.arange(1, w - lw - 1)
        if len(ys) == 0 or len(xs) == 0:
            return None
        sums = (integral[ys[:, None] + lh, xs[None, :] + lw]
                - integral[ys[:, None], xs[None, :] + lw]
                - integral[ys[:, None] + lh, xs[None, :]]
                + integral[ys[:, None], xs[None, :]])
        iy, ix = np.unravel_index(np.argmin(sums), sums.shape)
        return int(xs[ix]), int(ys[iy])

    def _place(self, img, blanks, lw, lh, jitter_frac, rng):
        if blanks:
            return self._choose_blank(img, blanks, lw, lh, jitter_frac, rng)
        return self._sliding_window_blank(img, lw, lh)

    # ------------------------------------------------------------------
    # mechanisms

    def _customize(self, img, annotations, blanks, s, rng, fallback=False):
        content = self._pick_content(annotations, rng)
        size_px = s.value(self.space, "size")
        jitter = s.value(self.space, "jitter")
        for _ in range(MAX_SHRINKS + 1):
            rgb, alpha = self._styled_layer(img, s, content, size_px, rng)
            lh, lw = alpha.shape
            pos = self._place(img, blanks, lw, lh, jitter, rng)
            if pos is not None:
                break
            size_px = int(size_px * SHRINK_FACTOR)
            if size_px < MIN_FONT_PX:
                pos = None
                break
        if pos is None:
            raise PlacementError(
                f"no blank can host {content!r} even after shrinking to {size_px}px")
        x, y = pos
        out = img.copy()
        region = out[y:y + lh, x:x + lw].astype(np.float64)
        a = alpha[:, :, None]
        blended = np.clip(rgb * a + region * (1.0 - a), 0.0, 1.0).astype(img.dtype)
        coverage = (alpha > COVERAGE_EPS).astype(np.uint8)
        region_out = np.where(coverage[:, :, None] == 1, blended, out[y:y + lh, x:x + lw])
        out[y:y + lh, x:x + lw] = region_out

        m_syn = np.zeros(img.shape[:2], dtype=np.uint8)
        m_syn[y:y + lh, x:x + lw] = coverage

        bg_alpha = s.value(self.space, "alpha")
        if bg_alpha > 0:
            out = im.alpha_blend(out, img, m_syn, bg_alpha)
        if s.choice(self.space, "poisson") == 1:
            interior = m_syn.copy()
            interior[0, :] = interior[-1, :] = 0
            interior[:, 0] = interior[:, -1] = 0
            if interior.any():
                out = im.poisson_blend(out, img, interior, tol=self.poisson_tol,
                                       max_iters=20 * int(interior.sum()))
        sample = SynthSample(out.astype(img.dtype), m_syn, img.copy(), s,
                             (x, y, x + lw, y + lh), fallback)
        return sample

    def _replicate(self, img, annotations, blanks, s, rng):
        if not annotations:
            return self._customize(img, annotations, blanks, s, rng, fallback=True)
        ann = annotations[int(rng.integers(len(annotations)))]
        mask, failed = extract_text_mask(img, ann.bbox, self.mser_params)
        if failed:
            return self._customize(img, annotations, blanks, s, rng, fallback=True)
        x0, y0, x1, y1 = ann.bbox
        colors = img[y0:y1, x0:x1]
        mask, colors = _trim_mask_and_colors(mask, colors)
        if mask is None:
            return self._customize(img, annotations, blanks, s, rng, fallback=True)

        target_h = s.value(self.space, "size")
        scale = np.clip(target_h / mask.shape[0], 0.25, 4.0)
        nh = max(int(round(mask.shape[0] * scale)), 2)
        nw = max(int(round(mask.shape[1] * scale)), 2)
        jitter = s.value(self.space, "jitter")

        pos = None
        for _ in range(MAX_SHRINKS + 1):
            sm = _scale_mask_nearest(mask, nh, nw)
            sc = im.resize_bilinear(colors, nh, nw)
            if sm.any():
                pos = self._place(img, blanks, nw, nh, jitter, rng)
                if pos is not None:
                    break
            nh, nw = int(nh * SHRINK_FACTOR), int(nw * SHRINK_FACTOR)
            if nh < 3 or nw < 3:
                break
        if pos is None:
            raise PlacementError("no blank can host the replicated strokes")
        x, y = pos
        out = img.copy()
        region = out[y:y + nh, x:x + nw]
        out[y:y + nh, x:x + nw] = np.where(sm[:, :, None] == 1, sc, region)
        m_syn = np.zeros(img.shape[:2], dtype=np.uint8)
        m_syn[y:y + nh, x:x + nw] = sm
        return SynthSample(out, m_syn, img.copy(), s, (x, y, x + nw, y + nh), False)

    def _pick_content(self, annotations, rng):
        usable = [a.content.strip() for a in annotations if a.content.strip()]
        if usable:
            return usable[int(rng.integers(len(usable)))]
        return self.word_list[int(rng.integers(len(self.word_list)))]

    # ------------------------------------------------------------------

    def synthesize(self, img, annotations, blanks, s: st.StyleVector) -> SynthSample:
        """Render one styled instance; see module docstring for the contract."""
        img = im.validate_image(img)
        if img.shape[2] != 3:
            raise InvalidArgumentError("synthesis expects 3-channel images")
        st.validate_style(self.space, s)
        for ann in annotations:
            ax0, ay0, ax1, ay1 = ann.bbox
            if not (0 <= ax0 < ax1 <= img.shape[1] and 0 <= ay0 < ay1 <= img.shape[0]):
                raise InvalidArgumentError(f"annotation bbox {ann.bbox} outside image")
        rng = np.random.Generator(np.random.PCG64(s.seed))
        if s.choices[st.MECHANISM] == st.REPLICATE:
            sample = self._replicate(img, annotations, blanks, s, rng)
        else:
            sample = self._customize(img, annotations, blanks, s, rng)
        if not sample.m_syn.any():
            raise PlacementError("synthesis produced an empty mask")
        return sample


# ---------------------------------------------------------------------------
# layer helpers


def _trim(alpha, pad=1):
    ys, xs = np.nonzero(alpha > 0)
    if len(ys) == 0:
        return alpha
    a = alpha[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
    return np.pad(a, pad)


def _trim_layer(rgb, alpha):
    ys, xs = np.nonzero(alpha > COVERAGE_EPS)
    if len(ys) == 0:
        return rgb, alpha
    sl = (slice(ys.min(), ys.max() + 1), slice(xs.min(), xs.max() + 1))
    return rgb[sl], alpha[sl]


def _curve_layer(rgb, alpha, amplitude_frac):
    """Vertical sinusoidal offset per column, linear interpolation."""
    h, w = alpha.shape
    amp = amplitude_frac * h
    pad = int(np.ceil(amp)) + 1
    rgb = np.pad(rgb, ((pad, pad), (0, 0), (0, 0)))
    alpha = np.pad(alpha, ((pad, pad), (0, 0)))
    hh = alpha.shape[0]
    shifts = amp * np.sin(np.pi * np.arange(w) / max(w - 1, 1))
    out_rgb = np.zeros_like(rgb)
    out_alpha = np.zeros_like(alpha)
    rows = np.arange(hh)
    for x in range(w):
        sy = rows - shifts[x]
        lo = np.clip(np.floor(sy).astype(int), 0, hh - 1)
        hi2 = np.clip(lo + 1, 0, hh - 1)
        f = np.clip(sy - lo, 0.0, 1.0)
        out_alpha[:, x] = alpha[lo, x] * (1 - f) + alpha[hi2, x] * f
        out_rgb[:, x] = rgb[lo, x] * (1 - f)[:, None] + rgb[hi2, x] * f[:, None]
    return out_rgb, out_alpha


def _warp_layer(rgb, alpha, shear, tilt, angle_deg):
    """Map the layer rectangle through shear + perspective pinch + rotation."""
    h, w = alpha.shape
    corners = np.array([[0, 0], [w - 1.0, 0], [w - 1.0, h - 1.0], [0, h - 1.0]])
    quad = corners.astype(np.float64).copy()
    if shear:
        quad[:, 0] += shear * (h - 1 - quad[:, 1])
    if tilt:
        pinch = tilt * (w - 1) / 2.0
        quad[0, 0] += pinch
        quad[1, 0] -= pinch
    if angle_deg:
        th = np.deg2rad(angle_deg)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        center = quad.mean(axis=0)
        quad = (quad - center) @ rot.T + center
    quad -= quad.min(axis=0)
    out_w = int(np.ceil(quad[:, 0].max())) + 2
    out_h = int(np.ceil(quad[:, 1].max())) + 2
    quad += 1.0

    stack = np.clip(np.concatenate([rgb, alpha[:, :, None]], axis=2), 0.0, 1.0)
    warped_rgb = np.zeros((out_h, out_w, 3))
    for c in range(3):
        layer, _ = im.homography_warp(stack[:, :, c:c + 1].astype(np.float64),
                                      quad, out_shape=(out_h, out_w))
        warped_rgb[:, :, c] = layer[:, :, 0]
    layer, _ = im.homography_warp(stack[:, :, 3:4].astype(np.float64),
                                  quad, out_shape=(out_h, out_w))
    warped_alpha = layer[:, :, 0]
    return warped_rgb, warped_alpha


def _scale_mask_nearest(mask, nh, nw):
    h, w = mask.shape
    ys = np.minimum((np.arange(nh) * h / nh).astype(int), h - 1)
    xs = np.minimum((np.arange(nw) * w / nw).astype(int), w - 1)
    return mask[ys][:, xs]


def _trim_mask_and_colors(mask, colors):
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None, None
    sl = (slice(ys.min(), ys.max() + 1), slice(xs.min(), xs.max() + 1))
    return mask[sl], colors[sl]
