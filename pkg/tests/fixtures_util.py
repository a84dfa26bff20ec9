"""Shared fixture builders: synthetic poster-like images with planted text.

Each fixture image gets a procedural background (gradients plus soft
shapes), one planted "original" text instance rendered in a plain dark
style (its stroke mask is recorded), and a blank rectangle reserved for
synthetic placements. A JSON-lines manifest ties everything together.
"""

import json
import os

import numpy as np

from ste import style as st
from ste.image import write_png
from ste.synth import Synthesizer, TextAnnotation

WORDS = ("SALE", "OPEN", "MENU", "SHOP", "NEW", "HOT", "FREE", "SAVE",
         "DEAL", "BEST", "2FOR1", "GIFT")


def make_background(size, rng):
    """Colorful but smooth background the coarse decoder can plausibly recover."""
    y, x = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    c0 = rng.uniform(0.15, 0.85, size=3)
    c1 = rng.uniform(0.15, 0.85, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * x + np.sin(angle) * y + 1) / 2
    img = c0[None, None, :] * (1 - t[:, :, None]) + c1[None, None, :] * t[:, :, None]
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, size, size=2)
        radius = rng.uniform(size * 0.15, size * 0.4)
        blob = np.exp(-(((y * (size - 1) - cy) ** 2 + (x * (size - 1) - cx) ** 2)
                        / (2 * radius ** 2)))
        col = rng.uniform(0.1, 0.9, size=3)
        w = rng.uniform(0.25, 0.6)
        img = img * (1 - w * blob[:, :, None]) + col[None, None, :] * w * blob[:, :, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _plain_style(space, seed, size_choice=5):
    """Customize style with no effects: dark text, no blur/warp/structure."""
    choices = {
        "mechanism": 0, "font": 1, "size": size_choice, "color_mode": 0,
        "blur": 0, "alpha": 0, "poisson": 0, "italic": 0, "curve": 0,
        "perspective": 0, "rotation": 0, "shadow": 0, "border": 0,
        "spacing": 1, "opacity": 0, "jitter": 0,
    }
    raw = [choices.get(e.name, 0) for e in space.elements]
    return st.StyleVector(st.normalize_choices(space, raw), seed)


def make_fixture_dataset(out_dir, n_images, size=64, seed=0, synth=None):
    """Write n images + manifest; returns (manifest_path, list of info dicts).

    info: image path, planted annotation, blank rect, original stroke mask.
    """
    os.makedirs(out_dir, exist_ok=True)
    synth = synth or Synthesizer()
    space = synth.space
    rng = np.random.default_rng(seed)
    infos = []
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w", encoding="utf-8") as mf:
        for i in range(n_images):
            bg = make_background(size, rng)
            word = WORDS[int(rng.integers(len(WORDS)))]
            # plant the "original" text in the top half
            top = (2, 2, size - 2, size // 2 - 2)
            style = _plain_style(space, int(rng.integers(2 ** 31 - 1)),
                                 size_choice=int(rng.integers(4, 7)))
            planted = synth.synthesize(bg, [], [top], style)
            img = planted.i_syn
            bbox = planted.placement
            blank = (2, size // 2, size - 2, size - 2)
            name = f"img_{i:04d}.png"
            write_png(os.path.join(out_dir, name), img)
            record = {
                "image": name,
                "texts": [{"bbox": list(bbox), "content": word}],
                "blanks": [list(blank)],
            }
            mf.write(json.dumps(record) + "\n")
            infos.append({
                "path": os.path.join(out_dir, name),
                "image": img,
                "annotation": TextAnnotation(bbox, word),
                "blank": blank,
                "orig_stroke_mask": planted.m_syn,
            })
    return manifest_path, infos
