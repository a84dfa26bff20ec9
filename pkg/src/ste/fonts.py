"""Font discovery for the text rasterizer.

The synthesis engine needs a fixed-size set of fonts so the style space
stays constant across machines. Fonts are discovered from the configured
directory (or matplotlib's bundled TTF directory, then /usr/share/fonts),
sorted by filename, and cycled to exactly ``count`` entries.
"""

from __future__ import annotations

import glob
import os

from .errors import ConfigError

FONT_COUNT = 6

# deterministic preference order when the full DejaVu set is available
_PREFERRED = [
    "DejaVuSans.ttf",
    "DejaVuSans-Bold.ttf",
    "DejaVuSerif.ttf",
    "DejaVuSerif-Bold.ttf",
    "DejaVuSansMono.ttf",
    "DejaVuSansMono-Bold.ttf",
]


def _candidate_dirs(font_dir=None):
    dirs = []
    if font_dir:
        dirs.append(font_dir)
    try:
        import matplotlib

        dirs.append(os.path.join(matplotlib.get_data_path(), "fonts", "ttf"))
    except ImportError:
        pass
    dirs.append("/usr/share/fonts")
    return dirs


def discover_fonts(font_dir=None, count=FONT_COUNT):
    """Absolute paths of ``count`` TTF files, deterministic ordering."""
    for d in _candidate_dirs(font_dir):
        if not os.path.isdir(d):
            continue
        found = {os.path.basename(p): p for p in glob.glob(os.path.join(d, "**", "*.ttf"), recursive=True)}
        if not found:
            continue
        paths = [found[name] for name in _PREFERRED if name in found]
        for name in sorted(found):
            if found[name] not in paths:
                paths.append(found[name])
        if paths:
            return [paths[i % len(paths)] for i in range(count)]
    raise ConfigError(
        "no TTF fonts found; set font_dir in the config to a directory with .ttf files"
    )
