"""Maximally stable extremal region extraction.

Builds a component tree over gray levels (union-find flood in ascending
level order, 4-connectivity) and selects regions whose area is stable
across a band of thresholds. "Dark" polarity grows lower level sets
{p : gray(p) <= t}; "light" polarity runs the same machinery on the
inverted image.

Stability of a region R with level range [a, b]:

    q_t(R) = (|R at threshold t+delta| - |R at threshold t-delta|) / |R|

evaluated along the thread of components containing R's seed pixel (the
lowest-gray pixel of the region, ties broken by raveled index). The
downward threshold t-delta is clamped at the seed's birth level, so a
region that simply stops growing is perfectly stable. A node is selected
when min_t q_t is no larger than its path neighbours (parent node and the
child on the seed thread), is <= max_variation, and its area fits the
configured bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .image import validate_image

GRAY_LEVELS = 256


def to_gray_levels(img):
    """1- or 3-channel [0,1] image to integer gray levels 0..255 (luma weights)."""
    img = validate_image(img)
    if img.shape[2] == 3:
        gray = 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]
    else:
        gray = img[:, :, 0]
    return np.floor(gray * 255.0 + 0.5).astype(np.int32)


@dataclass
class MserParams:
    delta: int = 5
    min_area: int = 8
    max_area: int | None = None      # None -> 0.9 * crop area
    max_variation: float = 0.5
    polarity: str = "both"           # dark-on-light | light-on-dark | both

    def __post_init__(self):
        if self.delta < 1:
            raise InvalidArgumentError("delta must be >= 1")
        if self.max_area is not None and self.min_area > self.max_area:
            raise InvalidArgumentError("min_area must be <= max_area")
        if self.max_variation < 0:
            raise InvalidArgumentError("max_variation must be >= 0")
        if self.polarity not in ("dark-on-light", "light-on-dark", "both"):
            raise InvalidArgumentError(f"unknown polarity {self.polarity!r}")

    def resolved_max_area(self, crop_area):
        return self.max_area if self.max_area is not None else int(0.9 * crop_area)


@dataclass
class ComponentTree:
    """Component tree of extremal regions (lower level sets of ``levels_img``)."""

    shape: tuple
    node_level: np.ndarray        # (n_nodes,) gray level at which the node appears
    node_parent: np.ndarray       # (n_nodes,) parent node index; root points to itself
    node_area: np.ndarray         # (n_nodes,) region pixel count (includes descendants)
    node_seed: np.ndarray         # (n_nodes,) raveled index of the region's seed pixel
    pixel_node: np.ndarray        # (H*W,) node that directly owns each pixel
    _direct: list = field(default_factory=list, repr=False)   # per-node direct pixels
    _children: list = field(default_factory=list, repr=False)

    @property
    def n_nodes(self):
        return len(self.node_level)

    @property
    def root(self):
        return int(np.argmax(self.node_parent == np.arange(self.n_nodes)))

    def children(self, i):
        return self._children[i]

    def region_pixels(self, i):
        """Sorted raveled pixel indices of node i's full region."""
        out = []
        stack = [i]
        while stack:
            j = stack.pop()
            out.append(self._direct[j])
            stack.extend(self._children[j])
        return np.sort(np.concatenate(out))

    def components_at_level(self, t):
        """Regions forming the connected components of {gray <= t}."""
        nodes = [
            i for i in range(self.n_nodes)
            if self.node_level[i] <= t
            and (self.node_parent[i] == i or self.node_level[self.node_parent[i]] > t)
        ]
        return [self.region_pixels(i) for i in nodes]


_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def build_component_tree(gray, polarity="dark-on-light"):
    """Union-find flood over pixels sorted by gray level.

    ``gray`` is either a 1-channel [0,1] image or an integer level array.
    """
    gray = np.asarray(gray)
    if gray.ndim == 3:
        levels = to_gray_levels(gray)
    else:
        levels = gray.astype(np.int32)
    if levels.ndim != 2:
        raise InvalidArgumentError("component tree needs a single-channel image")
    if levels.min() < 0 or levels.max() > 255:
        raise InvalidArgumentError("gray levels must be quantized to 0..255")
    if polarity == "light-on-dark":
        levels = 255 - levels

    h, w = levels.shape
    n = h * w
    flat = levels.reshape(-1)
    order = np.lexsort((np.arange(n), flat))     # ascending (level, index)

    uf = np.arange(n, dtype=np.int64)
    canon = np.arange(n, dtype=np.int64)         # UF-root -> canonical (latest) pixel
    parent_px = np.arange(n, dtype=np.int64)     # pixel-level tree pointers
    processed = np.zeros(n, dtype=bool)

    def find(x):
        root = x
        while uf[root] != root:
            root = uf[root]
        while uf[x] != root:
            uf[x], x = root, uf[x]
        return root

    for p in order:
        processed[p] = True
        py, px = divmod(int(p), w)
        for dy, dx in _NEIGHBOURS:
            qy, qx = py + dy, px + dx
            if not (0 <= qy < h and 0 <= qx < w):
                continue
            q = qy * w + qx
            if not processed[q]:
                continue
            rq = find(q)
            rp = find(p)
            if rq == rp:
                continue
            parent_px[canon[rq]] = p
            uf[rq] = rp
            canon[rp] = p

    # collapse same-level chains so every parent pointer hits a canonical pixel
    for p in order[::-1]:
        q = parent_px[p]
        if flat[q] == flat[parent_px[q]] and parent_px[q] != q:
            parent_px[p] = parent_px[q]

    is_canon = (parent_px == np.arange(n)) | (flat[parent_px] != flat)
    canon_pixels = np.arange(n)[is_canon]
    # deterministic node order: by (level, first-processed position)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    canon_pixels = canon_pixels[np.lexsort((rank[canon_pixels], flat[canon_pixels]))]
    node_id = np.full(n, -1, dtype=np.int64)
    node_id[canon_pixels] = np.arange(len(canon_pixels))

    pixel_node = np.where(is_canon, node_id, node_id[parent_px])
    node_parent = np.where(
        parent_px[canon_pixels] == canon_pixels,
        node_id[canon_pixels],
        node_id[parent_px[canon_pixels]],
    )
    node_level = flat[canon_pixels]

    n_nodes = len(canon_pixels)
    direct = [[] for _ in range(n_nodes)]
    for p in order:
        direct[pixel_node[p]].append(int(p))
    direct = [np.asarray(d, dtype=np.int64) for d in direct]

    children = [[] for _ in range(n_nodes)]
    for i in range(n_nodes):
        if node_parent[i] != i:
            children[node_parent[i]].append(i)

    # areas and seeds accumulate child-to-parent; node order is ascending level
    node_area = np.array([len(d) for d in direct], dtype=np.int64)
    node_seed = np.array(
        [d[np.argmin(rank[d])] if len(d) else -1 for d in direct], dtype=np.int64
    )
    for i in range(n_nodes):
        p = node_parent[i]
        if p != i:
            node_area[p] += node_area[i]
            if node_seed[p] == -1 or rank[node_seed[i]] < rank[node_seed[p]]:
                node_seed[p] = node_seed[i]

    return ComponentTree(
        shape=(h, w),
        node_level=node_level,
        node_parent=node_parent,
        node_area=node_area,
        node_seed=node_seed,
        pixel_node=pixel_node,
        _direct=direct,
        _children=children,
    )


def _seed_thread(tree, node):
    """Nodes containing ``node``'s seed, leaf first, ending at ``node``."""
    seed = tree.node_seed[node]
    cur = int(tree.pixel_node[seed])
    thread = [cur]
    while cur != node:
        cur = int(tree.node_parent[cur])
        thread.append(cur)
    return thread


def _component_area_at(tree, thread, ancestors, t):
    """Area of the component containing the seed at threshold ``t``.

    ``thread`` covers descendants up to the node, ``ancestors`` the node and
    its ancestors; thresholds below the seed's birth level clamp to the leaf.
    """
    chain = thread[:-1] + ancestors
    best = chain[0]
    for nd in chain:
        if tree.node_level[nd] <= t:
            best = nd
        else:
            break
    return int(tree.node_area[best])


def region_stability(tree, node, delta):
    """min_t q_t for ``node`` over its level range (see module docstring)."""
    parent = int(tree.node_parent[node])
    lo = int(tree.node_level[node])
    hi = (GRAY_LEVELS - 1) if parent == node else int(tree.node_level[parent]) - 1
    thread = _seed_thread(tree, node)
    ancestors = [node]
    cur = node
    while tree.node_parent[cur] != cur:
        cur = int(tree.node_parent[cur])
        ancestors.append(cur)

    candidates = {lo, hi}
    for nd in ancestors:
        candidates.add(int(tree.node_level[nd]) - delta)
    for nd in thread:
        candidates.add(int(tree.node_level[nd]) + delta)
    area = float(tree.node_area[node])
    best = np.inf
    for t in sorted(candidates):
        if not lo <= t <= hi:
            continue
        up = _component_area_at(tree, thread, ancestors, min(t + delta, GRAY_LEVELS - 1))
        down = _component_area_at(tree, thread, ancestors, t - delta)
        best = min(best, (up - down) / area)
    return best


def detect_regions(tree, params: MserParams):
    """Stable regions as sorted raveled pixel-index arrays.

    A node is kept when its stability is a (non-strict) local minimum along
    the tree path, passes max_variation, and its area is inside the bounds.
    """
    crop_area = tree.shape[0] * tree.shape[1]
    max_area = params.resolved_max_area(crop_area)
    q = np.full(tree.n_nodes, np.inf)
    for i in range(tree.n_nodes):
        if tree.node_area[i] > max_area and tree.node_parent[i] == i:
            continue                      # never evaluate an oversized root
        q[i] = region_stability(tree, i, params.delta)

    out = []
    for i in range(tree.n_nodes):
        area = int(tree.node_area[i])
        if not params.min_area <= area <= max_area:
            continue
        if q[i] > params.max_variation:
            continue
        parent = int(tree.node_parent[i])
        q_parent = q[parent] if parent != i else np.inf
        thread = _seed_thread(tree, i)
        seed_child = thread[-2] if len(thread) >= 2 else None
        q_child = q[seed_child] if seed_child is not None else np.inf
        if q[i] <= q_parent and q[i] <= q_child:
            out.append(tree.region_pixels(i))
    return out


def _polarity_list(polarity):
    if polarity == "both":
        return ["dark-on-light", "light-on-dark"]
    return [polarity]


def extract_text_mask(img, bbox, params: MserParams | None = None):
    """Recover text-stroke pixels inside ``bbox`` as a bbox-local mask.

    Runs detection for the configured polarities, keeps regions that touch
    the vertical center band of the crop, and unions them. The winning
    polarity is the one with the larger total stable area. Returns
    (mask, failed); ``failed`` is True when nothing was found and the mask
    is empty (callers fall back to customization).
    """
    img = validate_image(img)
    params = params or MserParams()
    x0, y0, x1, y1 = bbox
    h, w = img.shape[:2]
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise InvalidArgumentError(f"bbox {bbox} outside image bounds {w}x{h}")
    crop = img[y0:y1, x0:x1]
    ch, cw = crop.shape[:2]
    levels = to_gray_levels(crop)
    band_lo, band_hi = ch // 4, max(ch // 4 + 1, (3 * ch) // 4)

    best_mask = np.zeros((ch, cw), dtype=np.uint8)
    best_total = 0
    for pol in _polarity_list(params.polarity):
        tree = build_component_tree(levels, polarity=pol)
        regions = detect_regions(tree, params)
        mask = np.zeros((ch, cw), dtype=np.uint8)
        total = 0
        for px in regions:
            rows = px // cw
            if not ((rows >= band_lo) & (rows < band_hi)).any():
                continue
            mask.reshape(-1)[px] = 1
            total += len(px)
        if total > best_total:
            best_total = total
            best_mask = mask
    return best_mask, best_total == 0
