"""The discrete style search space and style vectors.

The space has N=20 ordered elements. Element 0 picks the synthesis
mechanism (customize vs replicate); the rest control rendering. Child
elements activate only when their parent condition holds (e.g. border
width matters only when the border toggle is on), and customization-only
elements deactivate entirely under the replicate mechanism. Inactive
slots in a style vector carry the sentinel -1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

N_ELEMENTS = 20
MAX_CHOICES = 12
INACTIVE = -1

MECHANISM = 0  # element index of the mechanism switch
CUSTOMIZE, REPLICATE = 0, 1


@dataclass(frozen=True)
class StyleElement:
    name: str
    choices: tuple
    # condition: None (always active) or (parent_index, active_choice_set)
    condition: tuple | None = None

    @property
    def n_choices(self):
        return len(self.choices)


@dataclass(frozen=True)
class StyleSpace:
    elements: tuple

    def __post_init__(self):
        if len(self.elements) != N_ELEMENTS:
            raise InvalidArgumentError(f"style space must have {N_ELEMENTS} elements")
        for i, e in enumerate(self.elements):
            if not 2 <= e.n_choices <= MAX_CHOICES:
                raise InvalidArgumentError(f"element {e.name}: needs 2..12 choices")
            if e.condition is not None and e.condition[0] >= i:
                raise InvalidArgumentError(f"element {e.name}: condition must reference an earlier element")

    def __len__(self):
        return len(self.elements)

    def __getitem__(self, i):
        return self.elements[i]

    def index_of(self, name):
        for i, e in enumerate(self.elements):
            if e.name == name:
                return i
        raise KeyError(name)

    def n_candidates(self):
        out = 1
        for e in self.elements:
            out *= e.n_choices
        return out


@dataclass(frozen=True)
class StyleVector:
    choices: tuple          # length N; INACTIVE sentinel on hierarchy-inactive slots
    seed: int               # residual randomness (slot jitter, content pick, ...)

    def __post_init__(self):
        if len(self.choices) != N_ELEMENTS:
            raise InvalidArgumentError("style vector must carry one choice per element")

    def choice(self, space, name):
        i = space.index_of(name)
        return self.choices[i]

    def value(self, space, name):
        """Concrete choice value for an element; raises on inactive slots."""
        i = space.index_of(name)
        c = self.choices[i]
        if c == INACTIVE:
            raise InvalidArgumentError(f"element {name} is inactive in this style")
        return space[i].choices[c]


def default_space(fonts=None):
    """The canonical 20-element space.

    ``fonts`` is the 6-entry font path list; defaults to symbolic ids so the
    space can be built without font discovery (the renderer resolves them).
    """
    if fonts is None:
        fonts = tuple(f"font{i}" for i in range(6))
    fonts = tuple(fonts)
    if len(fonts) != 6:
        raise InvalidArgumentError("default space expects exactly 6 fonts")
    cust = ("mechanism", frozenset([CUSTOMIZE]))
    elements = (
        StyleElement("mechanism", ("customize", "replicate")),
        StyleElement("font", fonts, cust),
        StyleElement("size", (8, 10, 12, 14, 16, 18, 20, 24)),
        StyleElement("color_mode", ("black", "white", "red", "blue", "green", "yellow",
                                    "sample_dark", "sample_light"), cust),
        StyleElement("blur", (0.0, 0.6, 1.2, 1.8), cust),
        StyleElement("alpha", (0.0, 0.1, 0.2, 0.3), cust),
        StyleElement("poisson", ("off", "on"), cust),
        StyleElement("italic", ("off", "on"), cust),
        StyleElement("curve", (0.0, 0.08, 0.16, 0.24), cust),
        StyleElement("perspective", (0.0, 0.06, 0.12, 0.18), cust),
        StyleElement("rotation", (0.0, -8.0, -4.0, 4.0, 8.0), cust),
        StyleElement("shadow", ("off", "on"), cust),
        StyleElement("shadow_offset", (1, 2, 3, 4), ("shadow", frozenset([1]))),
        StyleElement("shadow_color", (0.0, 0.15, 0.3, 0.45), ("shadow", frozenset([1]))),
        StyleElement("border", ("off", "on"), cust),
        StyleElement("border_width", (1, 2, 3, 4), ("border", frozenset([1]))),
        StyleElement("border_color", ("black", "white", "red", "yellow"), ("border", frozenset([1]))),
        StyleElement("spacing", (0, 1, 2), cust),
        StyleElement("opacity", (1.0, 0.85, 0.7, 0.55), cust),
        StyleElement("jitter", (0.0, 0.25, 0.5, 0.75)),
    )
    # resolve condition names to indices
    resolved = []
    names = [e.name for e in elements]
    for e in elements:
        cond = e.condition
        if cond is not None and isinstance(cond[0], str):
            cond = (names.index(cond[0]), cond[1])
        resolved.append(StyleElement(e.name, e.choices, cond))
    return StyleSpace(tuple(resolved))


def replace_element_choices(space: StyleSpace, name, choices):
    """New space with one element's choice list swapped (config override)."""
    idx = space.index_of(name)
    elements = list(space.elements)
    old = elements[idx]
    elements[idx] = StyleElement(old.name, tuple(choices), old.condition)
    return StyleSpace(tuple(elements))


def _condition_holds(space, choices, i):
    e = space[i]
    if e.condition is None:
        return True
    parent, active_set = e.condition
    if not _condition_holds(space, choices, parent):
        return False
    return choices[parent] in active_set


def hierarchy_mask(space: StyleSpace, s: StyleVector):
    """Per-element activity indicators H in {0,1}^N; element 0 is always 1."""
    h = np.zeros(N_ELEMENTS, dtype=np.int8)
    for i in range(N_ELEMENTS):
        h[i] = 1 if _condition_holds(space, s.choices, i) else 0
    return h


def active_elements(space: StyleSpace, choices):
    """Activity flags computed incrementally while choices are being drawn."""
    return [_condition_holds(space, choices, i) for i in range(len(choices))]


def normalize_choices(space: StyleSpace, choices):
    """Force the INACTIVE sentinel onto hierarchy-inactive slots."""
    out = list(choices)
    for i in range(N_ELEMENTS):
        if not _condition_holds(space, out, i):
            out[i] = INACTIVE
    return tuple(out)


def validate_style(space: StyleSpace, s: StyleVector):
    for i, c in enumerate(s.choices):
        active = _condition_holds(space, s.choices, i)
        if active:
            if not 0 <= c < space[i].n_choices:
                raise InvalidArgumentError(
                    f"element {space[i].name}: choice {c} out of range 0..{space[i].n_choices - 1}")
        elif c != INACTIVE and not 0 <= c < space[i].n_choices:
            raise InvalidArgumentError(
                f"element {space[i].name}: inactive slot carries invalid index {c}")
    return s


def sample_uniform(space: StyleSpace, rng, force=None) -> StyleVector:
    """Uniform draw per element, respecting the hierarchy; deterministic in rng.

    ``force`` optionally pins {element index: choice} before the hierarchy
    is applied (used by coverage tests and rigged-reward experiments).
    """
    force = force or {}
    choices = []
    for i in range(N_ELEMENTS):
        draw = force.get(i, int(rng.integers(space[i].n_choices)))
        choices.append(draw if _condition_holds(space, choices + [draw], i) else INACTIVE)
    seed = int(rng.integers(2 ** 31 - 1))
    return StyleVector(tuple(choices), seed)
