"""Manifest ingestion, run configuration, dataset and checkpoint persistence.

Manifests are JSON lines; every record names an image (path relative to
the manifest file), its text annotations, and optional blank rectangles.
Configs are flat ``key = value`` text files validated against RunConfig;
unknown keys are rejected. Checkpoints use the "STEW1" binary format:
little-endian, float32 parameter payloads, Adam state appended, byte-exact
round trips.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np
from PIL import Image as PILImage

from . import image as im
from .errors import CheckpointFormatError, ConfigError, ManifestError
from .nn import ParamSet
from .style import N_ELEMENTS
from .synth import SynthSample, TextAnnotation

MAGIC = b"STEW1"


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestRecord:
    image_path: str
    texts: list
    blanks: list


def _check_rect(rect, width, height, line_no, what):
    if (not isinstance(rect, (list, tuple))) or len(rect) != 4:
        raise ManifestError(f"line {line_no}: {what} must be [x0,y0,x1,y1]")
    x0, y0, x1, y1 = rect
    if not all(isinstance(v, (int, float)) and float(v).is_integer() for v in rect):
        raise ManifestError(f"line {line_no}: {what} coordinates must be integers")
    x0, y0, x1, y1 = int(x0), int(y0), int(x1), int(y1)
    if not (x0 < x1 and y0 < y1):
        raise ManifestError(f"line {line_no}: {what} has empty extent (x0<x1, y0<y1 required)")
    if not (0 <= x0 and 0 <= y0 and x1 <= width and y1 <= height):
        raise ManifestError(f"line {line_no}: {what} {rect} outside image {width}x{height}")
    return (x0, y0, x1, y1)


def parse_manifest(path):
    """Parse and validate a JSON-lines manifest; errors carry line numbers."""
    records = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ManifestError(f"line {line_no}: malformed JSON ({err})") from err
            if not isinstance(obj, dict):
                raise ManifestError(f"line {line_no}: record must be a JSON object")
            for key in ("image", "texts"):
                if key not in obj:
                    raise ManifestError(f"line {line_no}: missing field {key!r}")
            unknown = set(obj) - {"image", "texts", "blanks"}
            if unknown:
                raise ManifestError(f"line {line_no}: unknown fields {sorted(unknown)}")
            img_path = os.path.join(base, obj["image"])
            try:
                with PILImage.open(img_path) as pil:
                    width, height = pil.size
            except OSError as err:
                raise ManifestError(f"line {line_no}: cannot open image {obj['image']!r} ({err})") from err
            texts = []
            for k, t in enumerate(obj["texts"]):
                if not isinstance(t, dict) or "bbox" not in t or "content" not in t:
                    raise ManifestError(f"line {line_no}: texts[{k}] needs bbox and content")
                bbox = _check_rect(t["bbox"], width, height, line_no, f"texts[{k}].bbox")
                if not isinstance(t["content"], str) or not t["content"]:
                    raise ManifestError(f"line {line_no}: texts[{k}].content must be a nonempty string")
                texts.append(TextAnnotation(bbox, t["content"]))
            blanks = [
                _check_rect(r, width, height, line_no, f"blanks[{k}]")
                for k, r in enumerate(obj.get("blanks", []))
            ]
            records.append(ManifestRecord(img_path, texts, blanks))
    return records


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    image_size: int = 64
    batch_size: int = 32
    policy_cadence: int = 150
    reward_batch: int = 100
    warmup_steps: int = 300
    total_steps: int = 2000
    eval_every: int = 500
    seed: int = 0
    lr_gen: float = 0.0001
    lr_disc: float = 0.00001
    lr_policy: float = 0.00005
    lambda_adv: float = 0.1
    lambda_rec: float = 1.0
    lambda_mask: float = 1.0
    lambda_te: float = 2.0
    gamma: float = 2.0
    alpha_diff: float = 1.2
    ema_momentum: float = 0.99
    alpha1: float = 1.0
    alpha2: float = 1.0
    composite_orientation: str = "complement"
    policy_enabled: bool = True
    font_dir: str = ""
    style_sizes: str = ""          # e.g. "8,10,12" to override the size element
    mser_delta: int = 5
    mser_min_area: int = 8
    mser_max_variation: float = 0.5

    def __post_init__(self):
        positive = ("image_size", "batch_size", "policy_cadence", "reward_batch",
                    "total_steps", "eval_every")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.image_size % 8:
            raise ConfigError("image_size must be divisible by 8")
        for name in ("lr_gen", "lr_disc", "lr_policy"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.composite_orientation not in ("complement", "as-printed"):
            raise ConfigError("composite_orientation must be 'complement' or 'as-printed'")
        if not 0 < self.ema_momentum < 1:
            raise ConfigError("ema_momentum must lie in (0, 1)")
        if self.alpha_diff <= 1:
            raise ConfigError("alpha_diff must be > 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")

    def fingerprint(self):
        text = "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def dump(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for f in fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)}\n")


def _parse_value(raw, ftype, name):
    raw = raw.strip()
    try:
        if ftype is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return ftype(raw)
    except ValueError as err:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {ftype.__name__}") from err


def load_config(path=None, overrides=None):
    """Build a RunConfig from an optional file plus override dict."""
    values = {}
    ftypes = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    if path:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"config line {line_no}: expected 'key = value'")
                key, raw = (p.strip() for p in line.split("=", 1))
                if key not in ftypes:
                    raise ConfigError(f"config line {line_no}: unknown key {key!r}")
                values[key] = _parse_value(raw, ftypes[key], key)
    for key, val in (overrides or {}).items():
        if key not in ftypes:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = val if not isinstance(val, str) else _parse_value(val, ftypes[key], key)
    try:
        return RunConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from err


def with_overrides(cfg, **kwargs):
    return replace(cfg, **kwargs)


# ---------------------------------------------------------------------------
# sample persistence


def write_sample(sample: SynthSample, out_dir, sample_id, space=None):
    """Write {id}_syn.png, {id}_gt.png, {id}_mask.png, {id}_style.json."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "syn": os.path.join(out_dir, f"{sample_id}_syn.png"),
        "gt": os.path.join(out_dir, f"{sample_id}_gt.png"),
        "mask": os.path.join(out_dir, f"{sample_id}_mask.png"),
        "style": os.path.join(out_dir, f"{sample_id}_style.json"),
    }
    im.write_png(paths["syn"], sample.i_syn)
    im.write_png(paths["gt"], sample.ground_truth)
    im.write_mask_png(paths["mask"], sample.m_syn)
    names = [e.name for e in space.elements] if space is not None else [f"e{i}" for i in range(N_ELEMENTS)]
    hierarchy = [0 if c < 0 else 1 for c in sample.style.choices]
    payload = {
        "elements": names,
        "choices": list(sample.style.choices),
        "hierarchy": hierarchy,
        "seed": sample.style.seed,
        "fallback": bool(sample.fallback),
        "placement": list(sample.placement),
    }
    with open(paths["style"], "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    return paths


def read_sample(out_dir, sample_id):
    """Read back a persisted sample (8-bit quantized images)."""
    from .style import StyleVector

    i_syn = im.read_png(os.path.join(out_dir, f"{sample_id}_syn.png"))
    gt = im.read_png(os.path.join(out_dir, f"{sample_id}_gt.png"))
    mask = im.read_mask_png(os.path.join(out_dir, f"{sample_id}_mask.png"))
    with open(os.path.join(out_dir, f"{sample_id}_style.json"), encoding="utf-8") as fh:
        payload = json.load(fh)
    style = StyleVector(tuple(payload["choices"]), payload["seed"])
    return SynthSample(i_syn, mask, gt, style, tuple(payload["placement"]),
                       payload["fallback"])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ParamSet, path):
    """Serialize parameters and Adam state; see the module docstring."""
    chunks = [MAGIC, struct.pack("<I", len(params.params))]
    for name, t in params.params.items():
        if t.data.dtype != np.float32:
            raise CheckpointFormatError(f"checkpoint stores float32 only; {name} is {t.data.dtype}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(t.data.astype("<f4").tobytes())
    for name in params.params:
        chunks.append(struct.pack("<Q", params.adam_step_count[name]))
        chunks.append(params.adam_m[name].astype("<f4").tobytes())
        chunks.append(params.adam_v[name].astype("<f4").tobytes())
    blob = b"".join(chunks)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> ParamSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    rd = _Reader(blob)
    magic = rd.take(len(MAGIC), "magic")
    if magic[:4] != MAGIC[:4]:
        raise CheckpointFormatError(f"bad magic {magic!r}; not a checkpoint file")
    if magic != MAGIC:
        raise CheckpointFormatError(f"unsupported checkpoint version {magic!r}; expected {MAGIC!r}")
    (count,) = rd.unpack("<I", "parameter count")
    params = ParamSet()
    for _ in range(count):
        (name_len,) = rd.unpack("<H", "name length")
        name = rd.take(name_len, "name").decode("utf-8")
        (ndim,) = rd.unpack("<B", "ndim")
        shape = rd.unpack(f"<{ndim}I", "shape") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(rd.take(4 * n, f"data of {name}"), dtype="<f4").reshape(shape)
        params.add(name, data.copy())
    for name in params.params:
        (steps,) = rd.unpack("<Q", f"step count of {name}")
        n = params.params[name].data.size
        shape = params.params[name].data.shape
        m = np.frombuffer(rd.take(4 * n, f"adam m of {name}"), dtype="<f4").reshape(shape)
        v = np.frombuffer(rd.take(4 * n, f"adam v of {name}"), dtype="<f4").reshape(shape)
        params.adam_step_count[name] = steps
        params.adam_m[name] = m.copy()
        params.adam_v[name] = v.copy()
    if rd.pos != len(blob):
        raise CheckpointFormatError(f"{len(blob) - rd.pos} trailing bytes in checkpoint")
    return params
