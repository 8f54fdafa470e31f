"""File formats: PNG codecs, templates, pose banks and the config file."""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .config import Config
from .errors import ConfigError, DecodeError, SchemaError, TemplateError
from .geometry import Skeleton, align_canonical, bone_lengths, default_skeleton

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- PNG

def write_png(path, array: np.ndarray, palette: list | None = None) -> None:
    """Write uint8 RGB ``(H, W, 3)``, uint8 labels ``(H, W)`` (palette mode
    when ``palette`` is given) or uint16 grayscale ``(H, W)``."""
    a = np.asarray(array)
    if a.ndim == 3 and a.shape[-1] == 3:
        img = Image.fromarray(a.astype(np.uint8), mode="RGB")
    elif a.ndim == 2 and a.dtype == np.uint16:
        img = Image.fromarray(a)
    elif a.ndim == 2:
        img = Image.fromarray(a.astype(np.uint8), mode="P" if palette is not None else "L")
        if palette is not None:
            img.putpalette([c for rgb in palette for c in rgb])
    else:
        raise ValueError(f"cannot encode array of shape {a.shape}")
    img.save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Decode a PNG; palette images return their index array."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode == "P":
                return np.asarray(img, dtype=np.uint8)
            if img.mode in ("I;16", "I;16B", "I"):
                return np.asarray(img).astype(np.uint16)
            if img.mode == "L":
                return np.asarray(img, dtype=np.uint8)
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode PNG {path}: {exc}") from None


def image_to_uint8(img: torch.Tensor) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    a = img.detach().cpu().double().clamp(0, 1).permute(1, 2, 0).numpy()
    return np.round(a * 255.0).astype(np.uint8)


def uint8_to_image(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(a, dtype=np.float64) / 255.0).permute(2, 0, 1).contiguous()


def map_to_uint16(m: torch.Tensor) -> np.ndarray:
    return np.round(m.detach().cpu().double().clamp(0, 1).numpy() * 65535.0).astype(np.uint16)


PART_PALETTE = [
    (0, 0, 0), (230, 190, 60), (200, 60, 60), (60, 120, 220), (40, 60, 160), (60, 200, 90),
    (20, 120, 50), (220, 120, 220), (150, 40, 150), (240, 150, 60), (160, 90, 20), (255, 255, 255),
]


# ---------------------------------------------------------------- template

def _template_files(directory):
    if directory is None:
        root = resources.files("puppetpose.data")
        return root.joinpath("template.png"), root.joinpath("template.json")
    d = Path(directory)
    return d / "template.png", d / "template.json"


def load_template(directory=None, skeleton: Skeleton | None = None):
    """Read ``template.png`` (palette-indexed) and ``template.json``.

    Returns ``(label_map, anchors)`` ready for :func:`puppet.build_dictionary`.
    """
    s = skeleton or default_skeleton()
    png, js = _template_files(directory)
    try:
        with resources.as_file(png) as p:
            with Image.open(p) as img:
                img.load()
                if img.mode != "P":
                    raise TemplateError("template.png must be palette-indexed")
                label = np.asarray(img, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise TemplateError(f"cannot read template image: {exc}") from None
    try:
        meta = json.loads(js.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TemplateError(f"cannot read template.json: {exc}") from None
    if label.max() > s.L:
        raise TemplateError(f"template palette index {int(label.max())} exceeds part count {s.L}")
    for part in meta.get("parts", []):
        if part["limb"] not in [l.id for l in s.limbs]:
            raise TemplateError(f"unknown limb {part['limb']!r} in template.json")
        if s.limbs[part["label"] - 1].id != part["limb"]:
            raise TemplateError(f"label {part['label']} does not match limb {part['limb']!r}")
    present = set(np.unique(label).tolist())
    for l, limb in enumerate(s.limbs):
        if l + 1 not in present:
            raise TemplateError(f"part {limb.id!r} missing from template.png")
    anchors = meta.get("anchors", {})
    size = label.shape[0]
    for name, xy in anchors.items():
        if not (-0.5 <= xy[0] <= size - 0.5 and -0.5 <= xy[1] <= size - 0.5):
            raise TemplateError(f"anchor {name!r} lies outside the canvas")
    return label, anchors


def save_template(directory, label: np.ndarray, anchors: dict, skeleton: Skeleton | None = None) -> None:
    s = skeleton or default_skeleton()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_png(d / "template.png", label, palette=PART_PALETTE)
    meta = {
        "canvas": list(label.shape),
        "parts": [{"label": l + 1, "limb": limb.id, "joints": [s.joints[j] for j in limb.joints]}
                  for l, limb in enumerate(s.limbs)],
        "anchors": anchors,
    }
    (d / "template.json").write_text(json.dumps(meta, indent=1))


# ---------------------------------------------------------------- pose bank

@dataclass
class PoseBank:
    """World-space poses plus their canonical versions (computed on load)."""

    world: np.ndarray
    canonical: torch.Tensor
    source: str = ""

    def __len__(self) -> int:
        return self.world.shape[0]

    def sample(self, rng: np.random.Generator, n: int | None = None) -> torch.Tensor:
        idx = rng.integers(0, len(self), size=None if n is None else n)
        return self.canonical[idx]


def _validate_frames(world: np.ndarray, skeleton: Skeleton, where: str) -> None:
    if world.ndim != 3 or world.shape[1:] != (skeleton.J, 3):
        raise SchemaError(f"{where}: expected frames of {skeleton.J} joints x 3, got {world.shape[1:]}")
    if world.shape[0] < 1:
        raise SchemaError(f"{where}: pose bank is empty")
    bad = np.argwhere(~np.isfinite(world))
    if bad.size:
        r, j, c = bad[0]
        raise SchemaError(f"{where}: non-finite value in row {r}, column {j * 3 + c} ({skeleton.joints[j]})")
    bl = bone_lengths(torch.from_numpy(world), skeleton).numpy()
    bad = np.argwhere(bl <= 0)
    if bad.size:
        raise SchemaError(f"{where}: zero-length bone in row {bad[0][0]}")


def pose_bank_from_world(world, skeleton: Skeleton | None = None, source: str = "") -> PoseBank:
    s = skeleton or default_skeleton()
    world = np.asarray(world, dtype=np.float64)
    _validate_frames(world, s, source or "pose bank")
    canonical = align_canonical(torch.from_numpy(world), s)
    return PoseBank(world, canonical, source)


def load_pose_bank(path, skeleton: Skeleton | None = None) -> PoseBank:
    """JSON (array of frames, each ``J x 3``) or CSV (header of joint-axis names)."""
    s = skeleton or default_skeleton()
    path = Path(path)
    if path.suffix.lower() == ".csv":
        world = _read_csv(path, s)
    else:
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(f"{path}: {exc}") from None
        frames = data["frames"] if isinstance(data, dict) else data
        try:
            world = np.asarray(frames, dtype=np.float64)
        except (TypeError, ValueError):
            raise SchemaError(f"{path}: frames must be numeric J x 3 arrays") from None
    return pose_bank_from_world(world, s, str(path))


def _read_csv(path: Path, s: Skeleton) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = rows[0]
    expected = [f"{n}_{a}" for n in s.joints for a in "xyz"]
    if header != expected:
        raise SchemaError(f"{path}: header must be {s.J * 3} columns named <joint>_<axis>")
    out = []
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(expected):
            raise SchemaError(f"{path}: row {r} has {len(row)} columns, expected {len(expected)}")
        vals = []
        for c, cell in enumerate(row):
            try:
                vals.append(float(cell))
            except ValueError:
                raise SchemaError(f"{path}: row {r}, column {c} ({header[c]}) is not a number") from None
        out.append(vals)
    return np.asarray(out, dtype=np.float64).reshape(-1, s.J, 3)


def save_pose_bank(path, world: np.ndarray, skeleton: Skeleton | None = None) -> None:
    s = skeleton or default_skeleton()
    path = Path(path)
    world = np.asarray(world, dtype=np.float64)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"{n}_{a}" for n in s.joints for a in "xyz"])
            for frame in world.reshape(len(world), -1):
                w.writerow([repr(float(x)) for x in frame])
    else:
        path.write_text(json.dumps({"joints": list(s.joints), "frames": world.tolist()}))


def default_pose_bank() -> PoseBank:
    text = resources.files("puppetpose.data").joinpath("posebank.json").read_text()
    data = json.loads(text)
    return pose_bank_from_world(np.asarray(data["frames"], dtype=np.float64), source="shipped")


# ---------------------------------------------------------------- config

def _coerce(kind, raw: str, key: str, lineno: int | None):
    where = f"line {lineno}: " if lineno else ""
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(eval_number(raw))
        if kind is tuple:
            return tuple(float(eval_number(x)) for x in raw.replace("(", "").replace(")", "").split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}{key}: cannot parse {raw!r} as {kind.__name__}") from None


def eval_number(text: str) -> float:
    """Floats with an optional ``pi`` multiplier: ``-pi``, ``0.5*pi``, ``pi/2``."""
    t = text.strip().replace(" ", "")
    if "pi" not in t:
        return float(t)
    sign = -1.0 if t.startswith("-") else 1.0
    t = t.lstrip("+-")
    if t == "pi":
        return sign * math.pi
    if t.endswith("*pi"):
        return sign * float(t[:-3]) * math.pi
    if t.startswith("pi/"):
        return sign * math.pi / float(t[3:])
    raise ValueError(text)


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines, optionally grouped under ``[section]``.

    Keys outside any section must be fully dotted (``loss.beta = 0.7``).
    Unknown keys log a warning; values of the wrong type raise
    :class:`ConfigError` naming the line.
    """
    cfg = base or Config()
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    root = "__root__"
    try:
        parser.read_string(f"[{root}]\n" + text)
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] - 1 if exc.errors else None
        raise ConfigError(f"line {lineno}: malformed entry {exc.errors[0][1].strip()!r}") from None
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    lines = text.splitlines()
    section = root
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped or stripped.startswith(";"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            continue
        key, _, raw = stripped.partition("=")
        key = key.strip()
        full = key if section == root else f"{section}.{key}"
        kind = cfg.field_type(full)
        if kind is None:
            log.warning("line %d: unknown config key %r ignored", lineno, full)
            continue
        cfg.set(full, _coerce(kind, raw, full, lineno))
    return cfg


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(cfg: Config) -> str:
    lines = []
    for key in cfg.keys():
        v = cfg.get(key)
        if isinstance(v, tuple):
            v = ", ".join(repr(float(x)) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
