"""Synthetic misaligned RGB/IR scenes with exact ground truth.

Objects are placed in the IR frame. The RGB rendering draws every object
displaced by ``global_shift + jitter`` (integer image pixels), so the RGB masks
are the IR masks translated object by object.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, GenerationError
from .tenio import load_tensor, save_tensor

MAX_ATTEMPTS = 1000

# Per-category modality signatures. IR categories sit on a half-circle in
# (intensity, stripe amplitude) around a flat mid-grey background, so every
# category is an extreme point a linear read-out can isolate. RGB colours sit
# close to the background (the weak modality).
_RGB_BACKGROUND = np.array([0.45, 0.45, 0.45])
_RGB_COLORS = np.array([
    [0.60, 0.40, 0.40],
    [0.40, 0.60, 0.40],
    [0.40, 0.40, 0.60],
    [0.58, 0.58, 0.32],
    [0.32, 0.58, 0.58],
    [0.58, 0.32, 0.58],
    [0.60, 0.60, 0.60],
    [0.30, 0.30, 0.30],
])
_IR_BACKGROUND = 0.5
_IR_RADIUS = 0.4
_IR_TEXTURE = 0.3
_STRIPE_PERIOD = 4.0


@dataclass
class SceneConfig:
    image_size: int = 64
    n_categories: int = 5
    objects_min: int = 3
    objects_max: int = 5
    size_min: int = 10
    size_max: int = 18
    shift_y: int = 0
    shift_x: int = 0
    jitter: int = 0
    noise_sigma: float = 0.05
    seed: int = 0
    downsample: int = 4

    @property
    def global_shift(self) -> tuple[int, int]:
        return (self.shift_y, self.shift_x)

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % self.downsample:
            raise ConfigError(
                f"image_size {self.image_size} must be a positive multiple of {self.downsample}")
        if not 1 <= self.n_categories <= len(_RGB_COLORS):
            raise ConfigError(f"n_categories must be in [1, {len(_RGB_COLORS)}]")
        if not 0 <= self.objects_min <= self.objects_max:
            raise ConfigError("need 0 <= objects_min <= objects_max")
        if not 1 <= self.size_min <= self.size_max:
            raise ConfigError("need 1 <= size_min <= size_max")
        if self.jitter < 0 or self.noise_sigma < 0:
            raise ConfigError("jitter and noise_sigma must be non-negative")
        if max(abs(self.shift_y), abs(self.shift_x)) + self.jitter >= self.size_min:
            raise ConfigError("|global_shift| + jitter must be smaller than size_min")
        reach = max(abs(self.shift_y), abs(self.shift_x)) + self.jitter
        if self.size_max + 2 * reach > self.image_size:
            raise ConfigError("objects plus shift do not fit in the image")


@dataclass
class ObjectInfo:
    id: int
    category: int
    shift: tuple[int, int]               # RGB displacement relative to IR, image pixels
    bbox: tuple[int, int, int, int]      # IR frame, (y0, x0, y1, x1), end-exclusive
    shape: str = field(default="rect", compare=False)


@dataclass
class Sample:
    rgb: np.ndarray          # [3, H, W] in [0, 1]
    ir: np.ndarray           # [1, H, W] in [0, 1]
    masks_rgb: np.ndarray    # [n, H, W] in {0, 1}
    masks_ir: np.ndarray     # [n, H, W] in {0, 1}
    objects: list[ObjectInfo] = field(default_factory=list)

    @property
    def categories(self) -> list[int]:
        return [o.category for o in self.objects]

    def object_masks_ir(self) -> list[np.ndarray]:
        """Per-object IR-frame masks (objects never overlap)."""
        out = []
        for o in self.objects:
            y0, x0, y1, x1 = o.bbox
            m = np.zeros(self.masks_ir.shape[1:], dtype=bool)
            m[y0:y1, x0:x1] = self.masks_ir[o.category, y0:y1, x0:x1] > 0.5
            out.append(m)
        return out


def rasterize(shape: str, bbox, size: int) -> np.ndarray:
    """Binary mask of a rectangle or the ellipse inscribed in ``bbox`` (pixel centres)."""
    y0, x0, y1, x1 = bbox
    m = np.zeros((size, size), dtype=bool)
    if shape == "rect":
        m[y0:y1, x0:x1] = True
        return m
    cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
    ay, ax = (y1 - y0) / 2, (x1 - x0) / 2
    yy, xx = np.mgrid[y0:y1, x0:x1] + 0.5
    m[y0:y1, x0:x1] = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
    return m


def _angle(category: int, n: int) -> float:
    return np.pi * category / max(n - 1, 1)


def _texture(category: int, n: int, size: int) -> np.ndarray:
    """Horizontal stripes whose amplitude peaks for the middle categories."""
    yy = np.mgrid[0:size, 0:size][0]
    return _IR_TEXTURE * np.sin(_angle(category, n)) * np.sin(2 * np.pi * yy / _STRIPE_PERIOD)


def _ir_level(category: int, n: int) -> float:
    return _IR_BACKGROUND - _IR_RADIUS * np.cos(_angle(category, n))


def _overlaps(box, boxes, gap: int = 1) -> bool:
    y0, x0, y1, x1 = box
    for b0, c0, b1, c1 in boxes:
        if y0 < b1 + gap and b0 < y1 + gap and x0 < c1 + gap and c0 < x1 + gap:
            return True
    return False


def _shifted(box, shift):
    dy, dx = shift
    return (box[0] + dy, box[1] + dx, box[2] + dy, box[3] + dx)


def generate_scene(config: SceneConfig, index: int) -> Sample:
    """Deterministic in (config.seed, index)."""
    config.validate()
    rng = np.random.default_rng([int(config.seed), int(index)])
    S, n = config.image_size, config.n_categories
    reach = max(abs(config.shift_y), abs(config.shift_x)) + config.jitter
    count = int(rng.integers(config.objects_min, config.objects_max + 1))

    objects: list[ObjectInfo] = []
    ir_boxes, rgb_boxes = [], []
    for obj_id in range(count):
        for _ in range(MAX_ATTEMPTS):
            h = int(rng.integers(config.size_min, config.size_max + 1))
            w = int(rng.integers(config.size_min, config.size_max + 1))
            y0 = int(rng.integers(reach, S - reach - h + 1))
            x0 = int(rng.integers(reach, S - reach - w + 1))
            jit = tuple(int(v) for v in rng.integers(-config.jitter, config.jitter + 1, size=2))
            shift = (config.shift_y + jit[0], config.shift_x + jit[1])
            box = (y0, x0, y0 + h, x0 + w)
            if not (_overlaps(box, ir_boxes) or _overlaps(_shifted(box, shift), rgb_boxes)):
                break
        else:
            raise GenerationError(
                f"could not place object {obj_id} after {MAX_ATTEMPTS} attempts; "
                "use fewer or smaller objects")
        category = int(rng.integers(0, n))
        shape = "rect" if rng.random() < 0.5 else "ellipse"
        ir_boxes.append(box)
        rgb_boxes.append(_shifted(box, shift))
        objects.append(ObjectInfo(obj_id, category, shift, box, shape))

    masks_ir = np.zeros((n, S, S))
    masks_rgb = np.zeros((n, S, S))
    ir = np.full((S, S), _IR_BACKGROUND)
    rgb = np.repeat(_RGB_BACKGROUND[:, None, None], S, axis=1).repeat(S, axis=2)
    for o in objects:
        m_ir = rasterize(o.shape, o.bbox, S)
        m_rgb = rasterize(o.shape, _shifted(o.bbox, o.shift), S)
        masks_ir[o.category][m_ir] = 1
        masks_rgb[o.category][m_rgb] = 1
        ir[m_ir] = _ir_level(o.category, n) + _texture(o.category, n, S)[m_ir]
        rgb[:, m_rgb] = _RGB_COLORS[o.category][:, None]
    ir = ir + config.noise_sigma * rng.standard_normal((S, S))
    rgb = rgb + config.noise_sigma * rng.standard_normal((3, S, S))
    return Sample(np.clip(rgb, 0, 1), np.clip(ir, 0, 1)[None], masks_rgb, masks_ir, objects)


# -- on-disk layout ----------------------------------------------------------
SAMPLE_FILES = ("rgb.ten", "ir.ten", "masks_rgb.ten", "masks_ir.ten", "meta.txt")


def format_meta(objects) -> str:
    return "".join(
        f"object {o.id} cat {o.category} shift {o.shift[0]} {o.shift[1]} "
        f"bbox {o.bbox[0]} {o.bbox[1]} {o.bbox[2]} {o.bbox[3]}\n" for o in objects)


def parse_meta(text: str, source: str = "meta.txt") -> list[ObjectInfo]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 12 or parts[0] != "object" or parts[2] != "cat" \
                or parts[4] != "shift" or parts[7] != "bbox":
            raise FormatError(f"{source}:{lineno}: malformed object line")
        v = [int(parts[i]) for i in (1, 3, 5, 6, 8, 9, 10, 11)]
        out.append(ObjectInfo(v[0], v[1], (v[2], v[3]), (v[4], v[5], v[6], v[7])))
    return out


def write_sample(sample: Sample, directory) -> str:
    """Write one sample; returns a checksum over its files in fixed order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    for name, arr in (("rgb.ten", sample.rgb), ("ir.ten", sample.ir),
                      ("masks_rgb.ten", sample.masks_rgb), ("masks_ir.ten", sample.masks_ir)):
        digest.update(save_tensor(directory / name, arr).encode())
    meta = format_meta(sample.objects).encode()
    (directory / "meta.txt").write_bytes(meta)
    digest.update(hashlib.sha256(meta).digest().hex().encode())
    return digest.hexdigest()


def read_sample(directory) -> Sample:
    directory = Path(directory)
    try:
        arrays = [load_tensor(directory / name, dtype=np.float64) for name in SAMPLE_FILES[:4]]
        objects = parse_meta((directory / "meta.txt").read_text(), str(directory / "meta.txt"))
    except FileNotFoundError as exc:
        raise FormatError(f"incomplete sample directory {directory}: {exc.filename}") from exc
    return Sample(*arrays, objects)


def write_dataset(config: SceneConfig, count: int, directory) -> list[tuple[str, str]]:
    """Generate ``count`` samples under ``directory`` plus ``manifest.txt``.

    Returns the manifest rows ``(relative path, checksum)``.
    """
    config.validate()
    directory = Path(directory)
    rows = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            rel = f"sample_{i:05d}"
            rows.append((rel, write_sample(generate_scene(config, i), directory / rel)))
        (directory / "manifest.txt").write_text("".join(f"{p}\t{c}\n" for p, c in rows))
    except OSError as exc:
        raise OSError(exc.errno, f"{exc.strerror}", exc.filename or str(directory)) from exc
    return rows


def read_manifest(path) -> tuple[Path, list[tuple[str, str]]]:
    """Accepts a dataset directory or its manifest file; returns (root, rows)."""
    path = Path(path)
    manifest = path / "manifest.txt" if path.is_dir() else path
    if not manifest.exists():
        raise FormatError(f"no manifest at {manifest}")
    rows = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rel, sep, checksum = line.partition("\t")
        if not sep:
            raise FormatError(f"{manifest}:{lineno}: expected 'path<TAB>checksum'")
        rows.append((rel, checksum))
    return manifest.parent, rows


def load_dataset(path) -> list[Sample]:
    root, rows = read_manifest(path)
    return [read_sample(root / rel) for rel, _ in rows]


def config_fields() -> list[str]:
    return [f.name for f in dataclasses.fields(SceneConfig)]
