"""Seeded synthetic cotton scenes, PPM images and the on-disk dataset layout.

Randomness is fully specified so other implementations can reproduce a
dataset bit for bit:

* ``splitmix64(z)``: z += 0x9E3779B97F4A7C15; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
  z = (z ^ z>>27) * 0x94D049BB133111EB; return z ^ z>>31 (all mod 2^64).
* scalar draws use xorshift64* seeded with ``splitmix64(seed ^ index)``:
  x ^= x>>12; x ^= x<<25; x ^= x>>27; return x * 0x2545F4914F6CDD1D.
* per-pixel noise for stream ``s`` is ``splitmix64(base + s * 2^32 + i)``
  for flat index ``i``, where ``base`` is the image's first xorshift output.
* uniform floats are ``(u64 >> 11) * 2^-53``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import cten
from .metrics import CLASS_NAMES, Box, GroundTruth, parse_yolo_labels, serialize_yolo_labels

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(z: int) -> int:
    z = (z + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64_array(start: int, n: int) -> np.ndarray:
    """splitmix64(start + i) for i in range(n), vectorised."""
    with np.errstate(over="ignore"):
        z = np.uint64(start & MASK64) + np.arange(n, dtype=np.uint64) + np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def u64_to_unit(u: np.ndarray) -> np.ndarray:
    return (u >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


class XorShift64Star:
    def __init__(self, seed: int):
        self.state = splitmix64(seed & MASK64) or 1

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + self.next_u64() % (hi - lo + 1)


# -- scene model ---------------------------------------------------------------

# base RGB per class; FL pale yellow, PB light boll, DB brown, FB white
_BASE = {0: (238, 222, 140), 1: (205, 205, 185), 2: (165, 135, 95), 3: (250, 250, 246)}
_WEDGE = (55, 45, 35)
_SPECK = (70, 52, 38)


@dataclass
class SceneObject:
    class_id: int
    cx: float
    cy: float
    rx: float
    ry: float
    angle: float
    box: list[float] = field(default_factory=list)  # x1, y1, x2, y2 of the rendered mask (pixels)


@dataclass
class SyntheticScene:
    width: int
    height: int
    seed: int
    index: int
    objects: list[SceneObject]
    image: np.ndarray  # uint8 [H, W, 3]

    def ground_truth(self) -> list[GroundTruth]:
        return [GroundTruth(Box(*o.box), o.class_id) for o in self.objects]


def _noise(base: int, stream: int, shape) -> np.ndarray:
    n = int(np.prod(shape))
    return u64_to_unit(splitmix64_array(base + (stream << 32), n)).reshape(shape)


def _smooth_field(base: int, stream: int, size: int, cells: int = 6) -> np.ndarray:
    coarse = _noise(base, stream, (cells + 1, cells + 1))
    t = np.linspace(0.0, cells, size, endpoint=False) + 0.5 * cells / size
    i = np.minimum(t.astype(int), cells - 1)
    f = t - i
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def _object_mask(obj: SceneObject, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    ca, sa = np.cos(obj.angle), np.sin(obj.angle)
    if obj.class_id == 3:
        # multi-lobe blob: centre lobe plus four lobes on the rotated axes
        mask = np.zeros(yy.shape, dtype=bool)
        lobe = 0.6
        for k in range(5):
            if k == 0:
                ox = oy = 0.0
            else:
                a = obj.angle + k * np.pi / 2
                ox, oy = 0.45 * obj.rx * np.cos(a), 0.45 * obj.ry * np.sin(a)
            dx, dy = xx - (obj.cx + ox), yy - (obj.cy + oy)
            mask |= (dx / (lobe * obj.rx)) ** 2 + (dy / (lobe * obj.ry)) ** 2 <= 1.0
        return mask
    dx, dy = xx - obj.cx, yy - obj.cy
    u = (dx * ca + dy * sa) / obj.rx
    v = (-dx * sa + dy * ca) / obj.ry
    return u * u + v * v <= 1.0


def render_scene(seed: int, index: int, size: int = 256, max_objects: int = 4,
                 radius_range=(0.07, 0.14), min_separation: float = 0.18) -> SyntheticScene:
    """Render one scene; per-image randomness comes from ``seed ^ index``."""
    rng = XorShift64Star(seed ^ index)
    base = rng.next_u64()
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5

    # foliage background: two smooth fields mixed with pixel noise
    shade = _smooth_field(base, 1, size)
    tint = _smooth_field(base, 2, size)
    grain = _noise(base, 3, (h, w)) - 0.5
    dark, light, soil = np.array([35, 75, 30.0]), np.array([95, 130, 55.0]), np.array([110, 90, 60.0])
    img = dark + (light - dark) * shade[..., None]
    img = img * (1 - 0.35 * tint[..., None]) + soil * 0.35 * tint[..., None]
    img += 18.0 * grain[..., None]

    objects: list[SceneObject] = []
    count = rng.randint(1, max_objects)
    for _ in range(count):
        for _attempt in range(50):
            cls = rng.randint(0, 3)
            r = rng.uniform(*radius_range) * size
            rx = r * rng.uniform(0.85, 1.15)
            ry = r * rng.uniform(0.85, 1.15)
            reach = max(rx, ry) + 1.0
            cx = rng.uniform(reach, w - reach)
            cy = rng.uniform(reach, h - reach)
            angle = rng.uniform(0.0, np.pi)
            ok = all(
                np.hypot(cx - o.cx, cy - o.cy) >= max(reach + max(o.rx, o.ry) + 2.0, min_separation * size)
                for o in objects
            )
            if ok:
                objects.append(SceneObject(cls, cx, cy, rx, ry, angle))
                break

    speck = _noise(base, 4, (h, w))
    jitter = _noise(base, 5, (h, w)) - 0.5
    for k, obj in enumerate(objects):
        mask = _object_mask(obj, yy, xx)
        color = np.array(_BASE[obj.class_id], dtype=np.float64)
        shade_k = rng.uniform(0.9, 1.05)
        fill = np.clip(color * shade_k + 12.0 * jitter[..., None], 0, 255)
        img[mask] = fill[mask]
        if obj.class_id == 1:
            # dark wedge: a sector of ~90 degrees from the centre
            theta = np.arctan2(yy - obj.cy, xx - obj.cx)
            start = rng.uniform(-np.pi, np.pi)
            rel = np.mod(theta - start, 2 * np.pi)
            wedge = mask & (rel < np.pi / 2)
            img[wedge] = _WEDGE
        elif obj.class_id == 2:
            spots = mask & (speck < 0.35)
            img[spots] = _SPECK
        ys, xs = np.nonzero(mask)
        obj.box = [float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)]

    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SyntheticScene(w, h, seed, index, objects, image)


# -- PPM -------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)


# -- dataset on disk ---------------------------------------------------------------


def generate_dataset(out_dir, n_images: int, seed: int = 42, size: int = 256, holdout: int = 0,
                     max_objects: int = 4) -> dict:
    """Write images/, tensors/, labels/ and manifest.json; the last ``holdout`` images form the test split."""
    if holdout < 0 or holdout >= n_images:
        raise ValueError(f"holdout must be in [0, n_images), got {holdout}")
    out = Path(out_dir)
    for sub in ("images", "tensors", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_images):
        scene = render_scene(seed, i, size, max_objects)
        stem = f"img_{i:05d}"
        write_ppm(out / "images" / f"{stem}.ppm", scene.image)
        chw = (scene.image.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1)
        cten.save(out / "tensors" / f"{stem}.cten", np.ascontiguousarray(chw))
        (out / "labels" / f"{stem}.txt").write_text(serialize_yolo_labels(scene.ground_truth(), size, size))
        records.append({
            "stem": stem,
            "index": i,
            "split": "test" if i >= n_images - holdout else "train",
            "objects": [asdict(o) for o in scene.objects],
        })
    manifest = {
        "format": "cottad-synthetic",
        "version": 1,
        "seed": seed,
        "image_size": [size, size],
        "num_classes": 4,
        "class_names": list(CLASS_NAMES),
        "num_images": n_images,
        "holdout": holdout,
        "images": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, H, W]
    labels: list[list[GroundTruth]]
    stems: list[str]
    image_size: tuple[int, int]

    def __len__(self) -> int:
        return len(self.stems)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.images[idx], [self.labels[i] for i in idx], [self.stems[i] for i in idx], self.image_size)


def load_dataset(data_dir, split: str | None = None, dtype=np.float64) -> Dataset:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    w, h = manifest["image_size"]
    recs = [r for r in manifest["images"] if split is None or r["split"] == split]
    images = np.stack([cten.load(data_dir / "tensors" / f"{r['stem']}.cten").astype(dtype) for r in recs]) if recs \
        else np.zeros((0, 3, h, w), dtype=dtype)
    labels = [parse_yolo_labels((data_dir / "labels" / f"{r['stem']}.txt").read_text(), w, h) for r in recs]
    return Dataset(images, labels, [r["stem"] for r in recs], (h, w))
