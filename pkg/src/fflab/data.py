"""Synthetic dot-annotated scenes and the on-disk dataset format.

Scenes follow a Thomas cluster process: parent locations drop uniformly,
each parent spawns a Poisson number of heads scattered with Gaussian
offsets. Head blobs grow in radius and brightness toward the bottom of
the frame as a stand-in for perspective. Images are single-channel
floats in [0, 1]; on disk they become 8-bit binary PGM files with a CSV
point list and a JSON manifest per dataset directory.
"""

import csv
import dataclasses
import json
import math
import os

import numpy as np

__all__ = [
    "DatasetError",
    "SceneConfig",
    "DotAnnotation",
    "generate_scene",
    "rasterize",
    "augment",
    "write_pgm",
    "read_pgm",
    "write_points",
    "read_points",
    "write_dataset",
    "read_dataset",
]

MANIFEST_VERSION = 1


class DatasetError(Exception):
    """Malformed or inconsistent on-disk dataset."""


@dataclasses.dataclass(frozen=True)
class SceneConfig:
    """Parameters of one synthetic scene.

    parent_rate is the expected number of cluster centers per scene;
    each spawns Poisson(offspring_mean) heads with N(0, offset_sigma)
    pixel offsets, clamped into the frame so the expected head count
    stays parent_rate * offspring_mean.
    """

    height: int = 256
    width: int = 256
    parent_rate: float = 4.0
    offspring_mean: float = 6.0
    offset_sigma: float = 12.0
    blob_radius: tuple[float, float] = (1.5, 4.0)
    blob_amplitude: tuple[float, float] = (0.25, 0.7)
    background: float = 0.3
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be at least 1x1")
        scalars = {
            "parent_rate": self.parent_rate,
            "offspring_mean": self.offspring_mean,
            "offset_sigma": self.offset_sigma,
            "background": self.background,
            "noise_std": self.noise_std,
        }
        for name, value in scalars.items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative")
        for name, pair in (("blob_radius", self.blob_radius),
                           ("blob_amplitude", self.blob_amplitude)):
            if len(pair) != 2:
                raise ValueError(f"{name} must be a (near, far) pair")
            if any(not math.isfinite(v) or v < 0 for v in pair):
                raise ValueError(f"{name} must be finite and non-negative")
        if self.blob_radius[0] <= 0 or self.blob_radius[1] <= 0:
            raise ValueError("blob_radius must be positive")
        object.__setattr__(self, "blob_radius", tuple(self.blob_radius))
        object.__setattr__(self, "blob_amplitude", tuple(self.blob_amplitude))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["blob_radius"] = list(self.blob_radius)
        d["blob_amplitude"] = list(self.blob_amplitude)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise DatasetError(f"unknown scene config fields: {sorted(extra)}")
        d = dict(d)
        for key in ("blob_radius", "blob_amplitude"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclasses.dataclass
class DotAnnotation:
    """Head positions in pixel coordinates, 0 <= x < width, 0 <= y < height."""

    points: list
    height: int
    width: int

    @property
    def count(self):
        return len(self.points)

    def as_array(self):
        """Points as a (count, 2) float array of (x, y) rows."""
        if not self.points:
            return np.zeros((0, 2))
        return np.asarray(self.points, dtype=np.float64)


def generate_scene(config):
    """Draw one scene. Returns (image, annotation); image is (h, w) in [0, 1]."""
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width

    n_parents = rng.poisson(config.parent_rate)
    parents = rng.uniform(0.0, [w, h], size=(n_parents, 2))
    points = []
    for px, py in parents:
        for _ in range(int(rng.poisson(config.offspring_mean))):
            x = px + rng.normal(0.0, config.offset_sigma)
            y = py + rng.normal(0.0, config.offset_sigma)
            points.append((float(np.clip(x, 0.0, w - 1e-6)),
                           float(np.clip(y, 0.0, h - 1e-6))))

    ramp = np.linspace(0.0, 1.0, h).reshape(-1, 1)
    image = 0.1 + config.background * ramp * np.ones((1, w))

    r0, r1 = config.blob_radius
    a0, a1 = config.blob_amplitude
    for x, y in points:
        t = y / h
        radius = r0 + (r1 - r0) * t
        amp = a0 + (a1 - a0) * t
        reach = int(math.ceil(4.0 * radius))
        row_lo = max(0, int(math.floor(y)) - reach)
        row_hi = min(h, int(math.floor(y)) + reach + 1)
        col_lo = max(0, int(math.floor(x)) - reach)
        col_hi = min(w, int(math.floor(x)) + reach + 1)
        rows = np.arange(row_lo, row_hi).reshape(-1, 1)
        cols = np.arange(col_lo, col_hi).reshape(1, -1)
        d2 = (cols - x) ** 2 + (rows - y) ** 2
        image[row_lo:row_hi, col_lo:col_hi] += amp * np.exp(-d2 / (2.0 * radius**2))

    if config.noise_std > 0:
        image += rng.normal(0.0, config.noise_std, size=(h, w))
    image = np.clip(image, 0.0, 1.0)
    return image, DotAnnotation(points, h, w)


def rasterize(annotation, stride=8, mode="additive"):
    """Ground-truth mass map: each point drops 1.0 into its stride-cell.

    The grid is ceil(h/stride) x ceil(w/stride) so every in-bounds point
    has a cell. "additive" sums colliding points (the map then conserves
    count exactly); "clamped" caps each cell at 1.0 for a strictly
    binary map at the price of losing collided mass.
    """
    if mode not in ("additive", "clamped"):
        raise ValueError(f"unknown rasterize mode {mode!r}")
    h, w = annotation.height, annotation.width
    grid = np.zeros((math.ceil(h / stride), math.ceil(w / stride)))
    for i, (x, y) in enumerate(annotation.points):
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"point {i} at ({x}, {y}) is outside {w}x{h}")
        grid[int(y // stride), int(x // stride)] += 1.0
    if mode == "clamped":
        grid = np.minimum(grid, 1.0)
    return grid


def augment(image, annotation, crop=256, flip_prob=0.5, rng=None):
    """Random crop to a square window plus optional horizontal flip.

    Points falling outside the window are dropped; surviving points are
    translated, and under a flip mapped x -> crop - 1 - x (clamped at 0
    for the sliver in the last half-pixel that would mirror negative).
    """
    if crop % 32 != 0:
        raise ValueError(f"crop size {crop} is not divisible by 32")
    h, w = image.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds image {w}x{h}")
    if rng is None:
        rng = np.random.default_rng()

    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    window = image[top:top + crop, left:left + crop]
    points = [(x - left, y - top) for x, y in annotation.points
              if left <= x < left + crop and top <= y < top + crop]

    if rng.random() < flip_prob:
        window = window[:, ::-1]
        points = [(max(0.0, crop - 1 - x), y) for x, y in points]

    return np.ascontiguousarray(window), DotAnnotation(points, crop, crop)


def write_pgm(path, image):
    """8-bit binary PGM; float input in [0, 1] quantizes to round(v*255)."""
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path):
    """Read a binary PGM back to floats in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] != b"P5":
        raise DatasetError(f"{path}: bad magic {raw[:2]!r} at byte 0, expected b'P5'")

    # Header tokens are whitespace-separated; '#' starts a comment line.
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated header at byte {start}")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval

    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DatasetError(f"{path}: non-numeric header fields {tokens}")
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    body = raw[pos:pos + h * w]
    if len(body) != h * w:
        raise DatasetError(f"{path}: expected {h * w} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_points(path, annotation):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y"])
        for x, y in annotation.points:
            writer.writerow([f"{x:.6f}", f"{y:.6f}"])


def read_points(path, height, width):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["x", "y"]:
            raise DatasetError(f"{path}: expected 'x,y' header, found {header}")
        points = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DatasetError(f"{path}: line {lineno} has {len(row)} fields")
            try:
                points.append((float(row[0]), float(row[1])))
            except ValueError:
                raise DatasetError(f"{path}: non-numeric point on line {lineno}")
    return DotAnnotation(points, height, width)


def write_dataset(directory, config, n_scenes):
    """Generate n scenes (seeds config.seed + index) and write the directory.

    Layout: scene_XXX.pgm + scene_XXX.csv per scene and a manifest.json
    tying them together. Returns the manifest dict.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be at least 1")
    os.makedirs(directory, exist_ok=True)
    scenes = []
    for i in range(n_scenes):
        scene_cfg = dataclasses.replace(config, seed=config.seed + i)
        image, annotation = generate_scene(scene_cfg)
        image_name = f"scene_{i:03d}.pgm"
        points_name = f"scene_{i:03d}.csv"
        write_pgm(os.path.join(directory, image_name), image)
        write_points(os.path.join(directory, points_name), annotation)
        scenes.append({
            "image": image_name,
            "points": points_name,
            "count": annotation.count,
            "seed": scene_cfg.seed,
        })
    manifest = {
        "version": MANIFEST_VERSION,
        "config": config.to_dict(),
        "scenes": scenes,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest


def read_dataset(directory):
    """Load a dataset directory. Returns (samples, config, manifest).

    samples is a list of (image, DotAnnotation). Counts recorded in the
    manifest are checked against the point files.
    """
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DatasetError(f"{manifest_path}: missing manifest")
    with open(manifest_path) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{manifest_path}: invalid JSON ({e})")
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{manifest_path}: unsupported version {manifest.get('version')}")
    config = SceneConfig.from_dict(manifest["config"])

    samples = []
    for entry in manifest["scenes"]:
        image_path = os.path.join(directory, entry["image"])
        points_path = os.path.join(directory, entry["points"])
        for p in (image_path, points_path):
            if not os.path.exists(p):
                raise DatasetError(f"{p}: listed in manifest but missing")
        image = read_pgm(image_path)
        annotation = read_points(points_path, *image.shape)
        if annotation.count != entry["count"]:
            raise DatasetError(
                f"{points_path}: manifest says {entry['count']} points, "
                f"file has {annotation.count}")
        samples.append((image, annotation))
    return samples, config, manifest
