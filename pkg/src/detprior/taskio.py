"""Task-specific signal codecs, dataset folder I/O, and a synthetic scene generator.

Pixel-space conventions: images are H x W x 3 float arrays in [-1, 1]. Depth is
stored on disk as 16-bit single-channel PNG of the per-image normalized value;
normals as 8-bit RGB under the (n+1)/2 map; segmentation targets as the palette
color map itself.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

TASKS = ("normal", "depth", "segmentation", "albedo", "shading")


@dataclass
class PairedSample:
    """One (input, target) training pair in encoded pixel space."""

    input: np.ndarray
    target: np.ndarray
    task: str
    id: str

    def validate(self) -> "PairedSample":
        for name, arr in (("input", self.input), ("target", self.target)):
            if arr.ndim != 3 or arr.shape[2] != 3:
                raise ValueError(f"{name} must be H x W x 3, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            if arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6:
                raise ValueError(f"{name} values outside [-1, 1]")
        if self.input.shape[:2] != self.target.shape[:2]:
            raise ValueError("input and target spatial dims differ")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        return self


@dataclass(frozen=True)
class SegPalette:
    """Ordered category list with pairwise-distinct RGB colors."""

    categories: tuple[tuple[int, str, tuple[int, int, int]], ...]
    min_margin: float = field(init=False)

    def __post_init__(self):
        cats = tuple(sorted(self.categories, key=lambda c: c[0]))
        object.__setattr__(self, "categories", cats)
        ids = [c[0] for c in cats]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate category ids in palette")
        colors = self.colors_pixel()
        d = np.linalg.norm(colors[:, None, :] - colors[None, :, :], axis=-1)
        d[np.diag_indices(len(cats))] = np.inf
        margin = float(d.min()) if len(cats) > 1 else np.inf
        if margin <= 0:
            raise ValueError("palette colors must be pairwise distinct")
        object.__setattr__(self, "min_margin", margin)

    @property
    def ids(self) -> list[int]:
        return [c[0] for c in self.categories]

    def name(self, cat_id: int) -> str:
        for cid, name, _ in self.categories:
            if cid == cat_id:
                return name
        raise KeyError(cat_id)

    def colors_pixel(self) -> np.ndarray:
        """Palette colors mapped to [-1, 1] pixel scale, ordered by id."""
        raw = np.array([c[2] for c in self.categories], dtype=np.float64)
        return raw / 127.5 - 1.0


def default_palette(num_categories: int, names: list[str] | None = None) -> SegPalette:
    """Greedy maximally-separated colors over a coarse RGB lattice.

    Deterministic: starts from black and repeatedly adds the lattice color
    farthest from all chosen ones, maximizing the nearest-color decode margin.
    """
    if num_categories < 1:
        raise ValueError("need at least one category")
    levels = np.array([0, 85, 170, 255], dtype=np.float64)
    grid = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), axis=-1).reshape(-1, 3)
    if num_categories > len(grid):
        raise ValueError(f"at most {len(grid)} categories supported")
    chosen = [grid[0]]
    while len(chosen) < num_categories:
        dists = np.min(
            np.linalg.norm(grid[:, None, :] - np.array(chosen)[None, :, :], axis=-1), axis=1
        )
        chosen.append(grid[int(np.argmax(dists))])
    cats = []
    for i, color in enumerate(chosen):
        name = names[i] if names else f"cat{i}"
        cats.append((i, name, tuple(int(v) for v in color)))
    return SegPalette(categories=tuple(cats))


def seg_encode(labels: np.ndarray, palette: SegPalette) -> np.ndarray:
    """Label map -> palette color map scaled to [-1, 1]."""
    labels = np.asarray(labels)
    lut_size = max(palette.ids) + 1
    lut = np.full((lut_size, 3), np.nan)
    for (cid, _, _), color in zip(palette.categories, palette.colors_pixel()):
        lut[cid] = color
    unknown = sorted(set(int(x) for x in np.unique(labels)) - set(palette.ids))
    if unknown:
        raise ValueError(f"label ids {unknown} not in palette")
    return lut[labels].astype(np.float32)


def seg_decode(colors: np.ndarray, palette: SegPalette) -> np.ndarray:
    """Color map -> label map by nearest palette color (L2 in RGB).

    Ties break toward the lowest category id.
    """
    colors = np.asarray(colors, dtype=np.float64)
    pal = palette.colors_pixel()  # ordered by ascending id, so argmin ties pick the lowest
    d2 = ((colors[..., None, :] - pal[None, None, :, :]) ** 2).sum(axis=-1)
    nearest = np.argmin(d2, axis=-1)
    return np.array(palette.ids, dtype=np.int64)[nearest]


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    """Per-map min-max normalization to [0, 1] (relative depth).

    A constant map has no relative structure; it normalizes to all zeros with
    a warning so degenerate pseudo-labels do not kill batch pipelines.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(depth)):
        raise ValueError("depth contains non-finite values")
    lo, hi = depth.min(), depth.max()
    if hi == lo:
        warnings.warn("constant depth map normalized to all zeros", stacklevel=2)
        return np.zeros_like(depth)
    return (depth - lo) / (hi - lo)


def encode_normals(normals: np.ndarray) -> np.ndarray:
    """Unit-vector map -> pixel array; components already live in [-1, 1]."""
    normals = np.asarray(normals)
    norms = np.linalg.norm(normals, axis=-1)
    if norms.min() < 0.99 or norms.max() > 1.01:
        raise ValueError(
            f"normals must be near unit length, got norms in [{norms.min():.4f}, {norms.max():.4f}]"
        )
    return np.clip(normals, -1.0, 1.0)


def decode_normals(pixels: np.ndarray) -> np.ndarray:
    """Pixel array -> unit-vector map (renormalized)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    norms = np.linalg.norm(pixels, axis=-1, keepdims=True)
    if norms.min() == 0.0:
        raise ValueError("cannot decode zero-vector normals")
    return pixels / norms


# ---------------------------------------------------------------------------
# dataset folder I/O
# ---------------------------------------------------------------------------

PALETTE_FILENAME = "palette.txt"


def save_palette(palette: SegPalette, path: str | Path) -> None:
    lines = [f"{cid} {name} {r} {g} {b}" for cid, name, (r, g, b) in palette.categories]
    Path(path).write_text("\n".join(lines) + "\n")


def load_palette(path: str | Path) -> SegPalette:
    cats = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cid, name, r, g, b = line.split()
        cats.append((int(cid), name, (int(r), int(g), int(b))))
    if not cats:
        raise ValueError(f"no palette entries in {path}")
    return SegPalette(categories=tuple(cats))


def _to_unit(img: Image.Image) -> np.ndarray:
    """8-bit RGB image -> float32 H x W x 3 in [-1, 1]."""
    arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 127.5 - 1.0


def _read_depth_png(path: Path) -> np.ndarray:
    """16-bit single-channel PNG -> float32 H x W in [0, 1]."""
    arr = np.asarray(Image.open(path)).astype(np.float32)
    return arr / 65535.0


def read_input_image(path: str | Path, size: int | None = None) -> np.ndarray:
    img = Image.open(path)
    if size is not None:
        img = img.resize((size, size), Image.BILINEAR)
    return _to_unit(img)


def read_target_image(path: str | Path, task: str, size: int | None = None) -> np.ndarray:
    path = Path(path)
    if task == "depth":
        depth = _read_depth_png(path)
        if size is not None:
            depth = np.asarray(
                Image.fromarray(depth).resize((size, size), Image.BILINEAR), dtype=np.float32
            )
        return np.repeat((depth * 2.0 - 1.0)[..., None], 3, axis=-1)
    img = Image.open(path)
    if size is not None:
        # nearest keeps segmentation colors exactly on the palette
        resample = Image.NEAREST if task == "segmentation" else Image.BILINEAR
        img = img.resize((size, size), resample)
    return _to_unit(img)


def write_input_image(arr: np.ndarray, path: str | Path) -> None:
    data = np.clip((np.asarray(arr) + 1.0) * 127.5, 0, 255)
    Image.fromarray(np.round(data).astype(np.uint8)).save(path)


def write_target_image(arr: np.ndarray, task: str, path: str | Path) -> None:
    arr = np.asarray(arr)
    if task == "depth":
        depth = np.clip((arr[..., 0] + 1.0) / 2.0, 0.0, 1.0)
        Image.fromarray(np.round(depth * 65535.0).astype(np.uint16)).save(path)
    else:
        write_input_image(arr, path)


def load_dataset(root: str | Path, task: str, size: int | None = None) -> list[PairedSample]:
    """Load matched input/ and target/ PNG pairs, sorted by filename."""
    root = Path(root)
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    input_dir, target_dir = root / "input", root / "target"
    if not input_dir.is_dir() or not target_dir.is_dir():
        raise FileNotFoundError(f"expected {input_dir} and {target_dir}")
    samples = []
    for in_path in sorted(input_dir.glob("*.png")):
        tgt_path = target_dir / in_path.name
        if not tgt_path.exists():
            raise FileNotFoundError(f"missing target for {in_path.name}: {tgt_path}")
        sample = PairedSample(
            input=read_input_image(in_path, size),
            target=read_target_image(tgt_path, task, size).astype(np.float32),
            task=task,
            id=in_path.stem,
        )
        samples.append(sample.validate())
    return samples


def save_dataset(samples: list[PairedSample], root: str | Path, palette: SegPalette | None = None) -> None:
    root = Path(root)
    (root / "input").mkdir(parents=True, exist_ok=True)
    (root / "target").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_input_image(s.input, root / "input" / f"{s.id}.png")
        write_target_image(s.target, s.task, root / "target" / f"{s.id}.png")
    if palette is not None:
        save_palette(palette, root / PALETTE_FILENAME)


# ---------------------------------------------------------------------------
# synthetic sphere scenes with analytic ground truth
# ---------------------------------------------------------------------------

MAX_SPHERES = 4
SYNTH_SEG_IDS = ("floor", "sphere1", "sphere2", "sphere3", "sphere4")


def synth_palette() -> SegPalette:
    return default_palette(1 + MAX_SPHERES, names=list(SYNTH_SEG_IDS))


@dataclass(frozen=True)
class Sphere:
    cx: float
    cy: float
    cz: float
    radius: float
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneParams:
    """Geometry and lighting of one synthetic scene.

    An orthographic camera looks along -z; the image plane spans [-1, 1]^2
    with v increasing upward. Spheres always sit in front of the slanted
    backdrop plane z = plane_z0 + plane_slope * v.
    """

    size: int
    plane_z0: float
    plane_slope: float
    plane_color: tuple[float, float, float]
    spheres: tuple[Sphere, ...]
    light: tuple[float, float, float]
    ambient: float
    diffuse: float


def pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates; row 0 is the top of the image (v = +1 side)."""
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    u = np.broadcast_to(coords[None, :], (size, size))
    v = np.broadcast_to(-coords[:, None], (size, size))
    return u, v


def sample_scene_params(seed: int, size: int) -> SceneParams:
    if size < 16:
        raise ValueError(f"scene size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    plane_z0 = rng.uniform(-3.0, -2.0)
    plane_slope = rng.uniform(0.2, 0.8)
    plane_color = tuple(rng.uniform(0.2, 0.95, 3))
    n_spheres = int(rng.integers(1, MAX_SPHERES + 1))
    centers = (np.arange(size) + 0.5) / size * 2.0 - 1.0  # snap to pixel centers
    usable = centers[np.abs(centers) <= 0.6]
    spheres = []
    for _ in range(n_spheres):
        cx = float(rng.choice(usable))
        cy = float(rng.choice(usable))
        cz = float(rng.uniform(-0.6, 0.0))
        radius = float(rng.uniform(0.15, 0.45))
        color = tuple(rng.uniform(0.2, 0.95, 3))
        spheres.append(Sphere(cx, cy, cz, radius, color))
    light = rng.uniform(-1.0, 1.0, 3)
    light[2] = rng.uniform(0.5, 1.5)
    light = light / np.linalg.norm(light)
    ambient = float(rng.uniform(0.15, 0.3))
    diffuse = float((1.0 - ambient) * rng.uniform(0.7, 1.0))
    return SceneParams(
        size=size,
        plane_z0=plane_z0,
        plane_slope=plane_slope,
        plane_color=plane_color,
        spheres=tuple(spheres),
        light=tuple(light),
        ambient=ambient,
        diffuse=diffuse,
    )


@dataclass
class SceneRender:
    normals: np.ndarray  # H x W x 3 unit vectors
    depth: np.ndarray  # H x W, distance from the z=1 camera plane, > 0
    labels: np.ndarray  # H x W int, 0 = floor, 1.. = sphere index + 1
    albedo: np.ndarray  # H x W x 3 in [0, 1]
    shading: np.ndarray  # H x W in [0, 1]
    image: np.ndarray  # H x W x 3 in [0, 1], albedo * shading


def render_scene(params: SceneParams) -> SceneRender:
    size = params.size
    u, v = pixel_grid(size)

    # backdrop plane z = z0 + slope * v, unit normal proportional to (0, -slope, 1)
    z_hit = params.plane_z0 + params.plane_slope * v
    plane_n = np.array([0.0, -params.plane_slope, 1.0])
    plane_n = plane_n / np.linalg.norm(plane_n)
    normals = np.broadcast_to(plane_n, (size, size, 3)).copy()
    labels = np.zeros((size, size), dtype=np.int64)
    albedo = np.broadcast_to(np.asarray(params.plane_color), (size, size, 3)).copy()

    for i, s in enumerate(params.spheres):
        d2 = (u - s.cx) ** 2 + (v - s.cy) ** 2
        hit = d2 <= s.radius**2
        nz = np.sqrt(np.maximum(s.radius**2 - d2, 0.0))
        z_sphere = s.cz + nz
        front = hit & (z_sphere > z_hit)
        z_hit = np.where(front, z_sphere, z_hit)
        labels[front] = i + 1
        n_sphere = np.stack([(u - s.cx) / s.radius, (v - s.cy) / s.radius, nz / s.radius], axis=-1)
        normals[front] = n_sphere[front]
        albedo[front] = s.color

    light = np.asarray(params.light)
    lambert = np.maximum(normals @ light, 0.0)
    shading = params.ambient + params.diffuse * lambert
    image = albedo * shading[..., None]
    depth = 1.0 - z_hit
    return SceneRender(
        normals=normals,
        depth=depth,
        labels=labels,
        albedo=albedo,
        shading=shading,
        image=image,
    )


def synth_scene(seed: int, size: int, task: str) -> PairedSample:
    """Deterministic synthetic pair: shaded rendering in, analytic target out."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    params = sample_scene_params(seed, size)
    render = render_scene(params)
    input_px = (render.image * 2.0 - 1.0).astype(np.float32)
    if task == "normal":
        target = encode_normals(render.normals).astype(np.float32)
    elif task == "depth":
        d = normalize_depth(render.depth)
        target = np.repeat((d * 2.0 - 1.0)[..., None], 3, axis=-1).astype(np.float32)
    elif task == "segmentation":
        target = seg_encode(render.labels, synth_palette())
    elif task == "albedo":
        target = (render.albedo * 2.0 - 1.0).astype(np.float32)
    else:  # shading
        target = np.repeat((render.shading * 2.0 - 1.0)[..., None], 3, axis=-1).astype(np.float32)
    sample = PairedSample(input=input_px, target=target, task=task, id=f"{seed:08d}")
    return sample.validate()
