"""Procedural scenes and the three fog domains.

Clear-weather (CW) scenes are composed from a sky gradient, a ground plane and
textured objects drawn in painter's order. Synthetic fog (SF) applies the
homogeneous transmittance model to a CW scene; the real-fog proxy (RF) uses a
spatially varying attenuation field, an airlight tint and sensor noise.

Dataset layout under the root directory::

    <split>/<domain>/<pair_id>_<index>.ppm          image, binary PPM
    <split>/<domain>/<pair_id>_<index>.labels.pgm   class ids, binary PGM
    <split>/<domain>/<pair_id>_<index>.depth.fgten  depth in metres
    manifest.csv
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image
from scipy import ndimage

from fifo_desk.config import RunConfig
from fifo_desk.errors import ConfigError, DatasetIOError, LabelAccessError
from fifo_desk.fifo_types import Domain, DomainSample, FogParams, Scene, Split
from fifo_desk.seeding import derive_seed
from fifo_desk.tensorcore.tensorio import load_tensor, save_tensor

logger = logging.getLogger(__name__)

SKY_CLASS = 0
GROUND_CLASS = 1
SKY_DEPTH = 1000.0
HORIZON_DEPTH = 300.0
NEAR_DEPTH = 5.0
COLOR_JITTER = 0.08
TEXTURE_SIGMA = 0.03
NOISE_OCTAVES = 3

# (shape kind, base color) for object classes 2, 3, ...
SHAPE_SLOTS: tuple[tuple[str, tuple[float, float, float]], ...] = (
    ("rectangle", (0.55, 0.20, 0.18)),
    ("ellipse", (0.15, 0.45, 0.20)),
    ("triangle", (0.80, 0.70, 0.15)),
    ("rectangle", (0.25, 0.30, 0.60)),
    ("ellipse", (0.70, 0.35, 0.60)),
    ("triangle", (0.20, 0.60, 0.65)),
    ("rectangle", (0.85, 0.50, 0.20)),
    ("ellipse", (0.45, 0.25, 0.10)),
    ("triangle", (0.60, 0.60, 0.62)),
    ("rectangle", (0.10, 0.10, 0.12)),
)

MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ("path", "split", "domain", "pair_id", "index", "seed", "beta", "airlight")

Image8 = NDArray[np.uint8]
Array = NDArray[np.float64]


def _ground_depth(rows: NDArray[np.int64], horizon: int, height: int) -> Array:
    """Depth of ground-plane rows, interpolated linearly in inverse depth."""
    s = (rows - horizon) / max(height - 1 - horizon, 1)
    inverse = (1.0 - s) / HORIZON_DEPTH + s / NEAR_DEPTH
    return np.asarray(1.0 / inverse, dtype=np.float64)


def _shape_mask(
    kind: str, yy: NDArray[np.int64], xx: NDArray[np.int64], bottom: int, cx: int, h: int, w: int
) -> NDArray[np.bool_]:
    top = bottom - h + 1
    rows = (yy >= top) & (yy <= bottom)
    if kind == "rectangle":
        return rows & (np.abs(xx - cx) <= w / 2)
    if kind == "ellipse":
        cy = bottom - (h - 1) / 2
        return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    # triangle with apex on top
    return rows & (np.abs(xx - cx) <= (yy - top + 1) / h * (w / 2))


def generate_scene(seed: int, height: int, width: int, num_classes: int) -> Scene:
    """Compose a labeled clear-weather scene.

    Args:
        seed: Generator seed; equal seeds give bit-identical scenes
        height: Image height, at least 16
        width: Image width, at least 16
        num_classes: Number of classes in [4, 12]; 0 is sky, 1 is ground

    Returns:
        Scene with image, labels and depth

    Raises:
        ConfigError: If the size is too small or there are more object classes
            than shape slots
    """
    if height < 16 or width < 16:
        msg = f"scene size must be at least 16x16, got {height}x{width}"
        raise ConfigError(msg)
    if not 4 <= num_classes <= 2 + len(SHAPE_SLOTS):
        msg = f"num_classes must lie in [4, {2 + len(SHAPE_SLOTS)}], got {num_classes}"
        raise ConfigError(msg)

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    image = np.zeros((height, width, 3), dtype=np.float64)
    labels = np.zeros((height, width), dtype=np.uint8)
    depth = np.full((height, width), SKY_DEPTH, dtype=np.float64)

    horizon = int(height * rng.uniform(0.35, 0.55))

    sky_top = np.array([0.30, 0.50, 0.85]) + rng.uniform(-0.05, 0.05, 3)
    sky_low = np.array([0.70, 0.80, 0.92]) + rng.uniform(-0.05, 0.05, 3)
    s = (yy[:horizon, :, None] / max(horizon - 1, 1)).astype(np.float64)
    image[:horizon] = sky_top * (1 - s) + sky_low * s

    ground_rows = np.arange(horizon, height)
    depth[horizon:] = _ground_depth(ground_rows, horizon, height)[:, None]
    labels[horizon:] = GROUND_CLASS
    ground_color = np.array([0.36, 0.33, 0.29]) + rng.uniform(-0.05, 0.05, 3)
    texture = rng.normal(0.0, TEXTURE_SIGMA, (height - horizon, width))
    image[horizon:] = ground_color + texture[..., None]

    objects = []
    for _ in range(int(rng.integers(3, 8))):
        cls = int(rng.integers(2, num_classes))
        bottom = int(rng.integers(horizon + 1, height))
        obj_depth = float(_ground_depth(np.array([bottom]), horizon, height)[0])
        scale = np.sqrt(NEAR_DEPTH / obj_depth)
        h = max(3, round(height * rng.uniform(0.2, 0.5) * scale))
        w = max(3, round(width * rng.uniform(0.1, 0.35) * scale))
        cx = int(rng.integers(0, width))
        jitter = rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3)
        noise = rng.normal(0.0, TEXTURE_SIGMA, (height, width))
        objects.append((obj_depth, cls, bottom, cx, h, w, jitter, noise))

    # Painter's order: far objects first, nearer ones occlude them.
    for obj_depth, cls, bottom, cx, h, w, jitter, noise in sorted(
        objects, key=lambda o: -o[0]
    ):
        kind, base = SHAPE_SLOTS[cls - 2]
        mask = _shape_mask(kind, yy, xx, bottom, cx, h, w)
        color = np.asarray(base) + jitter
        image[mask] = color + noise[mask][:, None]
        labels[mask] = cls
        depth[mask] = obj_depth

    return Scene(image=np.clip(image, 0.0, 1.0), labels=labels, depth=depth, seed=seed)


def _transmit(image: Array, depth: Array, beta: Array | float, airlight: Array) -> Array:
    """Optical fog model: I = R * t + A * (1 - t), t = exp(-beta * d)."""
    t = np.exp(-np.asarray(beta) * depth)[..., None]
    return np.asarray(np.clip(image * t + airlight * (1.0 - t), 0.0, 1.0), dtype=np.float64)


def apply_homogeneous_fog(scene: Scene, params: FogParams) -> Array:
    """Render a scene under fog of constant density.

    Labels and depth are not touched; the returned array is the foggy image.
    """
    return _transmit(scene.image, scene.depth, params.beta, np.asarray(params.airlight))


def smooth_noise(rng: np.random.Generator, height: int, width: int) -> Array:
    """Multi-octave smooth noise normalized to [0, 1]."""
    total = np.zeros((height, width), dtype=np.float64)
    for octave in range(NOISE_OCTAVES):
        cells = 4 * 2**octave
        coarse = rng.standard_normal((cells, cells))
        fine = ndimage.zoom(coarse, (height / cells, width / cells), order=3, mode="reflect")
        total += fine[:height, :width] * 0.5**octave
    span = total.max() - total.min()
    if span == 0:
        return np.zeros_like(total)
    return (total - total.min()) / span


def apply_heterogeneous_fog(
    scene: Scene,
    base_params: FogParams,
    seed: int,
    beta_range: tuple[float, float] = (0.5, 2.0),
    airlight_jitter: float = 0.1,
    noise_sigma: float = 0.01,
) -> Array:
    """Render a scene under spatially varying fog (real-fog proxy).

    Args:
        scene: Clear-weather scene
        base_params: Base attenuation coefficient and airlight
        seed: Seed of the fog field, tint and sensor noise
        beta_range: Attenuation field range as multiples of the base beta
        airlight_jitter: Maximum per-channel airlight tint offset
        noise_sigma: Standard deviation of additive sensor noise

    Returns:
        Foggy image; equal to apply_homogeneous_fog when beta_range is
        degenerate at 1 and both jitter and noise are 0
    """
    height, width = scene.depth.shape
    rng = np.random.default_rng(seed)
    low, high = beta_range
    beta_field = base_params.beta * (low + (high - low) * smooth_noise(rng, height, width))
    tint = rng.uniform(-1.0, 1.0, 3) * airlight_jitter
    airlight = np.clip(np.asarray(base_params.airlight) + tint, 0.0, 1.0)
    foggy = _transmit(scene.image, scene.depth, beta_field, airlight)
    noise = rng.standard_normal(foggy.shape) * noise_sigma
    return np.asarray(np.clip(foggy + noise, 0.0, 1.0), dtype=np.float64)


# Image IO


def to_uint8(image: Array) -> Image8:
    return np.asarray(np.round(np.clip(image, 0.0, 1.0) * 255.0), dtype=np.uint8)


def write_image(path: Path, image: Array) -> None:
    """Write an (H, W, 3) image in [0, 1] as binary 8-bit PPM."""
    try:
        Image.fromarray(to_uint8(image)).save(path, format="PPM")
    except OSError as e:
        msg = f"cannot write image {path}: {e}"
        raise DatasetIOError(msg) from e


def write_label_map(path: Path, labels: Image8) -> None:
    """Write (H, W) class ids as binary 8-bit PGM."""
    try:
        Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path, format="PPM")
    except OSError as e:
        msg = f"cannot write label map {path}: {e}"
        raise DatasetIOError(msg) from e


def read_image(path: Path) -> Image8:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        msg = f"cannot read image {path}: {e}"
        raise DatasetIOError(msg) from e


def read_label_map(path: Path) -> Image8:
    try:
        with Image.open(path) as img:
            return np.asarray(img, dtype=np.uint8)
    except OSError as e:
        msg = f"cannot read label map {path}: {e}"
        raise DatasetIOError(msg) from e


# Dataset construction


@dataclass(frozen=True)
class SampleSpec:
    """Everything needed to render one sample independently of the others."""

    split: Split
    domain: Domain
    pair_id: int
    index: int
    scene_seed: int
    fog_seed: int
    beta: float

    @property
    def stem(self) -> str:
        return f"{self.split.value}/{self.domain.value}/{self.pair_id:06d}_{self.index:06d}"


def plan_dataset(config: RunConfig) -> list[SampleSpec]:
    """List every sample of the dataset with its derived seeds.

    pair_id is a global sequential scene index; an SF sample shares the
    pair_id and scene seed of its CW counterpart.
    """
    counts = {
        "train_cw": config.train_cw,
        "train_rf": config.train_rf,
        "eval_cw": config.eval_cw,
        "eval_rf": config.eval_rf,
    }
    for name, count in counts.items():
        if count < 1:
            msg = f"{name} must be at least 1, got {count}"
            raise ConfigError(msg)

    specs: list[SampleSpec] = []
    pair_id = 0
    for split, n_cw, n_rf in (
        (Split.TRAIN, config.train_cw, config.train_rf),
        (Split.EVAL, config.eval_cw, config.eval_rf),
    ):
        for i in range(n_cw):
            seed = derive_seed(config.master_seed, f"scene/{split.value}/CW", i)
            specs.append(SampleSpec(split, Domain.CW, pair_id, i, seed, 0, 0.0))
            if split is Split.TRAIN:
                specs.append(SampleSpec(split, Domain.SF, pair_id, i, seed, 0, config.beta))
            pair_id += 1
        for i in range(n_rf):
            seed = derive_seed(config.master_seed, f"scene/{split.value}/RF", i)
            fog_seed = derive_seed(config.master_seed, f"fog/{split.value}/RF", i)
            specs.append(SampleSpec(split, Domain.RF, pair_id, i, seed, fog_seed, config.beta))
            pair_id += 1
    return specs


def render_sample(spec: SampleSpec, config: RunConfig) -> DomainSample:
    """Render one planned sample in its fog domain."""
    size = config.image_size
    scene = generate_scene(spec.scene_seed, size, size, config.num_classes)
    fog = FogParams(beta=spec.beta, airlight=config.fog_params().airlight)
    if spec.domain is Domain.SF:
        scene = Scene(apply_homogeneous_fog(scene, fog), scene.labels, scene.depth, scene.seed)
    elif spec.domain is Domain.RF:
        image = apply_heterogeneous_fog(
            scene,
            fog,
            spec.fog_seed,
            beta_range=(config.rf_beta_range[0], config.rf_beta_range[1]),
            airlight_jitter=config.rf_airlight_jitter,
            noise_sigma=config.rf_noise_sigma,
        )
        scene = Scene(image, scene.labels, scene.depth, scene.seed)
    return DomainSample(
        scene=scene,
        domain=spec.domain,
        pair_id=spec.pair_id,
        labels_visible=not (spec.split is Split.TRAIN and spec.domain is Domain.RF),
        index=spec.index,
        split=spec.split,
        beta=spec.beta,
    )


def _write_sample(root: Path, spec: SampleSpec, config: RunConfig) -> None:
    sample = render_sample(spec, config)
    base = root / spec.stem
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        msg = f"cannot create dataset directory {base.parent}: {e}"
        raise DatasetIOError(msg) from e
    write_image(base.with_name(base.name + ".ppm"), sample.scene.image)
    write_label_map(base.with_name(base.name + ".labels.pgm"), sample.scene.labels)
    save_tensor(base.with_name(base.name + ".depth.fgten"), sample.scene.depth)


def build_dataset(config: RunConfig, root: Path | None = None) -> Path:
    """Generate the full dataset on disk.

    Every sample depends only on (master seed, its own index), so the worker
    count has no effect on the bytes written.

    Args:
        config: Run configuration (counts, size, fog parameters, seed)
        root: Destination; defaults to config.dataset_root

    Returns:
        The dataset root

    Raises:
        ConfigError: If a required split count is below 1
        DatasetIOError: If the destination is not writable
    """
    root = Path(root or config.dataset_root)
    specs = plan_dataset(config)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        msg = f"cannot create dataset root {root}: {e}"
        raise DatasetIOError(msg) from e

    logger.info("Generating %d samples under %s", len(specs), root)
    if config.gen_workers > 1:
        with ThreadPoolExecutor(max_workers=config.gen_workers) as pool:
            list(pool.map(lambda s: _write_sample(root, s, config), specs))
    else:
        for spec in specs:
            _write_sample(root, spec, config)

    airlight = ";".join(repr(a) for a in config.airlight)
    try:
        with open(root / MANIFEST_NAME, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(MANIFEST_COLUMNS)
            for spec in specs:
                seed = spec.fog_seed if spec.domain is Domain.RF else spec.scene_seed
                writer.writerow(
                    [
                        spec.stem + ".ppm",
                        spec.split.value,
                        spec.domain.value,
                        spec.pair_id,
                        spec.index,
                        seed,
                        repr(spec.beta),
                        airlight,
                    ]
                )
    except OSError as e:
        msg = f"cannot write manifest in {root}: {e}"
        raise DatasetIOError(msg) from e

    census = {(s.split, s.domain): 0 for s in specs}
    for s in specs:
        census[(s.split, s.domain)] += 1
    for (split, domain), count in sorted(census.items()):
        logger.info("  %s/%s: %d samples", split.value, domain.value, count)
    return root


# Dataset reading


@dataclass(frozen=True)
class ManifestRow:
    path: str
    split: Split
    domain: Domain
    pair_id: int
    index: int
    seed: int
    beta: float
    airlight: tuple[float, float, float]


class FogDataset:
    """Read access to a generated dataset.

    Images are cached as uint8 after the first read. Label maps of training
    RF samples are never read: asking for them raises LabelAccessError.
    """

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self.rows = self._read_manifest()
        self._images: dict[str, Image8] = {}
        self._depths: dict[str, Array] = {}

    def _read_manifest(self) -> list[ManifestRow]:
        path = self.root / MANIFEST_NAME
        try:
            with open(path, newline="") as f:
                reader = csv.DictReader(f)
                rows = []
                for r in reader:
                    a = tuple(float(v) for v in r["airlight"].split(";"))
                    rows.append(
                        ManifestRow(
                            path=r["path"],
                            split=Split(r["split"]),
                            domain=Domain(r["domain"]),
                            pair_id=int(r["pair_id"]),
                            index=int(r["index"]),
                            seed=int(r["seed"]),
                            beta=float(r["beta"]),
                            airlight=(a[0], a[1], a[2]),
                        )
                    )
        except OSError as e:
            msg = f"cannot read dataset manifest {path}: {e}"
            raise DatasetIOError(msg) from e
        except (KeyError, ValueError, IndexError) as e:
            msg = f"malformed dataset manifest {path}: {e}"
            raise DatasetIOError(msg) from e
        return rows

    def select(self, split: Split, domain: Domain) -> list[ManifestRow]:
        """Rows of one split and domain, ordered by index."""
        return sorted(
            (r for r in self.rows if r.split is split and r.domain is domain),
            key=lambda r: r.index,
        )

    def __iter__(self) -> Iterator[ManifestRow]:
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def sf_beta(self) -> float | None:
        """Attenuation coefficient of the training SF samples, if any."""
        rows = self.select(Split.TRAIN, Domain.SF)
        return rows[0].beta if rows else None

    def image(self, row: ManifestRow) -> Array:
        """(H, W, 3) float image in [0, 1]."""
        if row.path not in self._images:
            self._images[row.path] = read_image(self.root / row.path)
        return self._images[row.path].astype(np.float64) / 255.0

    def depth(self, row: ManifestRow) -> Array:
        if row.path not in self._depths:
            self._depths[row.path] = load_tensor(self.root / _sibling(row.path, ".depth.fgten"))
        return self._depths[row.path]

    def labels(self, row: ManifestRow, training: bool) -> Image8:
        """Class-id map of a sample.

        Raises:
            LabelAccessError: For an RF sample requested in a training context
        """
        if training and row.domain is Domain.RF:
            msg = f"labels of RF sample {row.path} are not visible during training"
            raise LabelAccessError(msg)
        return read_label_map(self.root / _sibling(row.path, ".labels.pgm"))

    def scene(self, row: ManifestRow) -> Scene:
        """Load an evaluation sample as a Scene (labels included)."""
        return Scene(self.image(row), self.labels(row, training=False), self.depth(row), row.seed)


def _sibling(image_path: str, suffix: str) -> str:
    return image_path.removesuffix(".ppm") + suffix
