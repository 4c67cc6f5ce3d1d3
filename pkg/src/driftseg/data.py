"""Synthetic labeled scenes, photometric domain transforms, streams.

Scenes are flat-colored shapes (rectangle / ellipse / stripe, one per
non-background class) over a background, with pixel-accurate labels and
light texture noise; the color-class correlation is what makes the task
learnable. A domain transform recolors the image only:

    y = clip01(contrast * (x - 0.5) + 0.5) * gain + tint + N(0, noise^2)

then clips to [0, 1] again. Labels never change. Streams concatenate
(domain, segment length) schedule entries; images and ground truth live on
separate channels so the adaptation path never sees labels or domains.
"""

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .tensor_io import load_tensor, save_tensor

DATASET_FORMAT_VERSION = 1

# per-scene global brightness spread (std of a clipped normal); the bell shape
# keeps most scenes near nominal brightness while still spreading single-domain
# feature clouds enough that domain gaps stay informative rather than trivial
SCENE_GAIN_JITTER = 0.05
# per-scene, per-class color wobble; widens within-domain statistics in
# directions orthogonal to the brightness axis the domains live on
CLASS_COLOR_JITTER = 0.10

PALETTE = (
    (0.36, 0.44, 0.32),  # background, muted green
    (0.82, 0.22, 0.20),
    (0.20, 0.38, 0.82),
    (0.88, 0.82, 0.30),
    (0.58, 0.26, 0.68),
    (0.20, 0.72, 0.64),
    (0.90, 0.52, 0.18),
    (0.46, 0.30, 0.16),
    (0.76, 0.76, 0.78),
    (0.14, 0.16, 0.20),
)


@dataclass(frozen=True)
class DomainSpec:
    name: str
    brightness_gain: float = 1.0
    contrast: float = 1.0
    noise_std: float = 0.0
    tint: tuple[float, float, float] = (0.0, 0.0, 0.0)


# tuned so conv-statistics separate the domains clearly but not degenerately:
# gains sit outside the day gain-jitter spread on both sides, contrasts and
# tints add weaker second axes
DEFAULT_DOMAINS = (
    DomainSpec("day", brightness_gain=1.0, contrast=1.0, noise_std=0.01),
    DomainSpec("night", brightness_gain=0.74, contrast=0.93, noise_std=0.02,
               tint=(-0.01, -0.01, 0.02)),
    DomainSpec("rain", brightness_gain=1.33, contrast=0.85, noise_std=0.02,
               tint=(0.01, 0.02, 0.03)),
)

DOMAIN_PRESETS = {spec.name: spec for spec in DEFAULT_DOMAINS}


@dataclass
class LabeledSample:
    image: np.ndarray    # (3, h, w) float32 in [0, 1]
    label: np.ndarray    # (h, w) uint8
    true_domain: int     # -1 for the canonical (source) domain
    sample_id: int
    scene_seed: int


def generate_scene(seed: int, height: int = 64, width: int = 64,
                   num_classes: int = 5,
                   gain_jitter: float = SCENE_GAIN_JITTER) -> LabeledSample:
    """One canonical-domain scene with pixel-accurate labels."""
    if height < 32 or width < 32:
        raise ConfigError(f"scene must be at least 32x32, got {height}x{width}")
    if not 2 <= num_classes <= len(PALETTE):
        raise ConfigError(f"num_classes must be in [2, {len(PALETTE)}], got {num_classes}")
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-CLASS_COLOR_JITTER, CLASS_COLOR_JITTER,
                         size=(num_classes, 3))
    label = np.zeros((height, width), dtype=np.uint8)
    image = np.empty((3, height, width), dtype=np.float64)
    bg = np.asarray(PALETTE[0]) + jitter[0]
    image[:] = bg[:, None, None]
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    for cls in range(1, num_classes):
        kind = int(rng.integers(3))
        cy = rng.uniform(0.2, 0.8) * height
        cx = rng.uniform(0.2, 0.8) * width
        if kind == 0:  # rectangle
            hh = rng.uniform(0.14, 0.26) * height
            hw = rng.uniform(0.14, 0.26) * width
            mask = (np.abs(ys - cy) <= hh) & (np.abs(xs - cx) <= hw)
        elif kind == 1:  # ellipse
            a = rng.uniform(0.15, 0.27) * height
            b = rng.uniform(0.15, 0.27) * width
            mask = ((ys - cy) / a) ** 2 + ((xs - cx) / b) ** 2 <= 1.0
        else:  # stripe through (cy, cx)
            theta = rng.uniform(0, np.pi)
            thick = rng.uniform(0.09, 0.15) * min(height, width)
            dist = np.abs((xs - cx) * np.sin(theta) - (ys - cy) * np.cos(theta))
            mask = dist <= thick
        color = np.asarray(PALETTE[cls]) + jitter[cls]
        label[mask] = cls
        image[:, mask] = color[:, None]
    gain = 1.0 + gain_jitter * float(rng.standard_normal())
    image *= float(np.clip(gain, 1.0 - 2.0 * gain_jitter, 1.0 + 2.0 * gain_jitter))
    image += rng.normal(0.0, 0.02, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return LabeledSample(image, label, -1, -1, seed)


def apply_domain(sample: LabeledSample, spec: DomainSpec, seed: int,
                 domain_index: int) -> LabeledSample:
    """Photometric transform; labels pass through untouched."""
    rng = np.random.default_rng(seed)
    x = sample.image.astype(np.float64)
    y = np.clip(spec.contrast * (x - 0.5) + 0.5, 0.0, 1.0)
    y = y * spec.brightness_gain + np.asarray(spec.tint)[:, None, None]
    if spec.noise_std > 0:
        y += rng.normal(0.0, spec.noise_std, size=y.shape)
    y = np.clip(y, 0.0, 1.0).astype(np.float32)
    return LabeledSample(y, sample.label.copy(), domain_index,
                         sample.sample_id, sample.scene_seed)


# ---------------- streams ----------------

@dataclass
class StreamMeta:
    """Ground truth side channel; the adaptation path must not read this."""

    labels: list[np.ndarray]
    domains: np.ndarray            # (n,) int64
    scene_seeds: np.ndarray        # (n,) int64
    schedule: tuple[tuple[int, int], ...]
    domain_names: tuple[str, ...]


@dataclass
class Stream:
    images: list[np.ndarray]
    meta: StreamMeta

    def __len__(self) -> int:
        return len(self.images)


def default_schedule(cycles: int = 8, segment_length: int = 12,
                     num_domains: int = 3,
                     warmup: int = 1) -> tuple[tuple[int, int], ...]:
    """Cyclic (domain, length) schedule: each cycle visits every domain once.

    Cycles run from the strongest shift back down to the source-like domain
    (highest index first), so a run opens under the heaviest drift it will
    ever see instead of warming up on source-like data.

    A nonzero warmup prepends a short tour of all domains; online clustering
    seeds its centroids from the first K stream samples, and the tour hands it
    one sample of each domain instead of K cuts of whichever domain runs first.
    """
    order = tuple(reversed(range(num_domains)))
    lap = tuple((d, warmup) for d in order) if warmup else ()
    return lap + tuple((d, segment_length) for _ in range(cycles) for d in order)


def build_stream(specs, schedule, seed: int, height: int = 64, width: int = 64,
                 num_classes: int = 5) -> Stream:
    """Fresh scenes per position, each pushed through its segment's domain."""
    specs = tuple(specs)
    schedule = tuple((int(d), int(ln)) for d, ln in schedule)
    for d, ln in schedule:
        if not 0 <= d < len(specs):
            raise ConfigError(f"schedule references domain {d}, have {len(specs)}")
        if ln < 1:
            raise ConfigError(f"segment length must be >= 1, got {ln}")
    rng = np.random.default_rng(seed)
    images, labels, domains, scene_seeds = [], [], [], []
    sample_id = 0
    for d, ln in schedule:
        for _ in range(ln):
            scene_seed = int(rng.integers(0, 2 ** 63 - 1))
            noise_seed = int(rng.integers(0, 2 ** 63 - 1))
            scene = generate_scene(scene_seed, height, width, num_classes)
            scene.sample_id = sample_id
            shifted = apply_domain(scene, specs[d], noise_seed, d)
            images.append(shifted.image)
            labels.append(shifted.label)
            domains.append(d)
            scene_seeds.append(scene_seed)
            sample_id += 1
    meta = StreamMeta(labels, np.asarray(domains, dtype=np.int64),
                      np.asarray(scene_seeds, dtype=np.int64), schedule,
                      tuple(s.name for s in specs))
    return Stream(images, meta)


def build_domain_split(specs, per_domain: int, seed: int, height: int = 64,
                       width: int = 64, num_classes: int = 5) -> list[LabeledSample]:
    """Held-out labeled samples, domain-major order."""
    if per_domain < 1:
        raise ConfigError(f"per_domain must be >= 1, got {per_domain}")
    rng = np.random.default_rng(seed)
    out = []
    for d, spec in enumerate(tuple(specs)):
        for i in range(per_domain):
            scene_seed = int(rng.integers(0, 2 ** 63 - 1))
            noise_seed = int(rng.integers(0, 2 ** 63 - 1))
            scene = generate_scene(scene_seed, height, width, num_classes)
            scene.sample_id = d * per_domain + i
            out.append(apply_domain(scene, spec, noise_seed, d))
    return out


def build_source_split(count: int, seed: int, height: int = 64, width: int = 64,
                       num_classes: int = 5) -> list[LabeledSample]:
    """Canonical-domain labeled samples for pretraining."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        scene_seed = int(rng.integers(0, 2 ** 63 - 1))
        scene = generate_scene(scene_seed, height, width, num_classes)
        scene.sample_id = i
        out.append(scene)
    return out


# ---------------- dataset directories ----------------

@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 5
    domains: tuple[DomainSpec, ...] = DEFAULT_DOMAINS
    schedule: tuple[tuple[int, int], ...] = field(default_factory=default_schedule)
    source_train: int = 400
    source_val: int = 48
    eval_per_domain: int = 20
    seed: int = 0


@dataclass
class Dataset:
    config: DataConfig
    source_train: list[LabeledSample]
    source_val: list[LabeledSample]
    stream: Stream
    eval_split: list[LabeledSample]


def generate_dataset(cfg: DataConfig) -> Dataset:
    """Deterministic full dataset from one seed; sub-splits get derived seeds."""
    root = np.random.default_rng(cfg.seed)
    seeds = [int(root.integers(0, 2 ** 63 - 1)) for _ in range(4)]
    return Dataset(
        cfg,
        build_source_split(cfg.source_train, seeds[0], cfg.height, cfg.width, cfg.num_classes),
        build_source_split(cfg.source_val, seeds[1], cfg.height, cfg.width, cfg.num_classes),
        build_stream(cfg.domains, cfg.schedule, seeds[2], cfg.height, cfg.width,
                     cfg.num_classes),
        build_domain_split(cfg.domains, cfg.eval_per_domain, seeds[3], cfg.height,
                           cfg.width, cfg.num_classes),
    )


def _write_split(root: Path, name: str, images, labels) -> None:
    split = root / name
    split.mkdir(parents=True)
    for i, (img, lab) in enumerate(zip(images, labels)):
        save_tensor(split / f"{i:06d}.image.cdt", img)
        (split / f"{i:06d}.label.u8").write_bytes(np.ascontiguousarray(lab, dtype=np.uint8).tobytes())


def _read_split(root: Path, name: str, count: int, height: int, width: int):
    split = root / name
    images, labels = [], []
    for i in range(count):
        ipath = split / f"{i:06d}.image.cdt"
        lpath = split / f"{i:06d}.label.u8"
        if not ipath.exists() or not lpath.exists():
            raise DataError(f"dataset split {name} is missing sample {i}")
        images.append(load_tensor(ipath))
        raw = lpath.read_bytes()
        if len(raw) != height * width:
            raise FormatError(f"label block {lpath} has {len(raw)} bytes, "
                              f"expected {height * width}")
        labels.append(np.frombuffer(raw, dtype=np.uint8).reshape(height, width).copy())
    return images, labels


def save_dataset(path, ds: Dataset, force: bool = False) -> None:
    root = Path(path)
    if root.exists():
        if not force:
            raise DataError(f"output path {root} exists; pass force to overwrite")
        shutil.rmtree(root)
    root.mkdir(parents=True)
    cfg = ds.config
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "height": cfg.height,
        "width": cfg.width,
        "num_classes": cfg.num_classes,
        "seed": cfg.seed,
        "domains": [{"name": s.name, "brightness_gain": s.brightness_gain,
                     "contrast": s.contrast, "noise_std": s.noise_std,
                     "tint": list(s.tint)} for s in cfg.domains],
        "schedule": [list(e) for e in ds.stream.meta.schedule],
        "splits": {
            "source_train": {"count": len(ds.source_train),
                             "scene_seeds": [s.scene_seed for s in ds.source_train]},
            "source_val": {"count": len(ds.source_val),
                           "scene_seeds": [s.scene_seed for s in ds.source_val]},
            "stream": {"count": len(ds.stream),
                       "true_domains": [int(d) for d in ds.stream.meta.domains],
                       "scene_seeds": [int(s) for s in ds.stream.meta.scene_seeds]},
            "eval": {"count": len(ds.eval_split),
                     "true_domains": [s.true_domain for s in ds.eval_split],
                     "scene_seeds": [s.scene_seed for s in ds.eval_split]},
        },
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    _write_split(root, "source_train", [s.image for s in ds.source_train],
                 [s.label for s in ds.source_train])
    _write_split(root, "source_val", [s.image for s in ds.source_val],
                 [s.label for s in ds.source_val])
    _write_split(root, "stream", ds.stream.images, ds.stream.meta.labels)
    _write_split(root, "eval", [s.image for s in ds.eval_split],
                 [s.label for s in ds.eval_split])


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"{root} has no manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format {manifest.get('format_version')}")
    h, w = int(manifest["height"]), int(manifest["width"])
    num_classes = int(manifest["num_classes"])
    domains = tuple(DomainSpec(d["name"], d["brightness_gain"], d["contrast"],
                               d["noise_std"], tuple(d["tint"]))
                    for d in manifest["domains"])
    schedule = tuple((int(a), int(b)) for a, b in manifest["schedule"])
    cfg = DataConfig(h, w, num_classes, domains, schedule,
                     manifest["splits"]["source_train"]["count"],
                     manifest["splits"]["source_val"]["count"],
                     0, int(manifest["seed"]))
    splits = manifest["splits"]

    def read_samples(name, true_domains, seeds):
        images, labels = _read_split(root, name, splits[name]["count"], h, w)
        out = []
        for i, (img, lab) in enumerate(zip(images, labels)):
            if lab.max(initial=0) >= num_classes:
                raise DataError(f"label in split {name} outside [0, {num_classes})")
            out.append(LabeledSample(img, lab, true_domains[i], i, seeds[i]))
        return out

    n_eval = splits["eval"]["count"]
    eval_split = read_samples("eval", splits["eval"]["true_domains"],
                              splits["eval"]["scene_seeds"])
    per_domain = n_eval // len(domains) if domains else 0
    cfg.eval_per_domain = per_domain
    source_train = read_samples("source_train", [-1] * splits["source_train"]["count"],
                                splits["source_train"]["scene_seeds"])
    source_val = read_samples("source_val", [-1] * splits["source_val"]["count"],
                              splits["source_val"]["scene_seeds"])
    s_images, s_labels = _read_split(root, "stream", splits["stream"]["count"], h, w)
    s_domains = np.asarray(splits["stream"]["true_domains"], dtype=np.int64)
    if s_domains.size and (s_domains.min() < 0 or s_domains.max() >= len(domains)):
        raise DataError("stream true_domains outside the declared domain set")
    meta = StreamMeta(s_labels, s_domains,
                      np.asarray(splits["stream"]["scene_seeds"], dtype=np.int64),
                      schedule, tuple(s.name for s in domains))
    return Dataset(cfg, source_train, source_val, Stream(s_images, meta), eval_split)
