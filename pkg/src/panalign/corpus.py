"""Synthetic misdetection corpus: procedural figures with known affine
perturbations, plus loading of convention-named image folders.

Each sample is a procedurally drawn figure (head disc, torso block, leg
blocks) whose colours and proportions are identity-specific, rendered
over a dark camera-specific background, then resampled with a random
scale/offset affine whose parameters are recorded as ground truth.
Scale < 1 zooms in (parts cut off at the borders); scale > 1 zooms out
(figure shrinks, zero padding appears).
"""

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, InvalidArgumentError
from .spatial import AffineParams, apply_affine_to_image

_NAME_RE = re.compile(r"^(\d+)_c(\d+)_(\d+)\.(png|jpg|jpeg)$", re.IGNORECASE)
SPLITS = ("train", "query", "gallery")


@dataclass
class CorpusSample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    identity: int
    camera: int
    split: str
    gt_perturb: AffineParams | None = None
    sample_id: int = -1
    path: str | None = None


@dataclass
class GenSpec:
    n_train_ids: int = 16
    n_test_ids: int = 16
    images_per_id: int = 40
    n_cameras: int = 3
    image_h: int = 64
    image_w: int = 32
    scale_range: tuple = (0.6, 1.5)
    offset_max: float = 0.25
    brightness_jitter: float = 0.08
    pixel_noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise InvalidArgumentError(f"bad scale range {self.scale_range}")
        if self.offset_max < 0:
            raise InvalidArgumentError(f"bad offset range {self.offset_max}")
        if self.n_cameras < 2:
            raise InvalidArgumentError("need >= 2 cameras for cross-camera evaluation")

    def to_dict(self):
        d = self.__dict__.copy()
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


# ---------------------------------------------------------------------------
# rendering


def _camera_background(camera, h, w, seed):
    rng = np.random.default_rng((seed, 2000 + camera))
    base = rng.uniform(0.02, 0.10, size=3)
    grad = np.linspace(0.0, rng.uniform(0.01, 0.05), h)[None, :, None]
    img = base[:, None, None] + grad
    # coarse blocky texture, fixed per camera
    blocks = rng.uniform(-0.02, 0.02, size=(3, h // 8 + 1, w // 8 + 1))
    img = img + np.repeat(np.repeat(blocks, 8, axis=1), 8, axis=2)[:, :h, :w]
    return np.clip(img, 0.0, 0.15)


def _identity_params(identity, seed):
    rng = np.random.default_rng((seed, 1000 + identity))
    return {
        "head_color": rng.uniform(0.35, 0.95, size=3),
        "torso_color": rng.uniform(0.25, 1.0, size=3),
        "leg_color": rng.uniform(0.25, 1.0, size=3),
        "head_r": rng.uniform(0.056, 0.088),  # fraction of H
        "torso_w": rng.uniform(0.34, 0.52),  # fraction of W
        "torso_bottom": rng.uniform(0.53, 0.61),  # fraction of H
        "leg_w": rng.uniform(0.10, 0.16),
        "leg_gap": rng.uniform(0.04, 0.10),
        "leg_bottom": rng.uniform(0.72, 0.80),
    }


def _soften(img):
    """Separable binomial [1,4,6,4,1]/16 blur (edge-replicated); keeps part
    boundaries band-limited enough that bilinear resampling round-trips
    cleanly."""
    kernel = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    for axis in (1, 2):
        pad = np.pad(img, [(0, 0) if a != axis else (2, 2) for a in range(3)],
                     mode="edge")
        img = sum(
            k * np.take(pad, range(i, i + img.shape[axis]), axis=axis)
            for i, k in enumerate(kernel)
        )
    return img


def render_identity(identity, camera, noise_seed, spec):
    """Deterministic canonical frame for (identity, camera, noise_seed)."""
    h, w = spec.image_h, spec.image_w
    img = _camera_background(camera, h, w, spec.seed).copy()
    p = _identity_params(identity, spec.seed)
    yy, xx = np.mgrid[0:h, 0:w]
    cx = w / 2.0

    # the figure sits inside a background margin on every side so that
    # moderate offsets translate it within the frame instead of cutting it
    head_cy = 0.28 * h
    head_r = p["head_r"] * h
    head = (yy - head_cy) ** 2 + (xx - cx) ** 2 <= head_r**2
    torso_top = head_cy + head_r
    torso = (
        (yy >= torso_top)
        & (yy < p["torso_bottom"] * h)
        & (np.abs(xx - cx) <= p["torso_w"] * w / 2)
    )
    leg_half = p["leg_gap"] * w / 2
    leg_w = p["leg_w"] * w
    legs = (
        (yy >= p["torso_bottom"] * h)
        & (yy < p["leg_bottom"] * h)
        & (np.abs(np.abs(xx - cx) - (leg_half + leg_w / 2)) <= leg_w / 2)
    )
    for mask, color in ((head, p["head_color"]), (torso, p["torso_color"]),
                        (legs, p["leg_color"])):
        img[:, mask] = color[:, None]
    img = _soften(img)

    rng = np.random.default_rng((spec.seed, 3000, noise_seed))
    img = img * (1.0 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter))
    img = img + rng.normal(0.0, spec.pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def perturb(image, scale, offset):
    """Resample with theta = [[sx, 0, tx], [0, sy, ty]]; records the theta."""
    sx, sy = scale
    tx, ty = offset
    if sx <= 0 or sy <= 0 or not np.isfinite([sx, sy, tx, ty]).all():
        raise InvalidArgumentError(f"invalid perturbation scale={scale} offset={offset}")
    theta = AffineParams(((sx, 0.0, tx), (0.0, sy, ty)))
    _, h, w = image.shape
    return apply_affine_to_image(image, theta, h, w), theta


# ---------------------------------------------------------------------------
# generation / loading


def _sample_perturbation(rng, spec):
    lo, hi = spec.scale_range
    scale = (rng.uniform(lo, hi), rng.uniform(lo, hi))
    offset = tuple(rng.uniform(-spec.offset_max, spec.offset_max, size=2))
    return scale, offset


def _make_sample(spec, identity, camera, index, split):
    rng = np.random.default_rng((spec.seed, identity, index))
    canonical = render_identity(identity, camera, identity * 100003 + index, spec)
    scale, offset = _sample_perturbation(rng, spec)
    image, theta = perturb(canonical, scale, offset)
    return CorpusSample(image, identity, camera, split, gt_perturb=theta)


def _iter_samples(spec):
    nq = max(1, spec.images_per_id // 8)
    for identity in range(spec.n_train_ids):
        for j in range(spec.images_per_id):
            cam = j % spec.n_cameras
            yield _make_sample(spec, identity, cam, j, "train")
    for t in range(spec.n_test_ids):
        identity = spec.n_train_ids + t
        for j in range(spec.images_per_id):
            cam = j % spec.n_cameras
            split = "query" if j < nq else "gallery"
            yield _make_sample(spec, identity, cam, j, split)


def generate(spec, out_dir=None):
    """Generate the corpus; writes images + manifest.jsonl when out_dir given.

    Per test identity there is at least one query and, with round-robin
    cameras, gallery images under other cameras.
    """
    samples = []
    counters = {}
    for s in _iter_samples(spec):
        seq = counters.get((s.identity, s.camera), 0)
        counters[(s.identity, s.camera)] = seq + 1
        s.sample_id = len(samples)
        s.path = f"{s.split}/{s.identity:04d}_c{s.camera}_{seq:06d}.png"
        samples.append(s)
    if out_dir is not None:
        out_dir = Path(out_dir)
        for split in SPLITS:
            (out_dir / split).mkdir(parents=True, exist_ok=True)
        for s in samples:
            save_image(out_dir / s.path, s.image)
        with open(out_dir / "manifest.jsonl", "w") as f:
            for s in samples:
                f.write(json.dumps({
                    "path": s.path,
                    "identity": s.identity,
                    "camera": s.camera,
                    "split": s.split,
                    "theta": list(np.asarray(s.gt_perturb.theta).ravel()),
                }) + "\n")
        with open(out_dir / "genspec.json", "w") as f:
            json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
    return samples


def save_image(path, image):
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path, format="PNG")


def load_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def parse_name(name):
    """"0002_c1_000451.png" -> (identity 2, camera 1)."""
    m = _NAME_RE.match(name)
    if m is None:
        raise DataError(f"unparseable image name: {name!r}")
    return int(m.group(1)), int(m.group(2))


def load(corpus_dir):
    """Load a corpus directory via its manifest, or by filename convention."""
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise DataError(f"corpus directory not found: {corpus_dir}")
    manifest = corpus_dir / "manifest.jsonl"
    samples = []
    if manifest.exists():
        errors = []
        with open(manifest) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    theta = rec.get("theta")
                    gt = None
                    if theta is not None:
                        gt = AffineParams(tuple(map(tuple, np.reshape(theta, (2, 3)))))
                    if rec["split"] not in SPLITS:
                        raise ValueError(f"bad split {rec['split']!r}")
                    samples.append(CorpusSample(
                        image=load_image(corpus_dir / rec["path"]),
                        identity=int(rec["identity"]),
                        camera=int(rec["camera"]),
                        split=rec["split"],
                        gt_perturb=gt,
                        sample_id=len(samples),
                        path=rec["path"],
                    ))
                except (KeyError, ValueError, OSError) as exc:
                    errors.append(f"line {lineno}: {exc}")
        if errors:
            raise DataError(f"{manifest}: " + "; ".join(errors))
        return samples
    # convention-named fallback
    errors = []
    for split in SPLITS:
        sub = corpus_dir / split
        if not sub.is_dir():
            continue
        for p in sorted(sub.iterdir()):
            if p.is_dir():
                continue
            try:
                ident, cam = parse_name(p.name)
            except DataError as exc:
                errors.append(str(exc))
                continue
            samples.append(CorpusSample(
                image=load_image(p),
                identity=ident,
                camera=cam,
                split=split,
                sample_id=len(samples),
                path=str(p.relative_to(corpus_dir)),
            ))
    if errors:
        raise DataError(f"{corpus_dir}: " + "; ".join(errors))
    if not samples:
        raise DataError(f"{corpus_dir}: no manifest.jsonl and no convention-named images")
    return samples


def split_samples(samples, split):
    return [s for s in samples if s.split == split]


def as_arrays(samples):
    """Stacked images plus dense labels; returns (images, labels, id_map)."""
    ids = sorted({s.identity for s in samples})
    id_map = {ident: i for i, ident in enumerate(ids)}
    images = np.stack([s.image for s in samples])
    labels = np.array([id_map[s.identity] for s in samples], dtype=np.int64)
    return images, labels, id_map
