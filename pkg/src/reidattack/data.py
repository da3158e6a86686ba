"""Re-ID datasets: samples, bundles, directory I/O, junk filtering and a
deterministic synthetic generator.

Images are float64 arrays of shape ``(3, H, W)`` with values in ``[0, 1]``.
On disk the Market-1501 layout is used::

    root/bounding_box_train/0001_c1_00.png
    root/query/...
    root/bounding_box_test/...
"""
import enum
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._rng import philox
from .exceptions import ConfigError, DatasetError

SPLITS = ("train", "query", "gallery")
SPLIT_DIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
DEFAULT_JUNK_IDS = frozenset({-1, 0})
MIN_IMAGE_SHAPE = (16, 8)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class NamingScheme(enum.Enum):
    """Filename conventions; each value is the regex capturing (person_id, camera_id)."""

    MARKET1501 = r"^(-?\d+)_c(\d+)"
    DUKEMTMC = r"^(-?\d+)_c(\d+)_"

    def parse(self, name):
        match = re.match(self.value, name)
        if match is None:
            raise DatasetError(f"cannot parse person/camera id from filename {name!r} "
                               f"with scheme {self.name}")
        return int(match.group(1)), int(match.group(2))


def _frozen(image):
    arr = np.array(image, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PersonSample:
    sample_id: str
    person_id: int
    camera_id: int
    split: str
    image: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r} for sample {self.sample_id}")
        object.__setattr__(self, "image", _frozen(self.image))

    def __eq__(self, other):
        if not isinstance(other, PersonSample):
            return NotImplemented
        return (self.sample_id == other.sample_id
                and self.person_id == other.person_id
                and self.camera_id == other.camera_id
                and self.split == other.split
                and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    """Train/query/gallery samples sharing one image shape."""

    train: tuple
    query: tuple
    gallery: tuple
    image_shape: tuple
    num_train_ids: int

    def __post_init__(self):
        for name in SPLITS:
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))

    def split(self, name):
        return getattr(self, name)

    def images(self, name):
        """Stacked ``(n, 3, H, W)`` array of one split."""
        samples = self.split(name)
        if not samples:
            return np.zeros((0, 3) + self.image_shape)
        return np.stack([s.image for s in samples])

    def person_ids(self, name):
        return np.array([s.person_id for s in self.split(name)], dtype=np.int64)

    def camera_ids(self, name):
        return np.array([s.camera_id for s in self.split(name)], dtype=np.int64)

    def sample_ids(self, name):
        return [s.sample_id for s in self.split(name)]

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (self.image_shape == other.image_shape
                and self.num_train_ids == other.num_train_ids
                and all(getattr(self, n) == getattr(other, n) for n in SPLITS))

    __hash__ = None


@dataclass(frozen=True)
class SyntheticSpec:
    num_train_ids: int = 8
    num_test_ids: int = 16
    images_per_id: int = 8
    num_cameras: int = 2
    image_shape: tuple = (64, 32)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        for name in ("num_train_ids", "num_test_ids", "images_per_id", "num_cameras"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"SyntheticSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.num_cameras < 2:
            raise ConfigError(f"SyntheticSpec.num_cameras must be >= 2, got {self.num_cameras}")
        if len(self.image_shape) != 2:
            raise ConfigError(f"image_shape must be (height, width), got {self.image_shape}")


@dataclass(frozen=True)
class Violation:
    invariant: str
    sample_ids: tuple
    detail: str = ""

    def __str__(self):
        ids = ", ".join(self.sample_ids[:5]) + (" ..." if len(self.sample_ids) > 5 else "")
        return f"[{self.invariant}] {self.detail} ({ids})"


def filter_junk(samples, junk_ids=DEFAULT_JUNK_IDS):
    """Drop samples whose person_id is a junk label, preserving order."""
    junk = frozenset(int(j) for j in junk_ids)
    return [s for s in samples if s.person_id not in junk]


def validate_bundle(bundle):
    """List every violated bundle invariant; an empty list means the bundle is valid."""
    violations = []
    for name in SPLITS:
        for s in bundle.split(name):
            if s.split != name:
                violations.append(Violation("split_label", (s.sample_id,),
                                            f"sample stored in {name} but labelled {s.split}"))
            if s.image.shape != (3,) + bundle.image_shape:
                violations.append(Violation("image_shape", (s.sample_id,),
                                            f"expected {(3,) + bundle.image_shape}, got {s.image.shape}"))
            elif not np.all(np.isfinite(s.image)) or s.image.min() < 0 or s.image.max() > 1:
                violations.append(Violation("pixel_range", (s.sample_id,),
                                            "pixel values outside [0, 1]"))

    all_ids = [s.sample_id for n in SPLITS for s in bundle.split(n)]
    seen, dupes = set(), []
    for sid in all_ids:
        if sid in seen:
            dupes.append(sid)
        seen.add(sid)
    if dupes:
        violations.append(Violation("unique_sample_id", tuple(dupes), "duplicate sample ids"))

    train_ids = {s.person_id for s in bundle.train}
    test_ids = {s.person_id for s in bundle.query} | {s.person_id for s in bundle.gallery}
    for pid in sorted(train_ids & test_ids):
        offenders = tuple(s.sample_id for n in SPLITS for s in bundle.split(n) if s.person_id == pid)
        violations.append(Violation("train_test_disjoint", offenders,
                                    f"person_id {pid} appears in train and test splits"))

    gallery_cams = {}
    for s in bundle.gallery:
        gallery_cams.setdefault(s.person_id, set()).add(s.camera_id)
    for q in bundle.query:
        if not gallery_cams.get(q.person_id, set()) - {q.camera_id}:
            violations.append(Violation("cross_camera_match", (q.sample_id,),
                                        f"query person_id {q.person_id} has no gallery match "
                                        f"from another camera"))

    if bundle.num_train_ids != len(train_ids):
        violations.append(Violation("num_train_ids", (),
                                    f"num_train_ids={bundle.num_train_ids} but train split has "
                                    f"{len(train_ids)} distinct ids"))
    return violations


def _check(bundle):
    violations = validate_bundle(bundle)
    if violations:
        raise DatasetError("invalid dataset bundle:\n  " + "\n  ".join(map(str, violations)))
    return bundle


def _read_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def load_directory_dataset(root, scheme=NamingScheme.MARKET1501, junk_ids=DEFAULT_JUNK_IDS):
    """Read a Market-1501-style directory tree into a validated bundle."""
    root = Path(root)
    if isinstance(scheme, str):
        scheme = NamingScheme[scheme.upper()]
    splits = {}
    for name, dirname in SPLIT_DIRS.items():
        directory = root / dirname
        if not directory.is_dir():
            raise DatasetError(f"missing split directory: {directory}")
        samples = []
        for path in sorted(directory.iterdir(), key=lambda p: p.name):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            person_id, camera_id = scheme.parse(path.name)
            samples.append(PersonSample(path.stem, person_id, camera_id, name, _read_image(path)))
        splits[name] = sorted(filter_junk(samples, junk_ids), key=lambda s: s.sample_id)

    shapes = {s.image.shape[1:] for n in SPLITS for s in splits[n]}
    if len(shapes) > 1:
        raise DatasetError(f"images of differing shapes under {root}: {sorted(shapes)}")
    image_shape = shapes.pop() if shapes else (0, 0)
    bundle = DatasetBundle(train=splits["train"], query=splits["query"], gallery=splits["gallery"],
                           image_shape=image_shape,
                           num_train_ids=len({s.person_id for s in splits["train"]}))
    return _check(bundle)


def to_uint8(image):
    """Quantize a [0,1] image to uint8 HWC with round-half-even."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_png(image, path):
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def export_directory_dataset(bundle, root):
    """Write ``bundle`` in the on-disk layout read by :func:`load_directory_dataset`.

    Filenames are ``{sample_id}.png``; lossless only when pixels are multiples
    of 1/255, which the synthetic generator guarantees.
    """
    root = Path(root)
    for name, dirname in SPLIT_DIRS.items():
        directory = root / dirname
        directory.mkdir(parents=True, exist_ok=True)
        for s in bundle.split(name):
            save_png(s.image, directory / f"{s.sample_id}.png")
    return root


# --- synthetic generator -------------------------------------------------


def _identity_signature(rng):
    return {
        "skin": rng.uniform(0.45, 0.85) * np.array([1.0, 0.8, 0.65]),
        "hair": rng.uniform(0.0, 0.35, size=3),
        "torso": rng.uniform(0.05, 0.95, size=3),
        "legs": rng.uniform(0.05, 0.95, size=3),
        "stripe": rng.uniform(0.0, 1.0, size=3),
        "n_stripes": int(rng.integers(0, 4)),
        "width": rng.uniform(0.55, 0.85),
        "bag": bool(rng.integers(0, 2)),
        "bag_color": rng.uniform(0.0, 1.0, size=3),
    }


def _camera_params(rng):
    return {
        "brightness": rng.uniform(-0.08, 0.08),
        "contrast": rng.uniform(0.85, 1.15),
        "shift": (int(rng.integers(-2, 3)), int(rng.integers(-1, 2))),
        "background": rng.uniform(0.4, 0.6) + rng.uniform(-0.04, 0.04, size=3),
    }


def _fill(canvas, top, bottom, left, right, color):
    h, w = canvas.shape[1:]
    top, bottom = max(int(round(top)), 0), min(int(round(bottom)), h)
    left, right = max(int(round(left)), 0), min(int(round(right)), w)
    if top < bottom and left < right:
        canvas[:, top:bottom, left:right] = np.asarray(color)[:, None, None]


def _render(sig, cam, shape, rng):
    h, w = shape
    canvas = np.broadcast_to(cam["background"][:, None, None], (3, h, w)).copy()
    dy = cam["shift"][0] + int(rng.integers(-1, 2))
    dx = cam["shift"][1] + int(rng.integers(-1, 2))
    cx = w / 2 + dx
    body = sig["width"] * w
    _fill(canvas, 0.02 * h + dy, 0.07 * h + dy, cx - 0.17 * w, cx + 0.17 * w, sig["hair"])
    _fill(canvas, 0.07 * h + dy, 0.2 * h + dy, cx - 0.15 * w, cx + 0.15 * w, sig["skin"])
    torso_top, torso_bottom = 0.2 * h + dy, 0.56 * h + dy
    _fill(canvas, torso_top, torso_bottom, cx - body / 2, cx + body / 2, sig["torso"])
    if sig["n_stripes"]:
        pitch = (torso_bottom - torso_top) / (2 * sig["n_stripes"] + 1)
        for k in range(sig["n_stripes"]):
            top = torso_top + (2 * k + 1) * pitch
            _fill(canvas, top, top + pitch, cx - body / 2, cx + body / 2, sig["stripe"])
    leg = 0.4 * body
    _fill(canvas, 0.56 * h + dy, 0.96 * h + dy, cx - body / 2, cx - body / 2 + leg, sig["legs"])
    _fill(canvas, 0.56 * h + dy, 0.96 * h + dy, cx + body / 2 - leg, cx + body / 2, sig["legs"])
    if sig["bag"]:
        _fill(canvas, 0.35 * h + dy, 0.55 * h + dy, cx + body / 2, cx + body / 2 + 0.12 * w,
              sig["bag_color"])
    image = (canvas - 0.5) * cam["contrast"] + 0.5 + cam["brightness"]
    image = image + rng.normal(0.0, 0.015, size=image.shape)
    # quantized to the 8-bit grid so PNG export is lossless
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def _split_test_identity(images):
    """Pick at most one query per camera such that each query keeps a cross-camera gallery match."""
    query, remaining = [], list(images)
    cameras = sorted({cam for cam, _ in images})
    for cam in cameras:
        candidates = [item for item in remaining if item[0] == cam]
        if not candidates:
            continue
        pick = candidates[0]
        rest = [item for item in remaining if item is not pick]
        if any(c != cam for c, _ in rest):
            query.append(pick)
            remaining = rest
    return query, remaining


def generate_synthetic(spec):
    """Deterministic desk-scale Re-ID dataset; a pure function of ``spec``."""
    h, w = spec.image_shape
    if h < MIN_IMAGE_SHAPE[0] or w < MIN_IMAGE_SHAPE[1]:
        raise ConfigError(f"image_shape {spec.image_shape} too small to render identity "
                          f"signatures; minimum is {MIN_IMAGE_SHAPE}")
    cameras = {c: _camera_params(philox(spec.seed, "camera", c))
               for c in range(1, spec.num_cameras + 1)}

    def shots(pid):
        sig = _identity_signature(philox(spec.seed, "identity", pid))
        out = []
        for serial in range(spec.images_per_id):
            cam = serial % spec.num_cameras + 1
            image = _render(sig, cameras[cam], spec.image_shape,
                            philox(spec.seed, "image", pid, serial))
            out.append((cam, (f"{pid:04d}_c{cam}_{serial:02d}", pid, image)))
        return out

    train, query, gallery = [], [], []
    for pid in range(1, spec.num_train_ids + 1):
        train += [PersonSample(sid, p, cam, "train", img) for cam, (sid, p, img) in shots(pid)]
    first_test = spec.num_train_ids + 1
    for pid in range(first_test, first_test + spec.num_test_ids):
        q, g = _split_test_identity(shots(pid))
        query += [PersonSample(sid, p, cam, "query", img) for cam, (sid, p, img) in q]
        gallery += [PersonSample(sid, p, cam, "gallery", img) for cam, (sid, p, img) in g]

    bundle = DatasetBundle(train=train, query=query, gallery=gallery,
                           image_shape=spec.image_shape, num_train_ids=spec.num_train_ids)
    return _check(bundle)


def bundle_fingerprint(bundle):
    """sha256 over ids, labels and pixel bytes of every split."""
    h = hashlib.sha256()
    h.update(repr((bundle.image_shape, bundle.num_train_ids)).encode())
    for name in SPLITS:
        for s in bundle.split(name):
            h.update(f"{name}|{s.sample_id}|{s.person_id}|{s.camera_id}".encode())
            h.update(np.ascontiguousarray(s.image).tobytes())
    return h.hexdigest()
