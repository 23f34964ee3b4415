"""Self-contained synthetic benchmark with a controlled attention trap.

Every scene has a fixed foreground object (concentric-ring disk, identical
across images) over a background of mixed sinusoidal waves whose phases,
amplitudes and color offsets are redrawn per image.  The background is
therefore the high-variance ("variable") region while the object is
invariant; defects are injected strictly inside the object, so a detector
that attends to background variation is looking at exactly the wrong
place.

Generation is a pure function of the seed: images are rendered from
per-index child seeds recorded in the manifest, so any split can be
reproduced byte for byte.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetContractError, ImageParseError, ParameterError
from .ppm import from_unit_float, read_netpbm, to_unit_float, write_pgm, write_ppm
from .rng import Rng, derive
from .tensor import Tensor

_WAVES = ((1.0, 2.0), (2.0, -1.0), (3.0, 1.0))  # cycles across the image


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    object_radius: float = 0.32      # fraction of image size
    ring_period: float = 6.0         # pixels per intensity ring
    background_level: float = 0.5
    background_amplitude: float = 0.13  # per-wave amplitude bound
    channel_jitter: float = 0.04
    variance_factor: float = 10.0

    def __post_init__(self):
        if not 0.1 <= self.object_radius <= 0.45:
            raise ParameterError(f"object_radius {self.object_radius} outside [0.1, 0.45]")
        if self.image_size < 32:
            raise ParameterError(f"image_size {self.image_size} too small")

    def object_mask(self) -> np.ndarray:
        s = self.image_size
        c = (s - 1) / 2.0
        yy, xx = np.mgrid[0:s, 0:s]
        r = self.object_radius * s
        return (yy - c) ** 2 + (xx - c) ** 2 <= r * r

    def variable_mask(self) -> np.ndarray:
        """High-variance region: exactly the background."""
        return ~self.object_mask()


@dataclass(frozen=True)
class DefectSpec:
    kinds: tuple[str, ...] = ("patch", "scratch", "hole")
    size_min: int = 3
    size_max: int = 7
    margin: int = 2  # pixels kept clear of the object boundary

    def __post_init__(self):
        for k in self.kinds:
            if k not in ("patch", "scratch", "hole"):
                raise ParameterError(f"unknown defect kind '{k}'")
        if not self.kinds:
            raise ParameterError("at least one defect kind required")
        if not 1 <= self.size_min <= self.size_max:
            raise ParameterError("defect size range must satisfy 1 <= min <= max")


def _object_pattern(spec: SceneSpec) -> np.ndarray:
    """Deterministic [3,S,S] ring texture (identical in every image)."""
    s = spec.image_size
    c = (s - 1) / 2.0
    yy, xx = np.mgrid[0:s, 0:s]
    dist = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
    base = 0.55 + 0.20 * np.cos(2.0 * np.pi * dist / spec.ring_period)
    return np.stack([base, base * 0.85 + 0.08, base * 0.7 + 0.18])


def render_normal(spec: SceneSpec, rng: Rng) -> np.ndarray:
    """One nominal [3,S,S] image in [0,1]."""
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s]
    u, v = xx / s, yy / s
    bg = np.full((s, s), spec.background_level)
    for fx, fy in _WAVES:
        amp = rng.uniform(0.4, 1.0) * spec.background_amplitude
        phase = rng.uniform(0.0, 2.0 * np.pi)
        bg = bg + amp * np.sin(2.0 * np.pi * (fx * u + fy * v) + phase)
    img = np.empty((3, s, s))
    for ch in range(3):
        img[ch] = bg + rng.uniform(-spec.channel_jitter, spec.channel_jitter)
    mask = spec.object_mask()
    pattern = _object_pattern(spec)
    img[:, mask] = pattern[:, mask]
    return np.clip(img, 0.0, 1.0)


def _defect_budget(spec: SceneSpec, defect: DefectSpec) -> float:
    """Largest center-to-extent radius a defect may need, in pixels."""
    return max(defect.size_max * np.sqrt(2.0) / 2.0,  # patch diagonal
               defect.size_max,                        # scratch half-length
               defect.size_max / 2.0) + 1.0


def inject_defect(image: np.ndarray, spec: SceneSpec, defect: DefectSpec,
                  rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Place one defect inside the invariant region; returns (image, mask)."""
    s = spec.image_size
    c = (s - 1) / 2.0
    obj_r = spec.object_radius * s
    reach = _defect_budget(spec, defect)
    allowed = obj_r - defect.margin - reach
    if allowed <= 0:
        raise ParameterError(
            f"defect extent {reach:.1f}px + margin {defect.margin} exceeds object "
            f"radius {obj_r:.1f}px; shrink size_max or grow object_radius")
    kind = defect.kinds[rng.randint(len(defect.kinds))]
    # uniform position within the allowed disk via rejection
    while True:
        dy = rng.uniform(-allowed, allowed)
        dx = rng.uniform(-allowed, allowed)
        if dy * dy + dx * dx <= allowed * allowed:
            break
    cy, cx = c + dy, c + dx
    out = image.copy()
    yy, xx = np.mgrid[0:s, 0:s]
    if kind == "patch":
        side = defect.size_min + rng.randint(defect.size_max - defect.size_min + 1)
        y0, x0 = int(round(cy - side / 2.0)), int(round(cx - side / 2.0))
        msk = np.zeros((s, s), dtype=bool)
        msk[y0:y0 + side, x0:x0 + side] = True
        out[:, msk] = 1.0 - out[:, msk]  # contrast-invert the ring texture
    elif kind == "scratch":
        length = defect.size_max + rng.randint(defect.size_max + 1)
        theta = rng.uniform(0.0, np.pi)
        ux, uy = np.cos(theta), np.sin(theta)
        # distance from each pixel to the centered segment
        py, px = yy - cy, xx - cx
        t = np.clip(px * ux + py * uy, -length / 2.0, length / 2.0)
        d2 = (px - t * ux) ** 2 + (py - t * uy) ** 2
        msk = d2 <= 0.8 ** 2
        out[:, msk] = 0.08
    else:  # hole
        radius = (defect.size_min + rng.randint(defect.size_max - defect.size_min + 1)) / 2.0
        msk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
        out[:, msk] = 0.06
    if not msk.any():
        raise ParameterError(f"defect '{kind}' produced an empty region")
    if msk.any() and not msk[spec.object_mask()].sum() == msk.sum():
        raise ParameterError("defect leaked outside the invariant region")
    return np.clip(out, 0.0, 1.0), msk


@dataclass
class ManifestEntry:
    split: str          # "train" | "test"
    path: str           # relative to the dataset root
    label: str          # "normal" | "anomalous"
    mask_path: str      # relative path or "-"
    subseed: int


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def lines(self) -> str:
        out = ["split,path,label,mask_path_or_dash,subseed"]
        for e in self.entries:
            out.append(f"{e.split},{e.path},{e.label},{e.mask_path},{e.subseed}")
        return "\n".join(out) + "\n"

    @staticmethod
    def parse(text: str) -> "Manifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "split,path,label,mask_path_or_dash,subseed":
            raise DatasetContractError("manifest header mismatch")
        entries = []
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != 5:
                raise DatasetContractError(f"manifest line has {len(parts)} fields: {ln!r}")
            entries.append(ManifestEntry(split=parts[0], path=parts[1], label=parts[2],
                                         mask_path=parts[3], subseed=int(parts[4])))
        return Manifest(entries)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def generate_dataset(root: str, seed: int, spec: SceneSpec, defect: DefectSpec,
                     n_train: int, n_test_normal: int, n_test_anom: int) -> Manifest:
    """Render all splits under ``root`` and write manifest + checksums."""
    if n_train < 1:
        raise ParameterError("n_train must be >= 1")
    manifest = Manifest()
    train_stack = []
    for d in ("train", "test", "masks"):
        os.makedirs(os.path.join(root, d), exist_ok=True)

    for i in range(n_train):
        sub = derive(seed, 0, i)
        img = render_normal(spec, Rng(sub))
        rel = f"train/{i:04d}.ppm"
        write_ppm(os.path.join(root, rel), from_unit_float(img))
        manifest.entries.append(ManifestEntry("train", rel, "normal", "-", sub))
        train_stack.append(img)

    for i in range(n_test_normal):
        sub = derive(seed, 1, i)
        img = render_normal(spec, Rng(sub))
        rel = f"test/normal_{i:04d}.ppm"
        write_ppm(os.path.join(root, rel), from_unit_float(img))
        manifest.entries.append(ManifestEntry("test", rel, "normal", "-", sub))

    for i in range(n_test_anom):
        sub = derive(seed, 2, i)
        rng = Rng(sub)
        base = render_normal(spec, rng)
        img, msk = inject_defect(base, spec, defect, rng)
        rel = f"test/anom_{i:04d}.ppm"
        mask_rel = f"masks/anom_{i:04d}.pgm"
        write_ppm(os.path.join(root, rel), from_unit_float(img))
        write_pgm(os.path.join(root, mask_rel), msk.astype(np.uint8) * 255)
        manifest.entries.append(ManifestEntry("test", rel, "anomalous", mask_rel, sub))

    write_pgm(os.path.join(root, "region_variable.pgm"),
              spec.variable_mask().astype(np.uint8) * 255)

    # region-variance contract: background must dominate the nominal variance
    stack = np.stack(train_stack)  # [N,3,S,S]
    per_pixel_var = stack.var(axis=0).mean(axis=0)  # [S,S]
    obj = spec.object_mask()
    var_bg = float(per_pixel_var[~obj].mean())
    var_obj = float(per_pixel_var[obj].mean())
    if var_bg < spec.variance_factor * var_obj or var_bg <= 0.0:
        raise DatasetContractError(
            f"variable/invariant variance ratio too low: {var_bg:.3g} vs "
            f"{spec.variance_factor} x {var_obj:.3g}")

    with open(os.path.join(root, "manifest.txt.tmp"), "w") as fh:
        fh.write(manifest.lines())
    os.replace(os.path.join(root, "manifest.txt.tmp"), os.path.join(root, "manifest.txt"))

    sums = []
    for e in manifest.entries:
        sums.append(f"{_sha256(os.path.join(root, e.path))}  {e.path}")
        if e.mask_path != "-":
            sums.append(f"{_sha256(os.path.join(root, e.mask_path))}  {e.mask_path}")
    sums.append(f"{_sha256(os.path.join(root, 'region_variable.pgm'))}  region_variable.pgm")
    with open(os.path.join(root, "checksums.txt.tmp"), "w") as fh:
        fh.write("\n".join(sums) + "\n")
    os.replace(os.path.join(root, "checksums.txt.tmp"), os.path.join(root, "checksums.txt"))
    return manifest


def verify_checksums(root: str) -> None:
    with open(os.path.join(root, "checksums.txt")) as fh:
        for ln in fh.read().splitlines():
            if not ln.strip():
                continue
            digest, rel = ln.split("  ", 1)
            actual = _sha256(os.path.join(root, rel))
            if actual != digest:
                raise DatasetContractError(f"checksum mismatch for {rel}")


def load_image(path: str) -> Tensor:
    """Image file -> [3,H,W] float64 tensor in [0,1]."""
    if not os.path.exists(path):
        raise ImageParseError(f"{path}: no such file")
    return Tensor(to_unit_float(read_netpbm(path)))


def load_manifest(root: str) -> Manifest:
    path = os.path.join(root, "manifest.txt")
    if not os.path.exists(path):
        raise DatasetContractError(f"{root}: manifest.txt not found")
    with open(path) as fh:
        return Manifest.parse(fh.read())


@dataclass
class Dataset:
    train_images: list[np.ndarray]
    train_labels: list[str]
    test_images: list[np.ndarray]
    test_labels: list[str]
    test_masks: list[np.ndarray]  # bool [H,W]; all-False for normals
    variable_mask: np.ndarray


def load_dataset(root: str) -> Dataset:
    manifest = load_manifest(root)
    ds = Dataset([], [], [], [], [], np.zeros(0))
    for e in manifest.entries:
        img = load_image(os.path.join(root, e.path)).data
        if e.split == "train":
            ds.train_images.append(img)
            ds.train_labels.append(e.label)
        else:
            ds.test_images.append(img)
            ds.test_labels.append(e.label)
            if e.mask_path == "-":
                ds.test_masks.append(np.zeros(img.shape[1:], dtype=bool))
            else:
                raw = read_netpbm(os.path.join(root, e.mask_path))
                ds.test_masks.append(raw > 127)
    region = read_netpbm(os.path.join(root, "region_variable.pgm"))
    ds.variable_mask = region > 127
    return ds
