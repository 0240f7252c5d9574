"""Synthetic contextual segmentation data.

Every image stacks three horizontal bands inside a background frame::

    cap band      (C or D texture)
    middle band   (shared A/B texture)
    base band     (D or C texture)

The middle band is labelled A when the C texture lies directly below it and
B when the D texture does; the opposite distinctive texture always sits above,
so both C and D appear in every image.  A and B are rendered by the same
texture generator, hence any classifier that cannot tell "below" from "above"
sees the two classes as identical.  Band thicknesses are drawn independently
from the same range, which makes the layout distribution symmetric under a
vertical flip (a flipped A image is a valid B image).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..train import TrainSample
from . import imageio

BACKGROUND, CLASS_A, CLASS_B, CLASS_C, CLASS_D = range(5)
CLASS_NAMES = ("background", "A", "B", "C", "D")
AMBIGUOUS = (CLASS_A, CLASS_B)

# mean colour and per-pixel texture amplitude (0-255 scale)
_TEXTURES = {
    "background": ((120.0, 120.0, 120.0), 10.0),
    "ab": ((200.0, 90.0, 60.0), 30.0),
    "c": ((60.0, 180.0, 80.0), 30.0),
    "d": ((70.0, 90.0, 200.0), 30.0),
}


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 64
    num_classes: int = 5
    noise_sigma: float = 8.0
    count: int = 250
    seed: int = 0
    train_fraction: float = 0.8

    def validate(self) -> None:
        if self.count < 5:
            raise ValueError(f"count must be >= 5, got {self.count}")
        if self.num_classes != 5:
            raise ValueError("the contextual generator produces exactly 5 classes")
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Dataset:
    train: list[TrainSample]
    test: list[TrainSample]


def _texture(kind: str, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    mean, amp = _TEXTURES[kind]
    h, w = shape
    return np.asarray(mean)[None, None, :] + rng.uniform(-amp, amp, size=(h, w, 3))


def sample_layout(size: int, rng: np.random.Generator) -> dict[str, int]:
    # every band and both side margins are at least size/5 wide, so each one
    # owns whole cells of the 1/16-resolution node grid (cells are ~size/5)
    lo = -(-size // 5)
    margin_hi = max(lo, size // 4)
    t_hi = max(lo, (5 * size) // 16)
    return {
        "left": int(rng.integers(lo, margin_hi + 1)),
        "right": int(rng.integers(lo, margin_hi + 1)),
        "cap": int(rng.integers(lo, t_hi + 1)),
        "base": int(rng.integers(lo, t_hi + 1)),
    }


def render_sample(noise_seed, middle_class: int, size: int = 64, noise_sigma: float = 8.0):
    """Render one (image uint8 HxWx3, mask HxW) pair.

    All randomness comes from ``noise_seed``; ``middle_class`` only decides
    which distinctive texture goes below the middle band.
    """
    if middle_class not in AMBIGUOUS:
        raise ValueError(f"middle_class must be A ({CLASS_A}) or B ({CLASS_B})")
    rng = np.random.default_rng(noise_seed)
    lay = sample_layout(size, rng)
    # every texture field is drawn in a fixed order regardless of the class
    bg = _texture("background", (size, size), rng)
    ab = _texture("ab", (size, size), rng)
    tex_c = _texture("c", (size, size), rng)
    tex_d = _texture("d", (size, size), rng)
    noise = rng.normal(0.0, noise_sigma, size=(size, size, 3))

    below, above = (CLASS_C, CLASS_D) if middle_class == CLASS_A else (CLASS_D, CLASS_C)
    tex = {CLASS_C: tex_c, CLASS_D: tex_d}
    image = bg.copy()
    mask = np.full((size, size), BACKGROUND, dtype=np.uint8)
    x0, x1 = lay["left"], size - lay["right"]
    cap_end = lay["cap"]
    base_start = size - lay["base"]
    image[:cap_end, x0:x1] = tex[above][:cap_end, x0:x1]
    mask[:cap_end, x0:x1] = above
    image[cap_end:base_start, x0:x1] = ab[cap_end:base_start, x0:x1]
    mask[cap_end:base_start, x0:x1] = middle_class
    image[base_start:, x0:x1] = tex[below][base_start:, x0:x1]
    mask[base_start:, x0:x1] = below
    image = np.clip(np.round(image + noise), 0, 255).astype(np.uint8)
    return image, mask, lay


def middle_band(lay: dict[str, int], size: int) -> tuple[slice, slice]:
    return slice(lay["cap"], size - lay["base"]), slice(lay["left"], size - lay["right"])


def to_chw(image_hwc: np.ndarray) -> np.ndarray:
    """uint8 [H,W,3] -> float [3,H,W] in [0,1]."""
    return np.ascontiguousarray(image_hwc.astype(np.float64).transpose(2, 0, 1) / 255.0)


def to_sample(image_hwc: np.ndarray, mask: np.ndarray) -> TrainSample:
    return TrainSample(to_chw(image_hwc), mask.astype(np.int64))


def gen_dataset(spec: SyntheticSpec = SyntheticSpec()) -> Dataset:
    """Deterministic from ``spec.seed``; classes alternate A/B so each split is balanced."""
    spec.validate()
    samples = []
    for i in range(spec.count):
        seed = np.random.SeedSequence([spec.seed, i])
        middle = CLASS_A if i % 2 == 0 else CLASS_B
        image, mask, _ = render_sample(seed, middle, spec.image_size, spec.noise_sigma)
        samples.append(to_sample(image, mask))
    n_train = int(round(spec.train_fraction * spec.count))
    return Dataset(samples[:n_train], samples[n_train:])


def write_dataset(spec: SyntheticSpec, out_dir: str | Path, ext: str = "ppm") -> Path:
    """Write images/, masks/ and a manifest of ``image_path mask_path split`` lines."""
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    mask_ext = "pgm" if ext == "ppm" else ext
    n_train = int(round(spec.train_fraction * spec.count))
    lines = []
    for i in range(spec.count):
        seed = np.random.SeedSequence([spec.seed, i])
        middle = CLASS_A if i % 2 == 0 else CLASS_B
        image, mask, _ = render_sample(seed, middle, spec.image_size, spec.noise_sigma)
        ip = f"images/{i:05d}.{ext}"
        mp = f"masks/{i:05d}.{mask_ext}"
        imageio.write_rgb(out / ip, image)
        imageio.write_gray(out / mp, mask)
        lines.append(f"{ip} {mp} {'train' if i < n_train else 'test'}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_manifest(path: str | Path) -> list[tuple[Path, Path, str]]:
    path = Path(path)
    root = path.parent
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected 'image_path mask_path split', got {line!r}")
        rows.append((root / parts[0], root / parts[1], parts[2]))
    return rows


def load_dataset(path: str | Path) -> Dataset:
    """Read a manifest (or a directory holding ``manifest.txt``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    ds = Dataset([], [])
    for ip, mp, split in load_manifest(path):
        s = to_sample(imageio.read_rgb(ip), imageio.read_gray(mp))
        (ds.train if split == "train" else ds.test).append(s)
    return ds
