"""Dataset I/O (binary PPM/PGM), augmentation, splitting, and a synthetic
ellipse dataset for desk-scale training.

On-disk layout for a dataset directory: ``images/*.ppm`` (P6, maxval 255)
and ``masks/*.pgm`` (P5) with matching stems. Masks binarize at pixel
value >= 128 after a nearest-neighbor resize, which keeps them strictly
{0, 1}.
"""

import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, FormatError
from .ops import resize_bilinear_array
from .tensor import DTYPE, Tensor


def _read_netpbm(path, expected_magic: str):
    raw = Path(path).read_bytes()
    pos = 0
    fields = []

    def next_token():
        nonlocal pos
        while pos < len(raw):
            ch = raw[pos : pos + 1]
            if ch.isspace():
                pos += 1
            elif ch == b"#":
                while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        return raw[start:pos]

    magic = next_token().decode("ascii", "replace")
    if magic != expected_magic:
        raise FormatError(f"{path}: expected {expected_magic}, found {magic!r}")
    for _ in range(3):
        tok = next_token()
        if not tok.isdigit():
            raise FormatError(f"{path}: non-numeric header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, found {maxval}")
    pos += 1  # single whitespace byte separates header from raster
    channels = 3 if expected_magic == "P6" else 1
    need = width * height * channels
    raster = raw[pos : pos + need]
    if len(raster) != need:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr[:, :, 0] if channels == 1 else arr


def read_ppm(path) -> np.ndarray:
    """P6 image as uint8 [H, W, 3]."""
    return _read_netpbm(path, "P6")


def read_pgm(path) -> np.ndarray:
    """P5 image as uint8 [H, W]."""
    return _read_netpbm(path, "P5")


def write_ppm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"write_ppm expects [H,W,3], got {arr.shape}")
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def write_pgm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 2:
        raise DataError(f"write_pgm expects [H,W], got {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


@dataclass
class Sample:
    image: Tensor  # [3, H, W], values in [0, 1]
    mask: Tensor  # [1, H, W], values in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise DataError(f"sample {self.id}: image {self.image.shape} vs mask {self.mask.shape}")
        md = self.mask.data
        if not np.all((md == 0) | (md == 1)):
            raise DataError(f"sample {self.id}: mask is not binary")


@dataclass
class SplitSpec:
    train_n: int
    val_n: int
    test_n: int
    seed: int = 0

    @classmethod
    def default_for(cls, n_total: int, seed: int = 0) -> "SplitSpec":
        """880 training samples on a 1000-image set; the remainder splits
        evenly between val and test (odd remainders give test the extra)."""
        train_n = 880 if n_total == 1000 else int(round(n_total * 0.88))
        rest = n_total - train_n
        val_n = rest // 2
        return cls(train_n=train_n, val_n=val_n, test_n=rest - val_n, seed=seed)


def _nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resize_nearest_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    rows = _nearest_indices(arr.shape[-2], out_h)
    cols = _nearest_indices(arr.shape[-1], out_w)
    return np.ascontiguousarray(arr[..., rows, :][..., :, cols])


def load_sample(image_path, mask_path, target_size) -> Sample:
    """Decode a PPM/PGM pair, resize to ``target_size``, binarize the mask.

    The image resizes bilinearly and scales to [0, 1]; the mask resizes
    with nearest neighbor and binarizes at pixel >= 128.
    """
    if isinstance(target_size, int):
        target_size = (target_size, target_size)
    img = read_ppm(image_path)
    msk = read_pgm(mask_path)
    if img.shape[:2] != msk.shape:
        raise DataError(f"{image_path}: image {img.shape[:2]} vs mask {msk.shape}")
    chw = np.ascontiguousarray(img.transpose(2, 0, 1)).astype(DTYPE) / DTYPE(255.0)
    th, tw = target_size
    if (img.shape[0], img.shape[1]) != (th, tw):
        chw = resize_bilinear_array(chw, th, tw)
        msk = resize_nearest_array(msk, th, tw)
    binary = (msk >= 128).astype(DTYPE)[np.newaxis]
    return Sample(image=Tensor(chw), mask=Tensor(binary), id=Path(image_path).stem)


def save_sample(sample: Sample, images_dir, masks_dir) -> None:
    """Write a sample as quantized PPM + PGM (inverse of load_sample)."""
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.rint(sample.image.data * 255.0), 0, 255).astype(np.uint8)
    write_ppm(images_dir / f"{sample.id}.ppm", img.transpose(1, 2, 0))
    write_pgm(masks_dir / f"{sample.id}.pgm", (sample.mask.data[0] * 255).astype(np.uint8))


def find_samples(directory, target_size) -> list:
    """Load every images/*.ppm + masks/*.pgm pair under ``directory``."""
    directory = Path(directory)
    image_dir = directory / "images"
    mask_dir = directory / "masks"
    if not image_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{directory}: expected images/ and masks/ subdirectories")
    samples = []
    for image_path in sorted(image_dir.glob("*.ppm")):
        mask_path = mask_dir / f"{image_path.stem}.pgm"
        if not mask_path.is_file():
            raise DataError(f"{image_path.stem}: missing mask {mask_path}")
        samples.append(load_sample(image_path, mask_path, target_size))
    if not samples:
        raise DataError(f"{directory}: no image/mask pairs found")
    return samples


def sample_rng(seed: int, epoch: int, sample_id: str) -> np.random.Generator:
    """Order-independent per-sample stream: derived from (seed, epoch, id)."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, zlib.crc32(sample_id.encode())]))


def augment(sample: Sample, rng) -> Sample:
    """Random flips, k*90-degree rotation, brightness scale (image only).

    All four draws are consumed regardless of outcome so the rng stream
    stays aligned. The geometric transform applies identically to the
    mask; brightness scales by U[0.8, 1.2] then clamps to [0, 1].
    """
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    quarter_turns = int(rng.integers(0, 4))
    brightness = float(rng.uniform(0.8, 1.2))
    img = sample.image.data
    msk = sample.mask.data
    if hflip:
        img = img[:, :, ::-1]
        msk = msk[:, :, ::-1]
    if vflip:
        img = img[:, ::-1, :]
        msk = msk[:, ::-1, :]
    if quarter_turns:
        img = np.rot90(img, quarter_turns, axes=(1, 2))
        msk = np.rot90(msk, quarter_turns, axes=(1, 2))
    img = np.clip(img * DTYPE(brightness), 0.0, 1.0)
    return Sample(
        image=Tensor(np.ascontiguousarray(img, dtype=DTYPE)),
        mask=Tensor(np.ascontiguousarray(msk, dtype=DTYPE)),
        id=sample.id,
    )


def split_dataset(samples, spec: SplitSpec):
    """Deterministic shuffle by spec.seed, then partition in order."""
    samples = list(samples)
    total = spec.train_n + spec.val_n + spec.test_n
    if total != len(samples):
        raise ContractError(f"split sizes sum to {total}, dataset has {len(samples)}")
    perm = np.random.default_rng(spec.seed).permutation(len(samples))
    shuffled = [samples[i] for i in perm]
    train = shuffled[: spec.train_n]
    val = shuffled[spec.train_n : spec.train_n + spec.val_n]
    test = shuffled[spec.train_n + spec.val_n :]
    return train, val, test


def write_split_manifest(directory, train, val, test) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("val", val), ("test", test)):
        (directory / f"{name}.txt").write_text("".join(s.id + "\n" for s in part))


@dataclass
class EllipseSpec:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float


def ellipse_interior(size: int, e: EllipseSpec) -> np.ndarray:
    """Boolean [size, size] interior test at integer pixel centers."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    dy = yy - e.cy
    dx = xx - e.cx
    c, s = math.cos(e.angle), math.sin(e.angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / e.rx) ** 2 + (v / e.ry) ** 2 <= 1.0


# per-ellipse additive color biases (roughly polyp-like pinks/reds)
_POLYP_COLORS = (
    (0.50, -0.05, -0.10),
    (0.42, 0.12, -0.10),
    (0.48, -0.12, 0.08),
)


def synth_sample(size: int, rng, sample_id: str = "synth"):
    """One synthetic sample: low-frequency background + 1..3 ellipses.

    Returns (sample, ellipses); the mask is exactly the union of the
    ellipse interiors.
    """
    coarse = rng.uniform(0.05, 0.45, size=(3, 8, 8)).astype(DTYPE)
    image = resize_bilinear_array(coarse, size, size)
    mask = np.zeros((size, size), dtype=bool)
    ellipses = []
    n_ellipses = int(rng.integers(1, 4))
    for _ in range(n_ellipses):
        e = EllipseSpec(
            cy=float(rng.uniform(0.25, 0.75) * size),
            cx=float(rng.uniform(0.25, 0.75) * size),
            ry=float(rng.uniform(0.12, 0.28) * size),
            rx=float(rng.uniform(0.12, 0.28) * size),
            angle=float(rng.uniform(0.0, math.pi)),
        )
        color = _POLYP_COLORS[int(rng.integers(0, len(_POLYP_COLORS)))]
        gain = float(rng.uniform(0.9, 1.1))
        inside = ellipse_interior(size, e)
        for ch in range(3):
            image[ch][inside] += DTYPE(color[ch] * gain)
        mask |= inside
        ellipses.append(e)
    image = np.clip(image, 0.0, 1.0)
    sample = Sample(image=Tensor(image), mask=Tensor(mask.astype(DTYPE)[np.newaxis]), id=sample_id)
    return sample, ellipses


def synth_dataset(n: int, size: int, seed: int) -> list:
    """Deterministic list of n synthetic samples."""
    if size % 16:
        raise ContractError(f"synthetic size {size} must be divisible by 16")
    samples = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        sample, _ = synth_sample(size, rng, sample_id=f"synth_{i:04d}")
        samples.append(sample)
    return samples
