"""Procedural authentic/forged images with exact masks, distortions and dataset files.

Randomness comes from numpy's Philox-4x64 counter-based bit generator keyed
through ``SeedSequence(seed)``; the same integer seed yields the same stream on
every platform.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

KINDS = ("splice", "copy_move", "inpaint")
MIN_AREA, MAX_AREA = 0.05, 0.40
FEATHER = 2
MIN_REGION_CHANGE = 0.02


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8, 1 = manipulated
    label: int
    seed: int = -1
    kind: str = "authentic"

    def __post_init__(self):
        if int(self.label) != int(np.any(self.mask)):
            raise ValueError("label must be 1 exactly when the mask has a positive pixel")


class DatasetFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# generators


def _soft_shape(rng, H, W, yy, xx):
    cy, cx = rng.uniform(0, H), rng.uniform(0, W)
    ry, rx = rng.uniform(0.05, 0.3) * H, rng.uniform(0.05, 0.3) * W
    soft = rng.uniform(0.5, 2.5)
    if rng.random() < 0.5:
        sd = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) - 1.0
        sd *= min(ry, rx)
    else:
        sd = np.maximum(np.abs(yy - cy) - ry, np.abs(xx - cx) - rx)
    return 1.0 / (1.0 + np.exp(np.clip(sd / soft, -50, 50)))


def _value_noise(rng, H, W, cells):
    grid = rng.uniform(-1, 1, (3, cells + 1, cells + 1))
    return np.stack([ndimage.zoom(g, (H / (cells + 1), W / (cells + 1)), order=1)[:H, :W] for g in grid])


def gen_authentic(h: int, w: int, seed: int) -> Sample:
    """Gradients + 3-8 soft ellipses/rectangles + value-noise texture and fine grain."""
    if h % 32 or w % 32:
        raise ValueError(f"image size {h}x{w} must be a multiple of 32")
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((3, h, w))
    for _ in range(2):
        base = rng.uniform(0, 1, 3)
        gy, gx = rng.uniform(-0.5, 0.5, 2)
        img += 0.5 * (base[:, None, None] + gy * yy / h + gx * xx / w)
    for _ in range(int(rng.integers(3, 9))):
        alpha = _soft_shape(rng, h, w, yy, xx)
        colour = rng.uniform(0, 1, 3)[:, None, None]
        img = img * (1 - alpha) + colour * alpha
    img += rng.uniform(0.01, 0.06) * _value_noise(rng, h, w, int(rng.integers(4, 12)))
    img += rng.uniform(0.003, 0.03) * rng.standard_normal((3, h, w))
    img = np.clip(img, 0, 1).astype(np.float32)
    return Sample(img, np.zeros((h, w), np.uint8), 0, seed, "authentic")


def _region_mask(rng, H, W):
    yy, xx = np.mgrid[0:H, 0:W]
    while True:
        frac = rng.uniform(MIN_AREA, MAX_AREA)
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        if rng.random() < 0.5:
            hh = np.sqrt(frac * H * W * aspect)
            ww = frac * H * W / hh
            hh, ww = min(hh, H - 2), min(ww, W - 2)
            cy, cx = rng.uniform(hh / 2, H - hh / 2), rng.uniform(ww / 2, W - ww / 2)
            m = (np.abs(yy + 0.5 - cy) <= hh / 2) & (np.abs(xx + 0.5 - cx) <= ww / 2)
        else:
            a = np.sqrt(frac * H * W * aspect / np.pi)
            b = frac * H * W / (np.pi * a)
            a, b = min(a, H / 2 - 1), min(b, W / 2 - 1)
            cy, cx = rng.uniform(a, H - a), rng.uniform(b, W - b)
            m = ((yy + 0.5 - cy) / a) ** 2 + ((xx + 0.5 - cx) / b) ** 2 <= 1
        got = m.mean()
        if MIN_AREA <= got <= MAX_AREA:
            return m


def _bbox(m):
    rows, cols = np.nonzero(m)
    return rows.min(), rows.max(), cols.min(), cols.max()


def _shift_source(src, m, rng, disjoint):
    """Random offset moving the region's bounding box inside the image."""
    H, W = m.shape
    r0, r1, c0, c1 = _bbox(m)
    for _ in range(200):
        dy = int(rng.integers(-r0, H - r1))
        dx = int(rng.integers(-c0, W - c1))
        if dy == 0 and dx == 0:
            continue
        if disjoint:
            moved = np.zeros_like(m)
            moved[max(dy, 0):H + min(dy, 0), max(dx, 0):W + min(dx, 0)] = \
                m[max(-dy, 0):H + min(-dy, 0), max(-dx, 0):W + min(-dx, 0)]
            if np.any(moved & m):
                continue
        # content[y, x] = src[y + dy, x + dx], defined wherever the mask is
        ys = np.clip(np.arange(H) + dy, 0, H - 1)
        xs = np.clip(np.arange(W) + dx, 0, W - 1)
        return src[:, ys[:, None], xs[None, :]]
    return None


def _inpaint_fill(base, m):
    keep = (~m).astype(np.float64)
    sigma = max(2.0, np.sqrt(m.sum()) / 3)
    num = np.stack([ndimage.gaussian_filter(c * keep, sigma, mode="reflect") for c in base])
    den = ndimage.gaussian_filter(keep, sigma, mode="reflect")
    return num / np.maximum(den, 1e-6)


def feather_alpha(m: np.ndarray) -> np.ndarray:
    """1 deep inside the region, ramping over FEATHER pixels at its inner edge, 0 outside."""
    d = ndimage.distance_transform_edt(m)
    return np.clip(d / (FEATHER + 1), 0, 1) * m


def gen_manipulated(base: Sample, donor: Sample | None, kind: str, seed: int) -> Sample:
    if kind not in KINDS:
        raise ValueError(f"unknown manipulation kind {kind!r}")
    if base.label != 0:
        raise ValueError("base sample must be authentic")
    if donor is not None and donor.image.shape != base.image.shape:
        raise ValueError(f"size mismatch: base {base.image.shape} vs donor {donor.image.shape}")
    if kind == "splice" and donor is None:
        raise ValueError("splice needs a donor image")
    rng = make_rng(seed)
    img = base.image.astype(np.float64)
    H, W = base.mask.shape
    for _ in range(50):
        m = _region_mask(rng, H, W)
        if kind == "splice":
            content = _shift_source(donor.image.astype(np.float64), m, rng, disjoint=False)
        elif kind == "copy_move":
            content = _shift_source(img, m, rng, disjoint=True)
        else:
            content = _inpaint_fill(img, m)
        if content is None:
            continue
        if np.abs(content - img)[:, m].mean() > MIN_REGION_CHANGE:
            break
    if content is None:
        raise RuntimeError(f"could not place a {kind} region (seed {seed})")
    alpha = feather_alpha(m)[None]
    out = (img * (1 - alpha) + content * alpha).astype(np.float32)
    out = np.where(m[None], out, base.image)
    return Sample(out, m.astype(np.uint8), 1, seed, kind)


def make_samples(count: int, size: int, fake_ratio: float, seed: int, kinds: Sequence[str] = KINDS) -> list[Sample]:
    """Deterministic mix of authentic and manipulated samples."""
    rng = make_rng(seed)
    n_fake = int(round(count * fake_ratio))
    is_fake = np.zeros(count, bool)
    is_fake[:n_fake] = True
    rng.shuffle(is_fake)
    seeds = rng.integers(0, 2**62, size=(count, 3))
    out = []
    for i in range(count):
        base = gen_authentic(size, size, int(seeds[i, 0]))
        if is_fake[i]:
            kind = kinds[int(seeds[i, 2] % len(kinds))]
            donor = gen_authentic(size, size, int(seeds[i, 1])) if kind == "splice" else None
            out.append(gen_manipulated(base, donor, kind, int(seeds[i, 2])))
        else:
            out.append(base)
    return out


# ---------------------------------------------------------------------------
# distortions and augmentation


def gaussian_kernel1d(ksize: int) -> np.ndarray:
    sigma = ksize / 6.0
    r = ksize // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def distort(img: np.ndarray, kind: str, param: float, seed: int = 0) -> np.ndarray:
    """gauss_noise: std given on the 0-255 scale; gauss_blur: odd kernel size, sigma = size/6."""
    img = np.asarray(img)
    if kind == "gauss_noise":
        if param < 0:
            raise ValueError("noise std must be non-negative")
        if param == 0:
            return img.copy()
        noisy = img + make_rng(seed).normal(0.0, param / 255.0, img.shape)
        return np.clip(noisy, 0, 1).astype(img.dtype)
    if kind == "gauss_blur":
        k = int(param)
        if k % 2 == 0 or k < 1:
            raise ValueError(f"blur kernel must be odd and positive, got {param}")
        if k == 1:
            return img.copy()
        kern = gaussian_kernel1d(k)
        out = ndimage.convolve1d(img.astype(np.float64), kern, axis=-1, mode="reflect")
        out = ndimage.convolve1d(out, kern, axis=-2, mode="reflect")
        return out.astype(img.dtype)
    raise ValueError(f"unknown distortion {kind!r}")


def augment_flip(s: Sample, seed: int | None = None, flips: tuple[bool, bool] | None = None) -> Sample:
    """Flip vertically / horizontally, each with probability 0.5 (or as forced by ``flips``)."""
    if flips is None:
        rng = make_rng(seed if seed is not None else 0)
        flips = (bool(rng.random() < 0.5), bool(rng.random() < 0.5))
    img, mask = s.image, s.mask
    if flips[0]:
        img, mask = img[:, ::-1, :], mask[::-1, :]
    if flips[1]:
        img, mask = img[:, :, ::-1], mask[:, ::-1]
    return replace(s, image=np.ascontiguousarray(img), mask=np.ascontiguousarray(mask))


# ---------------------------------------------------------------------------
# netpbm + csv dataset files


def _write_pnm(path: Path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """(3, H, W) float image in [0, 1] -> binary P6."""
    _write_pnm(Path(path), b"P6", quantize(image).transpose(1, 2, 0))


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary mask -> P5 with values {0, 255}."""
    _write_pnm(Path(path), b"P5", (np.asarray(mask) != 0).astype(np.uint8) * 255)


def write_gray(path, values: np.ndarray) -> None:
    """(H, W) uint8 values -> P5 without binarizing."""
    _write_pnm(Path(path), b"P5", np.asarray(values, dtype=np.uint8))


def _read_pnm(path, magic: bytes) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] != magic:
        raise DatasetFormatError(f"{path}: bad magic {raw[:2]!r} at byte 0 (expected {magic!r})")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DatasetFormatError(f"{path}: malformed header at byte {start}")
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise DatasetFormatError(f"{path}: malformed header at byte {pos}")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise DatasetFormatError(f"{path}: unsupported maxval {maxval}")
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    if len(raw) - pos < need:
        raise DatasetFormatError(f"{path}: truncated pixel data at byte {len(raw)} (expected {pos + need})")
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(h, w, ch) if ch == 3 else data.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    return (_read_pnm(path, b"P6").transpose(2, 0, 1).astype(np.float32) / 255.0)


def read_pgm(path) -> np.ndarray:
    arr = _read_pnm(path, b"P5")
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise DatasetFormatError(f"{path}: mask value {int(arr[bad][0])} not in {{0, 255}}")
    return (arr == 255).astype(np.uint8)


@dataclass
class DatasetIndex:
    root: Path
    rows: list[tuple[str, str, int]]
    split: str = "train"


def write_dataset(samples: Sequence[Sample], directory, split: str = "train") -> DatasetIndex:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        img_rel, mask_rel = f"images/{i:06d}.ppm", f"masks/{i:06d}.pgm"
        write_ppm(root / img_rel, s.image)
        write_pgm(root / mask_rel, s.mask)
        rows.append((img_rel, mask_rel, int(s.label)))
    with open(root / "index.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["image", "mask", "label"])
        wr.writerows(rows)
    return DatasetIndex(root, rows, split)


def read_index(directory) -> DatasetIndex:
    root = Path(directory)
    path = root / "index.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path}: missing dataset index")
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd, None)
        if header != ["image", "mask", "label"]:
            raise DatasetFormatError(f"{path}: bad header {header}")
        rows = []
        seen = set()
        for line_no, rec in enumerate(rd, start=2):
            if len(rec) != 3 or rec[2] not in ("0", "1"):
                raise DatasetFormatError(f"{path}: malformed row at line {line_no}")
            if rec[0] in seen:
                raise DatasetFormatError(f"{path}: duplicate path {rec[0]} at line {line_no}")
            seen.add(rec[0])
            for rel in rec[:2]:
                if not (root / rel).exists():
                    raise FileNotFoundError(f"{root / rel}: listed in {path} line {line_no} but missing")
            rows.append((rec[0], rec[1], int(rec[2])))
    return DatasetIndex(root, rows)


def read_dataset(directory) -> list[Sample]:
    idx = read_index(directory)
    out = []
    for img_rel, mask_rel, label in idx.rows:
        mask = read_pgm(idx.root / mask_rel)
        if int(mask.any()) != label:
            raise DatasetFormatError(f"{idx.root / img_rel}: label {label} disagrees with its mask")
        out.append(Sample(read_ppm(idx.root / img_rel), mask, label, -1, "fake" if label else "authentic"))
    return out


def list_images(directory) -> list[Path]:
    return sorted(Path(directory).rglob("*.ppm"), key=lambda p: os.fspath(p))
