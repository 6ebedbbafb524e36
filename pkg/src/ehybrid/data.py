"""Datasets: binary PGM/PPM and raw tensor files, folder loading, and the
synthetic oriented-texture task."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

TENSOR_MAGIC = b"EHYBTNSR"
TENSOR_VERSION = 1
IMAGE_SUFFIXES = {".pgm", ".ppm", ".pnm", ".tnsr"}


@dataclass
class Dataset:
    """Images ``(M, C, H, W)`` in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list
    split: str = "train"
    _fingerprint: str | None = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise FormatError(f"dataset images must be (M, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise FormatError("labels out of range for class_names")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def fingerprint(self) -> str:
        """Content hash, used as a scattering cache key."""
        if self._fingerprint is None:
            h = hashlib.sha1(self.images.tobytes())
            h.update(self.labels.tobytes())
            self._fingerprint = h.hexdigest()
        return self._fingerprint

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], list(self.class_names), self.split)

    @property
    def samples(self):
        return list(zip(self.images, self.labels))


# --- binary PGM / PPM --------------------------------------------------------

def _read_token(blob: bytes, pos: int, name: str) -> tuple[bytes, int]:
    n = len(blob)
    while pos < n:
        ch = blob[pos:pos + 1]
        if ch == b"#":
            end = blob.find(b"\n", pos)
            pos = n if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"{name}: unexpected end of header at byte offset {start}")
    return blob[start:pos], pos


def decode_pnm(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode binary P5 (gray) or P6 (RGB) into a ``(C, H, W)`` float array in [0, 1]."""
    if blob[:2] not in (b"P5", b"P6"):
        raise FormatError(f"{name}: bad magic {blob[:2]!r} at byte offset 0 (expected P5 or P6)")
    channels = 1 if blob[:2] == b"P5" else 3
    pos = 2
    values = []
    for field_name in ("width", "height", "maxval"):
        start = pos
        token, pos = _read_token(blob, pos, name)
        if not token.isdigit():
            raise FormatError(f"{name}: invalid {field_name} {token!r} at byte offset {start}")
        values.append(int(token))
    width, height, maxval = values
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{name}: invalid header values width={width} height={height} maxval={maxval}")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise FormatError(f"{name}: missing whitespace after maxval at byte offset {pos}")
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    if len(blob) - pos < count * dtype.itemsize:
        raise FormatError(f"{name}: truncated pixel data at byte offset {pos}: need {count * dtype.itemsize} "
                          f"bytes, have {len(blob) - pos}")
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    return (raw.reshape(height, width, channels).transpose(2, 0, 1) / maxval).astype(np.float32)


def encode_pnm(image: np.ndarray, maxval: int = 255) -> bytes:
    """Inverse of :func:`decode_pnm` for ``(C, H, W)`` images in [0, 1]."""
    image = np.asarray(image)
    c, h, w = image.shape
    if c not in (1, 3):
        raise FormatError(f"PNM images need 1 or 3 channels, got {c}")
    dtype = ">u2" if maxval > 255 else "u1"
    pixels = np.rint(np.clip(image, 0, 1) * maxval).astype(dtype).transpose(1, 2, 0)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n{maxval}\n".encode()
    return header + pixels.tobytes()


# --- raw tensor files --------------------------------------------------------

def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype="<f4")
    if array.ndim > 4:
        raise FormatError(f"tensor files hold at most rank 4, got {array.shape}")
    shape = (1,) * (4 - array.ndim) + array.shape
    return TENSOR_MAGIC + struct.pack("<I4I", TENSOR_VERSION, *shape) + array.tobytes()


def decode_tensor(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    if blob[:8] != TENSOR_MAGIC:
        raise FormatError(f"{name}: bad tensor magic at byte offset 0")
    if len(blob) < 28:
        raise FormatError(f"{name}: truncated header at byte offset {len(blob)}")
    version, *shape = struct.unpack_from("<I4I", blob, 8)
    if version != TENSOR_VERSION:
        raise FormatError(f"{name}: unsupported tensor version {version} at byte offset 8")
    count = int(np.prod(shape))
    if len(blob) - 28 < 4 * count:
        raise FormatError(f"{name}: truncated tensor data at byte offset 28")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=28).reshape(shape).astype(np.float32)


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), str(path))


# --- folders ---------------------------------------------------------------

def resize_nearest(image: np.ndarray, size: int) -> np.ndarray:
    _, h, w = image.shape
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return image[:, rows][:, :, cols]


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: unreadable ({exc})") from exc
    if path.suffix.lower() == ".tnsr":
        arr = decode_tensor(blob, str(path))
        if arr.shape[0] != 1:
            raise FormatError(f"{path}: image tensor files must hold a single (1, C, H, W) image")
        return arr[0]
    return decode_pnm(blob, str(path))


def load_image_folder(root, resolution: int | None = None, split: str = "train") -> Dataset:
    """Load ``root/<class>/<image>`` with classes and files in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset folder not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise FormatError(f"{root}: no class subdirectories")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise FormatError(f"{d}: empty class (no PGM/PPM/tensor files)")
        for f in files:
            img = read_image(f)
            if resolution is not None:
                img = resize_nearest(img, resolution)
            if images and img.shape != images[0].shape:
                raise FormatError(f"{f}: shape {img.shape} differs from {images[0].shape}")
            images.append(img)
            labels.append(label)
    return Dataset(np.stack(images), np.array(labels), [d.name for d in class_dirs], split)


# --- synthetic textures ------------------------------------------------------

def _oriented_texture(rng: np.random.Generator, size: int, theta: float, radius: float,
                      angular_width: float, radial_width: float) -> np.ndarray:
    """Band-limited noise whose spectrum concentrates around ``radius`` along ``theta``."""
    f = np.fft.fftfreq(size) * 2 * np.pi
    fy, fx = np.meshgrid(f, f, indexing="ij")
    rho = np.hypot(fx, fy)
    ang = np.arctan2(fy, fx)
    # orientation distance modulo pi, so the spectrum is Hermitian-symmetric
    d = np.angle(np.exp(2j * (ang - theta))) / 2
    mask = np.exp(-0.5 * (d / angular_width) ** 2) * np.exp(-0.5 * ((rho - radius) / radial_width) ** 2)
    noise = rng.standard_normal((size, size))
    tex = np.fft.ifft2(np.fft.fft2(noise) * mask).real
    return tex / (tex.std() + 1e-12)


def generate_texture_dataset(classes: int = 8, per_class: int = 250, resolution: int = 32, seed: int = 0,
                             channels: int = 3, noise: float = 0.5, angular_width: float = 0.25,
                             train_fraction: float = 0.8) -> tuple[Dataset, Dataset]:
    """Oriented band-limited noise textures, one orientation per class.

    Class ``k`` has orientation ``k pi / classes`` and a centre frequency drawn
    once per class; each sample gets a fresh noise field, a random circular
    shift and additive white noise. The split is 80/20 per class.
    """
    if not 1 <= classes <= 16:
        raise ConfigError(f"classes must lie in [1, 16], got {classes}")
    if resolution % 32:
        raise ConfigError(f"resolution must be divisible by 32, got {resolution}")
    if per_class < 2:
        raise ConfigError("per_class must be at least 2")
    rng = np.random.default_rng(seed)
    radii = rng.uniform(0.3 * np.pi, 0.6 * np.pi, size=classes)
    n_train = int(round(per_class * train_fraction))
    splits = {"train": ([], []), "test": ([], [])}
    for k in range(classes):
        theta = k * np.pi / classes
        for i in range(per_class):
            tex = _oriented_texture(rng, resolution, theta, radii[k], angular_width, 0.15 * np.pi)
            shift = rng.integers(0, resolution, size=2)
            tex = np.roll(tex, tuple(shift), axis=(0, 1))
            img = tex[None] + noise * rng.standard_normal((channels, resolution, resolution))
            img = np.clip(0.5 + 0.15 * img, 0.0, 1.0)
            images, labels = splits["train" if i < n_train else "test"]
            images.append(img)
            labels.append(k)
    names = [f"theta{k:02d}" for k in range(classes)]
    train = Dataset(np.stack(splits["train"][0]), np.array(splits["train"][1]), names, "train")
    test = Dataset(np.stack(splits["test"][0]), np.array(splits["test"][1]), list(names), "test")
    return train, test
