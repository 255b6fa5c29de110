"""MNIST IDX ingestion, preprocessing to the 29x29 input, and weight files.

Weight file layout (all integers little-endian)::

    b"CNN5"                     magic
    u32  version = 1
    4 x  section  (C2, C3, N1, N2)
         u32  parameter count   156 / 7800 / 125100 / 1010
         f32  values[count]     canonical order, IEEE-754 single
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .tensors import INPUT_SIDE, LAYERS, TRAINABLE, Network

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
RAW_SIDE = 28

WEIGHT_MAGIC = b"CNN5"
WEIGHT_VERSION = 1


@dataclass(frozen=True)
class RawImage:
    pixels: np.ndarray  # (28, 28) uint8
    label: int | None = None


def _read_header(data: bytes, magic: int, ndims: int, path) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(data) < need:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    got = struct.unpack_from(">I", data, 0)[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    return struct.unpack_from(f">{ndims}I", data, 4)


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def load_idx_images_array(path) -> np.ndarray:
    """All images of an IDX3 file as an (n, 28, 28) uint8 array."""
    data = _read(path)
    count, rows, cols = _read_header(data, IMAGE_MAGIC, 3, path)
    if (rows, cols) != (RAW_SIDE, RAW_SIDE):
        raise FormatError(f"{path}: images are {rows}x{cols}, expected 28x28", offset=8)
    payload = count * rows * cols
    if len(data) - 16 < payload:
        raise FormatError(f"{path}: truncated payload, header promises {count} images",
                          offset=len(data))
    if len(data) - 16 > payload:
        raise FormatError(f"{path}: {len(data) - 16 - payload} trailing bytes", offset=16 + payload)
    return np.frombuffer(data, dtype=np.uint8, count=payload, offset=16).reshape(count, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    """Labels of an IDX1 file as a uint8 array; every label must be 0..9."""
    data = _read(path)
    (count,) = _read_header(data, LABEL_MAGIC, 1, path)
    if len(data) - 8 < count:
        raise FormatError(f"{path}: truncated payload, header promises {count} labels",
                          offset=len(data))
    if len(data) - 8 > count:
        raise FormatError(f"{path}: {len(data) - 8 - count} trailing bytes", offset=8 + count)
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=8)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{path}: label {labels[i]} out of range", offset=8 + i)
    return labels


def load_idx_images(path, labels=None) -> list[RawImage]:
    arr = load_idx_images_array(path)
    if labels is not None and len(labels) != len(arr):
        raise FormatError(f"{len(arr)} images but {len(labels)} labels")
    return [RawImage(arr[i], None if labels is None else int(labels[i])) for i in range(len(arr))]


def write_idx_images(path, images) -> None:
    arr = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">4I", IMAGE_MAGIC, *arr.shape))
        fh.write(arr.tobytes())


def write_idx_labels(path, labels) -> None:
    arr = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">2I", LABEL_MAGIC, arr.size))
        fh.write(arr.tobytes())


def preprocess(img, binarize: bool = False, threshold: int = 128, centered: bool = False
               ) -> np.ndarray:
    """28x28 bytes -> 29x29 float32 in [0, 1].

    One zero row and column are added at the bottom and right (top and left
    with ``centered``). Bytes scale by 1/255, or map to 0/1 at ``threshold``.
    """
    px = np.asarray(getattr(img, "pixels", img))
    if px.shape != (RAW_SIDE, RAW_SIDE):
        raise FormatError(f"raw image must be 28x28, got {px.shape}")
    if binarize:
        vals = (px >= threshold).astype(np.float32)
    else:
        vals = px.astype(np.float32) / np.float32(255.0)
    out = np.zeros((INPUT_SIDE, INPUT_SIDE), dtype=np.float32)
    off = 1 if centered else 0
    out[off:off + RAW_SIDE, off:off + RAW_SIDE] = vals
    return out


def preprocess_batch(images, binarize: bool = False, threshold: int = 128,
                     centered: bool = False) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim != 3 or arr.shape[1:] != (RAW_SIDE, RAW_SIDE):
        raise FormatError(f"expected (n, 28, 28) images, got {arr.shape}")
    if binarize:
        vals = (arr >= threshold).astype(np.float32)
    else:
        vals = arr.astype(np.float32) / np.float32(255.0)
    out = np.zeros((len(arr), INPUT_SIDE, INPUT_SIDE), dtype=np.float32)
    off = 1 if centered else 0
    out[:, off:off + RAW_SIDE, off:off + RAW_SIDE] = vals
    return out


def weight_file_size() -> int:
    return 8 + 4 * len(TRAINABLE) + 4 * sum(LAYERS[n].param_count for n in TRAINABLE)


def save_weights(net: Network, path) -> None:
    parts = [WEIGHT_MAGIC, struct.pack("<I", WEIGHT_VERSION)]
    for name in TRAINABLE:
        params = net.layer(name).params
        parts.append(struct.pack("<I", params.size))
        parts.append(params.astype("<f4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_weights(path, output_phi: bool = False) -> Network:
    data = _read(path)
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    if data[:4] != WEIGHT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}", offset=0)
    (version,) = struct.unpack_from("<I", data, 4)
    if version != WEIGHT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    at = 8
    params = {}
    for name in TRAINABLE:
        expected = LAYERS[name].param_count
        if len(data) < at + 4:
            raise FormatError(f"{path}: missing {name} section", offset=at, section=name)
        (count,) = struct.unpack_from("<I", data, at)
        if count != expected:
            raise FormatError(f"{path}: section {name} holds {count} parameters, "
                              f"expected {expected}", offset=at, section=name)
        at += 4
        if len(data) < at + 4 * count:
            raise FormatError(f"{path}: section {name} truncated", offset=len(data), section=name)
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=at).astype(np.float32)
        at += 4 * count
    if at != len(data):
        raise FormatError(f"{path}: {len(data) - at} trailing bytes", offset=at)
    return Network.from_params(params, output_phi=output_phi)


def default_data_dir() -> str | None:
    """``$SIMTCNN_MNIST_DIR`` if set, else the first existing conventional location."""
    env = os.environ.get("SIMTCNN_MNIST_DIR")
    if env:
        return env
    for cand in ("data/mnist", os.path.expanduser("~/data/mnist"), "/root/data/mnist"):
        if os.path.exists(os.path.join(cand, "t10k-images-idx3-ubyte")):
            return cand
    return None


def mnist_paths(directory, split: str = "test") -> tuple[str, str]:
    prefix = {"test": "t10k", "train": "train"}[split]
    return (os.path.join(directory, f"{prefix}-images-idx3-ubyte"),
            os.path.join(directory, f"{prefix}-labels-idx1-ubyte"))


def load_mnist(directory, split: str = "test", binarize: bool = False, threshold: int = 128,
               limit: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Preprocessed (n, 29, 29) images and their labels."""
    img_path, lbl_path = mnist_paths(directory, split)
    raw = load_idx_images_array(img_path)
    labels = load_idx_labels(lbl_path)
    if len(raw) != len(labels):
        raise FormatError(f"{len(raw)} images but {len(labels)} labels")
    if limit is not None:
        raw, labels = raw[:limit], labels[:limit]
    return preprocess_batch(raw, binarize, threshold), labels.astype(np.int64)
