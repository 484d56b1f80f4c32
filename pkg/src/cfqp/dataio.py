"""Dataset persistence and digit-corpus ingestion.

A saved dataset is a directory holding `manifest.json` plus raw binary
blobs: little-endian float32 (row-major) for x/t/y and each latent array,
little-endian uint8 for u_z. The manifest echoes the generating config,
records every blob's shape, and carries a sha256 over all blob bytes so a
truncated or edited copy fails loudly at load time.
"""
from __future__ import annotations

import gzip
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .datagen import Dataset, GenConfig

MANIFEST_FORMAT = "cfqp-dataset-v1"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _blob_order(latent_names) -> list:
    return ["x", "t", "y", "u_z"] + [f"latent_{n}" for n in sorted(latent_names)]


def save_dataset(ds: Dataset, out_dir, include_latents: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    latents = ds.latents if (include_latents and ds.latents is not None) else {}
    blobs = {"x": ds.x.astype("<f4"), "t": ds.t.astype("<f4"),
             "y": ds.y.astype("<f4"), "u_z": ds.u_z.astype("<u1")}
    for name, arr in latents.items():
        blobs[f"latent_{name}"] = arr.astype("<f4")

    digest = hashlib.sha256()
    shapes = {}
    for name in _blob_order(latents):
        data = blobs[name].tobytes()
        (out / f"{name}.bin").write_bytes(data)
        digest.update(data)
        shapes[name] = list(blobs[name].shape)

    cfg = ds.config
    manifest = {
        "format": MANIFEST_FORMAT,
        "generator": cfg.generator,
        "config": asdict(cfg),
        "x_shape": list(ds.x_shape),
        "y_shape": list(ds.y_shape),
        "split_sizes": [cfg.n_train, cfg.n_val, cfg.n_test],
        "blob_shapes": shapes,
        "checksum": digest.hexdigest(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{src} has no manifest.json") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"unrecognized dataset format {manifest.get('format')!r}")
    shapes = manifest["blob_shapes"]
    latent_names = sorted(n[len("latent_"):] for n in shapes if n.startswith("latent_"))

    digest = hashlib.sha256()
    raw = {}
    for name in _blob_order(latent_names):
        path = src / f"{name}.bin"
        if not path.exists():
            raise FileNotFoundError(f"dataset blob missing: {path}")
        data = path.read_bytes()
        digest.update(data)
        dtype = "<u1" if name == "u_z" else "<f4"
        arr = np.frombuffer(data, dtype=dtype)
        expect = int(np.prod(shapes[name])) if shapes[name] else 1
        if arr.size != expect:
            raise ValueError(f"blob {name}.bin has {arr.size} values, manifest says {expect}")
        raw[name] = arr.reshape(shapes[name]).copy()
    if digest.hexdigest() != manifest["checksum"]:
        raise ValueError("dataset checksum mismatch; files were modified or truncated")

    cfg = GenConfig(**manifest["config"])
    latents = {n: raw[f"latent_{n}"] for n in latent_names} or None
    return Dataset(cfg, raw["x"], raw["t"], raw["y"], raw["u_z"].astype(np.int64),
                   x_shape=tuple(manifest["x_shape"]), y_shape=tuple(manifest["y_shape"]),
                   latents=latents)


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def parse_idx(path) -> np.ndarray:
    """Read one IDX file (optionally gzipped) into a uint8 array.

    Supports the two digit-corpus layouts: magic 0x00000803 (images,
    [n, rows, cols]) and 0x00000801 (labels, [n]). Corruption is reported
    with the byte offset where parsing failed.
    """
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        header = fh.read(4)
        if len(header) < 4:
            raise ValueError(f"{path}: truncated magic at byte offset 0")
        magic = int.from_bytes(header, "big")
        if magic == IDX_IMAGES_MAGIC:
            ndim = 3
        elif magic == IDX_LABELS_MAGIC:
            ndim = 1
        else:
            raise ValueError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
        dims = []
        for i in range(ndim):
            raw = fh.read(4)
            if len(raw) < 4:
                raise ValueError(f"{path}: truncated dimension header at byte offset {4 + 4 * i}")
            dims.append(int.from_bytes(raw, "big"))
        offset = 4 + 4 * ndim
        count = int(np.prod(dims)) if dims else 0
        data = fh.read(count + 1)  # the extra byte detects trailing garbage
    if len(data) < count:
        raise ValueError(f"{path}: expected {count} data bytes, file ends at byte offset {offset + len(data)}")
    if len(data) > count:
        raise ValueError(f"{path}: trailing bytes at byte offset {offset + count}")
    return np.frombuffer(data, dtype=np.uint8).reshape(dims)


def load_digit_corpus(images_path, labels_path):
    """(images [n, r, c] uint8, labels [n] uint8) from a pair of IDX files."""
    images = parse_idx(images_path)
    labels = parse_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path} is not an image file")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path} is not a label file")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"corpus mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    return images, labels
