"""Light-field bundles on disk and the metric report table.

A bundle is a directory holding one image per sub-aperture view and a
``manifest.txt``::

    # omniepi light field bundle
    U=5
    V=5
    <other key=value metadata>
    0 0 view_00_00.png
    0 1 view_00_01.png
    ...

Views are 8- or 16-bit PGM (grey) / PPM (RGB) written here, or PNG via Pillow
(16-bit PNG for grey only). Pixel values map linearly to [0, 1].
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError
from .metrics import format_value

MANIFEST = "manifest.txt"
FORMATS = ("png", "pgm")


def _quantize(img: np.ndarray, bits: int) -> np.ndarray:
    peak = (1 << bits) - 1
    return np.round(np.clip(img, 0.0, 1.0) * peak).astype(np.uint8 if bits == 8 else np.uint16)


def write_pnm(path, img: np.ndarray, bits: int = 8) -> None:
    """``img`` is (H, W) grey or (3, H, W) RGB in [0, 1]."""
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    rgb = img.ndim == 3
    q = _quantize(np.moveaxis(img, 0, -1) if rgb else img, bits)
    h, w = q.shape[:2]
    header = f"{'P6' if rgb else 'P5'}\n{w} {h}\n{(1 << bits) - 1}\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(q.astype(">u2").tobytes() if bits == 16 else q.tobytes())


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode())
        pos = end
    pos += 1                                 # single whitespace before the raster
    magic, w, h, peak = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6"):
        raise ValueError(f"{path}: unsupported PNM type {magic}")
    ch = 3 if magic == "P6" else 1
    dtype = np.dtype(">u2") if peak > 255 else np.dtype(np.uint8)
    raster = np.frombuffer(data, dtype=dtype, count=w * h * ch, offset=pos).reshape(h, w, ch)
    img = raster.astype(np.float64) / peak
    return np.moveaxis(img, -1, 0) if ch == 3 else img[..., 0]


def write_png(path, img: np.ndarray, bits: int = 8) -> None:
    if img.ndim == 3:
        if bits != 8:
            raise ValueError("16-bit PNG is supported for grey views only; use pgm for 16-bit RGB")
        Image.fromarray(_quantize(np.moveaxis(img, 0, -1), 8), mode="RGB").save(path)
    elif bits == 8:
        Image.fromarray(_quantize(img, 8), mode="L").save(path)
    else:
        Image.fromarray(_quantize(img, 16).astype(np.uint16)).save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
        mode = im.mode
    if arr.ndim == 3:
        return np.moveaxis(arr[..., :3].astype(np.float64) / 255.0, -1, 0)
    peak = 255.0 if mode in ("L", "P") else 65535.0
    return arr.astype(np.float64) / peak


def write_image(path, img: np.ndarray, bits: int = 8) -> None:
    path = Path(path)
    if path.suffix == ".png":
        write_png(path, img, bits)
    else:
        write_pnm(path, img, bits)


def read_image(path) -> np.ndarray:
    path = Path(path)
    return read_png(path) if path.suffix == ".png" else read_pnm(path)


def write_bundle(directory, lf: np.ndarray, U: int, V: int, fmt: str = "png", bits: int = 8,
                 meta: dict | None = None) -> Path:
    """Write a (1, C, U*V, H, W) light field (C = 1 or 3) as a view bundle."""
    if lf.ndim != 5 or lf.shape[0] != 1 or lf.shape[1] not in (1, 3) or lf.shape[2] != U * V:
        raise ShapeError(f"expected (1, 1|3, {U * V}, H, W), got {lf.shape}")
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rgb = lf.shape[1] == 3
    ext = fmt if fmt == "png" else ("ppm" if rgb else "pgm")
    lines = ["# omniepi light field bundle", f"U={U}", f"V={V}"]
    lines += [f"{k}={v}" for k, v in sorted((meta or {}).items())]
    for u in range(U):
        for v in range(V):
            name = f"view_{u:02d}_{v:02d}.{ext}"
            view = lf[0, :, u * V + v]
            write_image(d / name, view if rgb else view[0], bits)
            lines.append(f"{u} {v} {name}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    return d


def read_manifest(directory) -> tuple[dict[str, str], list[tuple[int, int, str]]]:
    meta, views = {}, []
    for n, line in enumerate((Path(directory) / MANIFEST).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{directory}/{MANIFEST}:{n}: expected 'u v filename', got {line!r}")
        views.append((int(parts[0]), int(parts[1]), parts[2]))
    return meta, views


def read_bundle(directory) -> tuple[np.ndarray, int, int, dict[str, str]]:
    """Returns (lf (1, C, U*V, H, W), U, V, metadata)."""
    meta, views = read_manifest(directory)
    try:
        U, V = int(meta["U"]), int(meta["V"])
    except KeyError as exc:
        raise ValueError(f"{directory}: manifest lacks {exc.args[0]}") from None
    seen = {(u, v) for u, v, _ in views}
    if len(views) != U * V or seen != {(u, v) for u in range(U) for v in range(V)}:
        raise ValueError(f"{directory}: manifest must list each of the {U}x{V} views exactly once")
    lf = None
    for u, v, name in views:
        img = read_image(Path(directory) / name)
        img = img[None] if img.ndim == 2 else img
        if lf is None:
            lf = np.zeros((1, img.shape[0], U * V) + img.shape[1:])
        if img.shape != (lf.shape[1],) + lf.shape[3:]:
            raise ShapeError(f"{name}: view shape {img.shape} differs from the first view {lf.shape[1:]}")
        lf[0, :, u * V + v] = img
    return lf, U, V, meta


def format_report(rows: list[tuple[str, str, float, float]]) -> str:
    """``scene,view,psnr,ssim`` lines plus a ``mean`` row (views averaged, then scenes)."""
    out = ["scene,view,psnr,ssim"]
    by_scene: dict[str, list[tuple[float, float]]] = {}
    for scene, view, p, s in rows:
        out.append(f"{scene},{view},{format_value(p)},{format_value(s)}")
        by_scene.setdefault(scene, []).append((p, s))
    means = np.array([np.mean(v, axis=0) for v in by_scene.values()])
    out.append(f"mean,all,{format_value(means[:, 0].mean())},{format_value(means[:, 1].mean())}")
    return "\n".join(out) + "\n"
