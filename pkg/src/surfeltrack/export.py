"""Point-cloud snapshot export.

Surfel clouds are written as binary little-endian PLY with per-point
normal, color, radius, confidence, and class label. The label is also
baked into a second color triple from a fixed palette so any stock
viewer can show the segmentation without custom shaders.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .model import SurfelCloud

# Fixed label palette (RGB bytes); labels beyond the table wrap around.
LABEL_PALETTE = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207),
], dtype=np.uint8)

_PLY_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("radius", "<f4"), ("confidence", "<f4"), ("label", "u1"),
    ("label_red", "u1"), ("label_green", "u1"), ("label_blue", "u1"),
])


def _header(n: int) -> bytes:
    names = _PLY_DTYPE.names
    types = {"<f4": "float", "u1": "uchar"}
    lines = ["ply", "format binary_little_endian 1.0",
             f"element vertex {n}"]
    lines += [f"property {types[_PLY_DTYPE[name].str.lstrip('|')]} {name}"
              for name in names]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def save_surfel_ply(path, cloud: SurfelCloud) -> None:
    """Write the cloud to a binary PLY file, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rec = np.empty(len(cloud), dtype=_PLY_DTYPE)
    for i, name in enumerate(("x", "y", "z")):
        rec[name] = cloud.positions[:, i]
        rec["n" + name[-1]] = cloud.normals[:, i]
    col = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = col[:, 0], col[:, 1], col[:, 2]
    rec["radius"] = cloud.radii
    rec["confidence"] = cloud.confidences
    rec["label"] = (cloud.labels % 256).astype(np.uint8)
    pal = LABEL_PALETTE[cloud.labels % len(LABEL_PALETTE)]
    rec["label_red"], rec["label_green"], rec["label_blue"] = (
        pal[:, 0], pal[:, 1], pal[:, 2])
    with open(path, "wb") as fh:
        fh.write(_header(len(cloud)))
        fh.write(rec.tobytes())


def read_surfel_ply(path) -> dict:
    """Read back a file written by save_surfel_ply.

    Returns a dict of plain arrays (positions, normals, colors in [0,1],
    radii, confidences, labels). Only the exact layout this module writes
    is supported; anything else raises ValueError.
    """
    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    cut = raw.find(marker)
    if cut < 0 or not raw.startswith(b"ply"):
        raise ValueError(f"not a surfel PLY file: {path}")
    header = raw[:cut].decode("ascii").splitlines()
    n = None
    props = []
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property"):
            props.append(line.split()[-1])
    if n is None or tuple(props) != _PLY_DTYPE.names:
        raise ValueError(f"unsupported PLY layout in {path}")
    rec = np.frombuffer(raw[cut + len(marker):], dtype=_PLY_DTYPE, count=n)
    return {
        "positions": np.stack([rec["x"], rec["y"], rec["z"]], 1).astype(float),
        "normals": np.stack([rec["nx"], rec["ny"], rec["nz"]], 1).astype(float),
        "colors": np.stack([rec["red"], rec["green"], rec["blue"]], 1) / 255.0,
        "radii": rec["radius"].astype(float),
        "confidences": rec["confidence"].astype(float),
        "labels": rec["label"].astype(np.int64),
    }
