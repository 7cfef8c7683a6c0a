"""Model containers: a manifest plus one binary file per dictionary matrix.

A saved model is a directory holding ``manifest.json`` (format version,
frame, part table, shape model, objective weights, and an array index with
checksums) and one ``.cpad`` file per part dictionary. The binary layout
is a 14-byte header (magic ``CPAD``, format version as u16, then rows and
columns as u32, all little-endian) followed by the matrix as little-endian
64-bit floats in column-major order, so columns keep their gallery-item
semantics on disk. Round trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from cpalign.align import CpaModel
from cpalign.imgproc import PartDomain
from cpalign.learn import MixtureCpaModel
from cpalign.recognize import GalleryModel
from cpalign.shapemodel import EdgeGaussian, TreeConfig, TreeShapeModel

__all__ = [
    "ModelContainer",
    "load_model",
    "read_array",
    "save_model",
    "validate_container",
    "write_array",
]

FORMAT_VERSION = 1
_MAGIC = b"CPAD"
_HEADER = struct.Struct("<4sHII")

AnyModel = Union[CpaModel, MixtureCpaModel, GalleryModel]


@dataclass(eq=False)
class ModelContainer:
    """A saved model directory and its parsed manifest."""

    root: Path
    manifest: dict

    @property
    def kind(self) -> str:
        return self.manifest["kind"]


def write_array(path, mat: np.ndarray) -> None:
    """Write one dictionary matrix in the container's binary layout."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {mat.shape}")
    rows, cols = mat.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, FORMAT_VERSION, rows, cols))
        fh.write(mat.astype("<f8").tobytes(order="F"))


def read_array(path) -> np.ndarray:
    """Read one dictionary matrix, checking header and length."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(
            f"{path}: truncated at byte {len(data)}, "
            f"expected at least the {_HEADER.size}-byte header"
        )
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a dictionary array file")
    if version != FORMAT_VERSION:
        raise ValueError(
            f"{path}: unknown format version {version}, expected {FORMAT_VERSION}"
        )
    expected = _HEADER.size + rows * cols * 8
    if len(data) < expected:
        raise ValueError(
            f"{path}: truncated at byte {len(data)}, expected {expected} bytes"
        )
    values = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=_HEADER.size)
    return values.reshape((rows, cols), order="F").copy()


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _part_entry(dom: PartDomain) -> dict:
    return {
        "name": dom.name,
        "center": [float(dom.center_u), float(dom.center_v)],
        "size": [int(dom.width), int(dom.height)],
    }


def _part_from_entry(entry: dict) -> PartDomain:
    return PartDomain(
        center_u=float(entry["center"][0]),
        center_v=float(entry["center"][1]),
        width=int(entry["size"][0]),
        height=int(entry["size"][1]),
        name=str(entry["name"]),
    )


def _shape_entry(shape: TreeShapeModel) -> dict:
    return {
        "tree_parent": [int(p) for p in shape.tree.parent],
        "edges": [
            {
                "mu": [float(v) for v in edge.mu],
                "precision": [[float(v) for v in row] for row in edge.precision],
            }
            for edge in shape.edges
        ],
    }


def _shape_from_entry(entry: dict) -> TreeShapeModel:
    edges = [
        EdgeGaussian(np.array(e["mu"], dtype=float), np.array(e["precision"], dtype=float))
        for e in entry["edges"]
    ]
    return TreeShapeModel(TreeConfig(tuple(entry["tree_parent"])), edges)


def _array_index(root: Path, named: list[tuple[str, str, np.ndarray]]) -> dict:
    index = {}
    for key, filename, mat in named:
        write_array(root / filename, mat)
        index[key] = {
            "file": filename,
            "rows": int(mat.shape[0]),
            "cols": int(mat.shape[1]),
            "sha256": _sha256(root / filename),
        }
    return index


def save_model(model: AnyModel, outdir, *, vartheta: float | None = None) -> ModelContainer:
    """Write a model directory; returns the container that was written."""
    root = Path(outdir)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format_version": FORMAT_VERSION,
        "vartheta": vartheta,
    }
    named: list[tuple[str, str, np.ndarray]] = []

    if isinstance(model, CpaModel):
        manifest["kind"] = "single"
        manifest["frame"] = list(model.frame)
        manifest["parts"] = [_part_entry(d) for d in model.domains]
        manifest["lambda_hat"] = float(model.lambda_hat)
        manifest["eta_hat"] = float(model.eta_hat)
        manifest["shape"] = _shape_entry(model.shape)
        for i, mat in enumerate(model.dictionaries):
            named.append((f"part{i:02d}", f"part{i:02d}.cpad", mat))
    elif isinstance(model, MixtureCpaModel):
        manifest["kind"] = "mixture"
        first = model.components[0]
        manifest["frame"] = list(first.frame)
        manifest["lambda_hat"] = float(first.lambda_hat)
        manifest["eta_hat"] = float(first.eta_hat)
        manifest["components"] = []
        for ci, (comp, mask) in enumerate(zip(model.components, model.masks)):
            manifest["components"].append(
                {
                    "mask": [bool(b) for b in mask],
                    "parts": [_part_entry(d) for d in comp.domains],
                    "shape": _shape_entry(comp.shape),
                }
            )
            for i, mat in enumerate(comp.dictionaries):
                key = f"c{ci:02d}/part{i:02d}"
                named.append((key, f"c{ci:02d}_part{i:02d}.cpad", mat))
    elif isinstance(model, GalleryModel):
        manifest["kind"] = "gallery"
        manifest["frame"] = list(model.frame)
        manifest["parts"] = [_part_entry(d) for d in model.domains]
        manifest["lambda_hat"] = float(model.lambda_hat)
        manifest["eta_hat"] = float(model.eta_hat)
        manifest["shape"] = _shape_entry(model.shape)
        manifest["subjects"] = list(model.labels)
        for si, mats in enumerate(model.dictionaries):
            for i, mat in enumerate(mats):
                key = f"s{si:02d}/part{i:02d}"
                named.append((key, f"s{si:02d}_part{i:02d}.cpad", mat))
    else:
        raise ValueError(f"cannot save a {type(model).__name__}")

    manifest["arrays"] = _array_index(root, named)
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return ModelContainer(root=root, manifest=manifest)


def _read_manifest(root: Path) -> dict:
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ValueError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(
            f"{manifest_path}: unknown format version {version!r}, "
            f"expected {FORMAT_VERSION}"
        )
    return manifest


def _load_arrays(root: Path, manifest: dict) -> dict[str, np.ndarray]:
    arrays = {}
    for key, entry in manifest["arrays"].items():
        path = root / entry["file"]
        if not path.is_file():
            raise ValueError(f"missing array file {path}")
        mat = read_array(path)
        if _sha256(path) != entry["sha256"]:
            raise ValueError(f"checksum mismatch for {path}")
        if mat.shape != (entry["rows"], entry["cols"]):
            raise ValueError(
                f"dimension mismatch for {path}: header says {mat.shape}, "
                f"manifest says {(entry['rows'], entry['cols'])}"
            )
        arrays[key] = mat
    return arrays


def load_model(path) -> AnyModel:
    """Load a saved model directory back into its in-memory form."""
    root = Path(path)
    manifest = _read_manifest(root)
    arrays = _load_arrays(root, manifest)
    kind = manifest.get("kind")

    if kind == "single":
        domains = tuple(_part_from_entry(e) for e in manifest["parts"])
        return CpaModel(
            domains=domains,
            dictionaries=tuple(
                arrays[f"part{i:02d}"] for i in range(len(domains))
            ),
            shape=_shape_from_entry(manifest["shape"]),
            lambda_hat=manifest["lambda_hat"],
            eta_hat=manifest["eta_hat"],
            frame=tuple(manifest["frame"]),
        )
    if kind == "mixture":
        components, masks = [], []
        for ci, entry in enumerate(manifest["components"]):
            domains = tuple(_part_from_entry(e) for e in entry["parts"])
            components.append(
                CpaModel(
                    domains=domains,
                    dictionaries=tuple(
                        arrays[f"c{ci:02d}/part{i:02d}"]
                        for i in range(len(domains))
                    ),
                    shape=_shape_from_entry(entry["shape"]),
                    lambda_hat=manifest["lambda_hat"],
                    eta_hat=manifest["eta_hat"],
                    frame=tuple(manifest["frame"]),
                )
            )
            masks.append(tuple(bool(b) for b in entry["mask"]))
        return MixtureCpaModel(components=tuple(components), masks=tuple(masks))
    if kind == "gallery":
        domains = tuple(_part_from_entry(e) for e in manifest["parts"])
        m = len(domains)
        return GalleryModel(
            domains=domains,
            shape=_shape_from_entry(manifest["shape"]),
            labels=tuple(manifest["subjects"]),
            dictionaries=tuple(
                tuple(arrays[f"s{si:02d}/part{i:02d}"] for i in range(m))
                for si in range(len(manifest["subjects"]))
            ),
            lambda_hat=manifest["lambda_hat"],
            eta_hat=manifest["eta_hat"],
            frame=tuple(manifest["frame"]),
        )
    raise ValueError(f"unknown model kind {kind!r}")


def validate_container(path) -> dict:
    """Fully check a saved model directory; returns its manifest."""
    root = Path(path)
    manifest = _read_manifest(root)
    _load_arrays(root, manifest)
    load_model(root)
    return manifest
