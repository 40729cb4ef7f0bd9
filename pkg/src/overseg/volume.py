"""Label volumes: I/O, per-cell layer index and face-adjacency graph."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_ANISOTROPY = (4.0, 1.0, 1.0)

_RAW_SUFFIX = ".lbl"
_TIFF_SUFFIXES = (".tif", ".tiff")


class VolumeFormatError(ValueError):
    """Raised for corrupt headers, size mismatches and unsupported sample types."""


@dataclass
class LabelVolume:
    """Dense (Z, Y, X) grid of uint32 instance labels, 0 is background."""

    data: np.ndarray
    anisotropy: tuple[float, float, float] = DEFAULT_ANISOTROPY

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label volume must be 3D, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            raise VolumeFormatError(f"unsupported sample type {data.dtype}")
        if data.size and data.min() < 0:
            raise VolumeFormatError("labels must be non-negative")
        if data.size and int(data.max()) > np.iinfo(np.uint32).max:
            raise VolumeFormatError("labels exceed 32 bits")
        self.data = np.ascontiguousarray(data, dtype=np.uint32)
        aniso = tuple(float(a) for a in self.anisotropy)
        if len(aniso) != 3 or not all(a > 0 and np.isfinite(a) for a in aniso):
            raise ValueError(f"anisotropy must be three positive numbers, got {self.anisotropy}")
        self.anisotropy = aniso

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def labels(self) -> np.ndarray:
        u = np.unique(self.data)
        return u[u != 0]

    def copy(self) -> "LabelVolume":
        return LabelVolume(self.data.copy(), self.anisotropy)

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (self.anisotropy == other.anisotropy
                and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class Mask2D:
    """Pixels of one label in one z-layer, as an (k, 2) array of sorted (y, x) rows."""

    layer: int
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        if len(px) == 0:
            raise ValueError("mask must contain at least one pixel")
        keys = pixel_keys(px)
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if np.any(keys[1:] == keys[:-1]):
            raise ValueError("duplicate pixels in mask")
        object.__setattr__(self, "pixels", px[order])
        object.__setattr__(self, "_keys", keys)

    def __len__(self):
        return len(self.pixels)

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    def shifted(self, dy: int, dx: int) -> "Mask2D":
        return Mask2D(self.layer, self.pixels + np.array([dy, dx]), self.label)

    def to_image(self, shape: tuple[int, int]) -> np.ndarray:
        img = np.zeros(shape, dtype=bool)
        img[self.pixels[:, 0], self.pixels[:, 1]] = True
        return img

    def to_image_local(self, origin, shape: tuple[int, int]) -> np.ndarray:
        """Rasterise onto a canvas whose (0, 0) sits at ``origin``."""
        img = np.zeros(shape, dtype=bool)
        loc = self.pixels - np.asarray(origin)
        img[loc[:, 0], loc[:, 1]] = True
        return img

    @classmethod
    def from_image(cls, img: np.ndarray, layer: int = 0, label: int = 1) -> "Mask2D":
        return cls(layer, np.argwhere(img), label)

    def __eq__(self, other):
        if not isinstance(other, Mask2D):
            return NotImplemented
        return (self.layer == other.layer and self.label == other.label
                and np.array_equal(self.pixels, other.pixels))

    __hash__ = None


def pixel_keys(pixels: np.ndarray) -> np.ndarray:
    """Pack (y, x) rows into sortable int64 keys (coordinates may be negative)."""
    px = np.asarray(pixels, dtype=np.int64)
    return ((px[:, 0] + (1 << 30)) << 32) | (px[:, 1] + (1 << 30))


@dataclass
class CellRecord:
    label: int
    top_layer: int
    bottom_layer: int
    masks: dict[int, Mask2D]
    voxel_count: int

    @property
    def height(self) -> int:
        return self.bottom_layer - self.top_layer + 1

    @property
    def layers(self) -> list[int]:
        return sorted(self.masks)

    @property
    def holes(self) -> list[int]:
        """Layers inside [top, bottom] without a mask."""
        return [z for z in range(self.top_layer, self.bottom_layer + 1) if z not in self.masks]

    @property
    def top_mask(self) -> Mask2D:
        return self.masks[self.top_layer]

    @property
    def bottom_mask(self) -> Mask2D:
        return self.masks[self.bottom_layer]


class CellIndex(dict):
    """Mapping label -> CellRecord; also remembers the in-plane shape of the volume."""

    def __init__(self, records=(), shape=(0, 0, 0)):
        super().__init__(records)
        self.shape = tuple(shape)


@dataclass
class AdjacencyGraph:
    """Face-adjacency between labels; edges keyed by (smaller, larger) label."""

    nodes: set[int] = field(default_factory=set)
    edges: dict[tuple[int, int], int] = field(default_factory=dict)

    def has_edge(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.edges

    def contact(self, a: int, b: int) -> int:
        return self.edges.get((min(a, b), max(a, b)), 0)

    def neighbors(self, a: int) -> list[int]:
        out = [q for p, q in self.edges if p == a] + [p for p, q in self.edges if q == a]
        return sorted(out)

    def edge_list(self, min_contact: int = 1) -> list[tuple[int, int]]:
        return sorted(e for e, c in self.edges.items() if c >= min_contact)


# ---------------------------------------------------------------------------
# I/O


def _infer_format(path: Path, format_hint: str | None) -> str:
    if format_hint:
        hint = format_hint.lower()
        if hint in ("raw", "lbl"):
            return "raw"
        if hint in ("tif", "tiff"):
            return "tiff"
        raise VolumeFormatError(f"unknown format hint {format_hint!r}")
    if path.suffix.lower() in _TIFF_SUFFIXES:
        return "tiff"
    return "raw"


def _raw_paths(path: Path) -> tuple[Path, Path]:
    # Only strip a trailing .lbl/.json; with_suffix would also eat "x.corrected".
    name = path.name[: -len(path.suffix)] if path.suffix.lower() in (_RAW_SUFFIX, ".json") else path.name
    return path.with_name(name + _RAW_SUFFIX), path.with_name(name + ".json")


def load_volume(path, format_hint: str | None = None,
                anisotropy: tuple[float, float, float] | None = None) -> LabelVolume:
    """Load a raw (.lbl + .json sidecar) or multi-page TIFF label volume.

    ``anisotropy`` is used only when the file does not carry one.
    """
    path = Path(path)
    fmt = _infer_format(path, format_hint)
    if fmt == "raw":
        return _load_raw(path, anisotropy)
    return _load_tiff(path, anisotropy)


def _load_raw(path: Path, anisotropy) -> LabelVolume:
    lbl, sidecar = _raw_paths(path)
    try:
        header = json.loads(sidecar.read_text())
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"corrupt header {sidecar}: {e}") from e
    if not isinstance(header, dict) or "dims" not in header:
        raise VolumeFormatError(f"corrupt header {sidecar}: missing 'dims'")
    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(d, int) and d >= 0 for d in dims)):
        raise VolumeFormatError(f"corrupt header {sidecar}: bad dims {dims!r}")
    dtype = header.get("dtype", "u32")
    if dtype != "u32":
        raise VolumeFormatError(f"unsupported sample type {dtype!r}")
    aniso = header.get("anisotropy", anisotropy or DEFAULT_ANISOTROPY)
    payload = np.fromfile(lbl, dtype="<u4")
    expected = dims[0] * dims[1] * dims[2]
    if payload.size != expected or lbl.stat().st_size != 4 * expected:
        raise VolumeFormatError(
            f"dims {tuple(dims)} need {expected} voxels, payload has {lbl.stat().st_size / 4:g}")
    return LabelVolume(payload.reshape(dims).astype(np.uint32), tuple(aniso))


def _load_tiff(path: Path, anisotropy) -> LabelVolume:
    import tifffile

    with tifffile.TiffFile(path) as tif:
        pages = tif.pages
        if len(pages) == 0:
            raise VolumeFormatError(f"{path} has no pages")
        data = np.stack([p.asarray() for p in pages])
        aniso = None
        desc = pages[0].description
        if desc:
            try:
                meta = json.loads(desc)
                aniso = meta.get("anisotropy") if isinstance(meta, dict) else None
            except json.JSONDecodeError:
                aniso = None
    if data.ndim != 3:
        raise VolumeFormatError(f"expected one 2D page per layer, got stack shape {data.shape}")
    if data.dtype not in (np.uint8, np.uint16, np.uint32, np.int16, np.int32):
        raise VolumeFormatError(f"unsupported sample type {data.dtype}")
    return LabelVolume(data, tuple(aniso or anisotropy or DEFAULT_ANISOTROPY))


def write_volume(volume: LabelVolume, path, format_hint: str | None = None) -> None:
    """Write ``volume``; raw writes ``<name>.lbl`` plus ``<name>.json``."""
    path = Path(path)
    fmt = _infer_format(path, format_hint)
    if fmt == "raw":
        lbl, sidecar = _raw_paths(path)
        header = {"dims": list(volume.dims), "dtype": "u32",
                  "anisotropy": list(volume.anisotropy)}
        with open(lbl, "wb") as fh:
            fh.write(volume.data.astype("<u4", copy=False).tobytes(order="C"))
        sidecar.write_text(json.dumps(header))
        return
    import tifffile

    # One page per layer; anisotropy rides in the JSON image description.
    tifffile.imwrite(path, volume.data, photometric="minisblack",
                     metadata={"anisotropy": list(volume.anisotropy)})


# ---------------------------------------------------------------------------
# indexing


def build_cell_index(volume: LabelVolume) -> CellIndex:
    data = volume.data
    z, y, x = np.nonzero(data)
    index = CellIndex(shape=volume.dims)
    if z.size == 0:
        return index
    lab = data[z, y, x].astype(np.int64)
    order = np.lexsort((x, y, z, lab))
    z, y, x, lab = z[order], y[order], x[order], lab[order]
    # runs of identical (label, z)
    brk = np.flatnonzero((np.diff(lab) != 0) | (np.diff(z) != 0)) + 1
    starts = np.r_[0, brk]
    ends = np.r_[brk, lab.size]
    for s, e in zip(starts, ends):
        label = int(lab[s])
        layer = int(z[s])
        mask = Mask2D(layer, np.stack([y[s:e], x[s:e]], axis=1), label)
        rec = index.get(label)
        if rec is None:
            index[label] = CellRecord(label, layer, layer, {layer: mask}, e - s)
        else:
            rec.masks[layer] = mask
            rec.bottom_layer = layer
            rec.voxel_count += e - s
    return index


def build_adjacency(volume: LabelVolume) -> AdjacencyGraph:
    """6-connected contact graph with per-edge counts of touching face pairs."""
    data = volume.data
    graph = AdjacencyGraph(nodes={int(v) for v in volume.labels()})
    pairs = []
    for axis in range(3):
        a = np.moveaxis(data, axis, 0)[:-1].ravel()
        b = np.moveaxis(data, axis, 0)[1:].ravel()
        hit = (a != b) & (a != 0) & (b != 0)
        if hit.any():
            pairs.append(np.stack([np.minimum(a[hit], b[hit]), np.maximum(a[hit], b[hit])], 1))
    if pairs:
        allp = np.concatenate(pairs).astype(np.int64)
        uniq, counts = np.unique(allp, axis=0, return_counts=True)
        graph.edges = {(int(p), int(q)): int(c) for (p, q), c in zip(uniq, counts)}
    return graph


def mask_overlap(a: Mask2D, b: Mask2D) -> int:
    """Number of shared (y, x) pixels, regardless of layer."""
    return int(np.intersect1d(a.keys, b.keys, assume_unique=True).size)


def relabel(volume: LabelVolume, mapping: dict[int, int]) -> None:
    """In-place relabel; single writer."""
    for src, dst in mapping.items():
        volume.data[volume.data == src] = dst


def next_free_label(volume: LabelVolume) -> int:
    return int(volume.data.max()) + 1 if volume.data.size else 1
