"""3D volume IO, plane slicing, prediction fusion and synthetic data.

Storage format: a raw little-endian body file plus a JSON sidecar at
``<path>.json`` describing it.  The sidecar carries the voxel grid
``dims`` (index order), the voxel ``spacing`` in millimetres, the body
``dtype`` ("f32" or "u8"), the byte order (always "little"), the value
``kind`` ("intensity", "labels" or "probs") and, for labels and
probability maps, the class count.

Axis convention: a volume is indexed (x, y, z); slicing plane names map
to the axis that is swept:

    sagittal -> axis 0, coronal -> axis 1, transverse -> axis 2

``slice_stack``/``restack_slices`` are exact inverses, so a prediction
made plane-wise drops back into the volume grid without resampling.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from .errors import DataError, ParameterError
from .tensor import derive_seed

PLANES = {"sagittal": 0, "coronal": 1, "transverse": 2}

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
KINDS = ("intensity", "labels", "probs")


def plane_axis(plane: str) -> int:
    if plane not in PLANES:
        raise ParameterError(f"unknown plane {plane!r}, expected one of "
                             f"{tuple(PLANES)}")
    return PLANES[plane]


@dataclass
class VolumeMeta:
    dims: tuple
    spacing: tuple
    dtype: str
    kind: str
    modality: str = ""
    classes: int = 0
    byte_order: str = "little"

    def validate(self) -> "VolumeMeta":
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be three positive numbers, got {self.spacing}")
        if self.dtype not in _DTYPES:
            raise DataError(f"unsupported dtype {self.dtype!r}")
        if self.kind not in KINDS:
            raise DataError(f"unsupported kind {self.kind!r}")
        if self.byte_order != "little":
            raise DataError(f"unsupported byte order {self.byte_order!r}")
        if self.kind == "intensity":
            if len(self.dims) != 3:
                raise DataError(f"intensity volumes are 3D, got dims {self.dims}")
        elif self.kind == "labels":
            if len(self.dims) != 3:
                raise DataError(f"label volumes are 3D, got dims {self.dims}")
            if self.classes < 2:
                raise DataError("label volumes need a class count >= 2")
        else:  # probs
            if len(self.dims) != 4:
                raise DataError(f"probability volumes are 4D, got dims {self.dims}")
            if self.classes != self.dims[3]:
                raise DataError(f"probs classes {self.classes} != last dim "
                                f"{self.dims[3]}")
        if any(d < 1 for d in self.dims):
            raise DataError(f"dims must be positive, got {self.dims}")
        return self


def _sidecar(path) -> str:
    return str(path) + ".json"


def write_volume(path, data: np.ndarray, spacing, kind: str,
                 modality: str = "", classes: int = 0) -> VolumeMeta:
    """Write the body file and its JSON sidecar; returns the metadata."""
    data = np.asarray(data)
    if kind == "labels":
        if data.ndim != 3:
            raise DataError(f"label volume must be 3D, got {data.shape}")
        if data.size and (data.min() < 0 or (classes and data.max() >= classes)):
            raise DataError(f"labels out of range [0, {classes})")
        body = data.astype("u1")
        dtype = "u8"
    elif kind in ("intensity", "probs"):
        body = data.astype("<f4")
        dtype = "f32"
    else:
        raise DataError(f"unsupported kind {kind!r}")
    meta = VolumeMeta(dims=tuple(data.shape), spacing=tuple(spacing),
                      dtype=dtype, kind=kind, modality=modality,
                      classes=int(classes)).validate()
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(body).tobytes())
    with open(_sidecar(path), "w") as fh:
        json.dump(asdict(meta), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return meta


def read_volume(path) -> tuple[np.ndarray, VolumeMeta]:
    """Read a body + sidecar pair; validates sizes before reshaping."""
    side = _sidecar(path)
    if not os.path.exists(side):
        raise DataError(f"missing sidecar header {side}")
    try:
        with open(side) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataError(f"{side}: invalid JSON: {e}") from None
    known = {f for f in VolumeMeta.__dataclass_fields__}  # type: ignore[attr-defined]
    extra = set(raw) - known
    if extra:
        raise DataError(f"{side}: unknown header fields {sorted(extra)}")
    try:
        meta = VolumeMeta(**raw).validate()
    except TypeError as e:
        raise DataError(f"{side}: incomplete header: {e}") from None
    dtype = _DTYPES[meta.dtype]
    expected = int(np.prod(meta.dims)) * dtype.itemsize
    actual = os.path.getsize(path)
    if actual != expected:
        raise DataError(f"{path}: body is {actual} bytes, header implies {expected}")
    data = np.fromfile(path, dtype=dtype).reshape(meta.dims)
    if meta.kind == "labels" and data.max(initial=0) >= meta.classes:
        raise DataError(f"{path}: label id {int(data.max())} exceeds "
                        f"classes {meta.classes}")
    return data, meta


def normalize_volume(data: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance float32 copy (std floored at 1e-8)."""
    data = np.asarray(data, dtype=np.float32)
    mean = float(data.mean(dtype=np.float64))
    std = float(data.std(dtype=np.float64))
    return ((data - mean) / max(std, 1e-8)).astype(np.float32)


# ---------------------------------------------------------------------------
# plane slicing


def slice_stack(volume: np.ndarray, plane: str) -> np.ndarray:
    """Stack of 2D slices swept along the plane axis.

    (X, Y, Z) -> (S, H, W) and (X, Y, Z, C) -> (S, H, W, C); the two
    in-plane axes keep their relative order.
    """
    volume = np.asarray(volume)
    if volume.ndim not in (3, 4):
        raise DataError(f"expected a 3D or 4D volume, got {volume.shape}")
    return np.ascontiguousarray(np.moveaxis(volume, plane_axis(plane), 0))


def restack_slices(slices: np.ndarray, plane: str) -> np.ndarray:
    """Exact inverse of :func:`slice_stack`."""
    slices = np.asarray(slices)
    if slices.ndim not in (3, 4):
        raise DataError(f"expected stacked slices, got {slices.shape}")
    return np.ascontiguousarray(np.moveaxis(slices, 0, plane_axis(plane)))


def predict_volume(net, images: np.ndarray, plane: str,
                   batch_size: int = 8) -> np.ndarray:
    """Class probabilities (X, Y, Z, K) from slicing a normalized
    multi-modality volume (X, Y, Z, M) along one plane."""
    from .trainer import predict_slices
    probs = predict_slices(net, slice_stack(images, plane), batch_size)
    return restack_slices(probs, plane)


def fuse_predictions(prob_volumes, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted average of probability volumes, then argmax.

    Returns (labels u8, fused probabilities).  Weights are normalized to
    sum to 1; argmax ties resolve to the lowest class id.
    """
    vols = [np.asarray(v) for v in prob_volumes]
    if not vols:
        raise ParameterError("fuse_predictions needs at least one volume")
    shape = vols[0].shape
    if len(shape) != 4:
        raise DataError(f"probability volumes must be 4D, got {shape}")
    for v in vols:
        if v.shape != shape:
            raise DataError(f"mismatched prediction shapes: {v.shape} vs {shape}")
    if weights is None:
        weights = np.ones(len(vols))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(vols),):
        raise ParameterError(f"need one weight per volume, got {weights.shape}")
    if (weights < 0).any() or weights.sum() <= 0:
        raise ParameterError("weights must be non-negative and not all zero")
    weights = weights / weights.sum()
    fused = np.zeros(shape, dtype=np.float64)
    for w, v in zip(weights, vols):
        fused += w * v
    labels = fused.argmax(axis=-1).astype("u1")
    return labels, fused.astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic subjects
#
# Concentric deformed ellipsoid shells: good enough geometry to make
# plane-wise segmentation learnable, hard enough (smooth deformation,
# bias fields, noise) that a network has something real to do.


def _smooth_field(dims, rng, waves: int = 3) -> np.ndarray:
    """Sum of a few random low-frequency cosine products, roughly in
    [-1, 1], used for shape deformation and intensity bias."""
    grids = np.meshgrid(*[np.linspace(0.0, 1.0, d) for d in dims],
                        indexing="ij", sparse=True)
    out = np.zeros(dims, dtype=np.float64)
    for _ in range(waves):
        term = np.ones(dims, dtype=np.float64)
        for g in grids:
            freq = rng.uniform(0.5, 2.5)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            term = term * np.cos(2.0 * np.pi * freq * g + phase)
        out += term
    return out / waves


def synthesize_subject(dims=(64, 64, 64), classes: int = 4, modalities: int = 3,
                       spacing=(1.0, 1.0, 1.0), seed: int = 0,
                       deform: float = 0.12, bias: float = 0.25,
                       noise: float = 0.05) -> dict:
    """One synthetic multi-modality subject with a known segmentation.

    The label field nests ``classes - 1`` shells inside an ellipsoid
    whose radius is warped by a smooth random field.  Each modality maps
    the classes to a different intensity profile, multiplied by a smooth
    bias field plus Gaussian noise, so no single threshold solves it.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 8 for d in dims):
        raise ParameterError(f"dims must be three extents >= 8, got {dims}")
    if classes < 2:
        raise ParameterError(f"classes must be >= 2, got {classes}")
    if modalities < 1:
        raise ParameterError(f"modalities must be >= 1, got {modalities}")

    shape_rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "shape")))
    center = [0.5 + shape_rng.uniform(-0.05, 0.05) for _ in range(3)]
    axes = [0.40 + shape_rng.uniform(-0.04, 0.04) for _ in range(3)]
    coords = np.meshgrid(*[(np.arange(d) + 0.5) / d for d in dims],
                         indexing="ij", sparse=True)
    rho2 = np.zeros(dims, dtype=np.float64)
    for g, c, a in zip(coords, center, axes):
        rho2 = rho2 + ((g - c) / a) ** 2
    rho = np.sqrt(rho2)
    rho = rho + deform * _smooth_field(dims, shape_rng)

    # nested shells: background outside rho 1, then equal-width shells,
    # innermost class occupying everything below the last threshold
    shells = max(classes - 2, 1)
    width = 0.5 / shells
    depth = np.clip((1.0 - rho) / width, 0.0, None)
    labels = np.where(rho >= 1.0, 0,
                      1 + np.minimum(depth.astype(np.int64), classes - 2))
    labels = labels.astype("u1")

    # one monotone class->intensity profile per modality, distinct slopes
    # and directions so modalities genuinely disagree
    profiles = []
    for m in range(modalities):
        lo = 0.08 + 0.04 * (m % 3)
        hi = 0.95 - 0.05 * (m % 3)
        ramp = np.linspace(lo, hi, classes)
        if m % 2:
            ramp = ramp[::-1]
        profiles.append(ramp)

    images = np.empty(dims + (modalities,), dtype=np.float32)
    for m in range(modalities):
        mod_rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "mod", m)))
        base = profiles[m][labels]
        field = 1.0 + bias * _smooth_field(dims, mod_rng)
        img = base * field + mod_rng.normal(0.0, noise, size=dims)
        images[..., m] = img.astype(np.float32)

    return {"images": images, "labels": labels,
            "spacing": tuple(float(s) for s in spacing)}


def generate_dataset(out_dir, subjects: int = 3, dims=(64, 64, 64),
                     classes: int = 4, modalities: int = 3,
                     spacing=(1.0, 1.0, 1.0), seed: int = 0) -> dict:
    """Write a directory of synthetic subjects plus a manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(subjects):
        sub = synthesize_subject(dims, classes, modalities, spacing,
                                 seed=derive_seed(seed, "subject", i))
        sid = f"subject{i:02d}"
        mod_files = []
        for m in range(modalities):
            fname = f"{sid}_mod{m}.vol"
            write_volume(os.path.join(out_dir, fname), sub["images"][..., m],
                         spacing, "intensity", modality=f"mod{m}")
            mod_files.append(fname)
        lab = f"{sid}_labels.vol"
        write_volume(os.path.join(out_dir, lab), sub["labels"], spacing,
                     "labels", classes=classes)
        entries.append({"id": sid, "modalities": mod_files, "labels": lab})
    manifest = {"classes": classes, "spacing": list(spacing),
                "dims": list(dims), "seed": seed, "subjects": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir) -> dict:
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise DataError(f"no manifest.json in {data_dir}")
    with open(path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid JSON: {e}") from None
    for key in ("classes", "spacing", "subjects"):
        if key not in manifest:
            raise DataError(f"{path}: missing field {key!r}")
    return manifest


def load_subject(data_dir, entry: dict, normalize: bool = True) -> dict:
    """Load one manifest entry: stacked modalities + labels + spacing."""
    mods = []
    spacing = None
    for fname in entry["modalities"]:
        data, meta = read_volume(os.path.join(data_dir, fname))
        if meta.kind != "intensity":
            raise DataError(f"{fname}: expected an intensity volume")
        mods.append(normalize_volume(data) if normalize else
                    np.asarray(data, np.float32))
        if spacing is None:
            spacing = meta.spacing
        elif meta.spacing != spacing:
            raise DataError(f"{fname}: spacing {meta.spacing} differs from "
                            f"{spacing}")
    labels, lmeta = read_volume(os.path.join(data_dir, entry["labels"]))
    if lmeta.kind != "labels":
        raise DataError(f"{entry['labels']}: expected a label volume")
    images = np.stack(mods, axis=-1)
    if labels.shape != images.shape[:3]:
        raise DataError(f"labels {labels.shape} do not match modalities "
                        f"{images.shape[:3]}")
    return {"id": entry.get("id", ""), "images": images, "labels": labels,
            "spacing": spacing, "classes": lmeta.classes}
