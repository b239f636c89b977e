"""Anomaly-map post-processing.

Turns a raw voxel-wise anomaly map into candidate lesion instances:
Otsu threshold inside a region of interest, binary opening and closing,
hole filling, connected-component labeling, and removal of instances too
small to be plausible lesions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volgrid import BinaryMask, Volume, VolumeError


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return np.ones((3, 3, 3), dtype=bool)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def otsu_threshold(vol: Volume, roi: BinaryMask | None = None, bins: int = 256) -> float:
    """Threshold maximizing between-class variance of the binned histogram.

    The histogram covers only voxels inside roi when given.  Ties resolve
    to the lowest threshold.
    """
    if bins < 2:
        raise ValueError("need at least 2 histogram bins")
    if roi is not None:
        if not Volume.same_geometry(vol, roi):
            raise VolumeError("ROI geometry does not match the map")
        values = vol.data[roi.data.astype(bool)]
        if values.size == 0:
            raise ValueError("empty ROI")
    else:
        values = vol.data.ravel()
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        raise ValueError("degenerate histogram: map is constant over the ROI")

    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    hist = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(hist)[:-1]            # class weights for cuts after bin k
    w1 = hist.sum() - w0
    s0 = np.cumsum(hist * centers)[:-1]
    s_total = float((hist * centers).sum())
    valid = (w0 > 0) & (w1 > 0)
    sigma_b = np.full(bins - 1, -np.inf)
    mu0 = np.divide(s0, w0, out=np.zeros_like(s0), where=valid)
    mu1 = np.divide(s_total - s0, w1, out=np.zeros_like(s0), where=valid)
    sigma_b[valid] = (w0 * w1 * (mu0 - mu1) ** 2)[valid]
    k = int(np.argmax(sigma_b))          # first maximum = lowest threshold
    return float(edges[k + 1])


def binarize(vol: Volume, threshold: float) -> BinaryMask:
    """Voxels at or above the threshold become foreground."""
    return BinaryMask((vol.data >= threshold).astype(np.uint8), vol.spacing, vol.origin)


def erode(mask: BinaryMask, radius: int = 1, connectivity: int = 6) -> BinaryMask:
    """Binary erosion; voxels outside the grid count as background."""
    out = ndimage.binary_erosion(mask.data.astype(bool), _structure(connectivity),
                                 iterations=radius, border_value=0)
    return BinaryMask(out.astype(np.uint8), mask.spacing, mask.origin)


def dilate(mask: BinaryMask, radius: int = 1, connectivity: int = 6) -> BinaryMask:
    out = ndimage.binary_dilation(mask.data.astype(bool), _structure(connectivity),
                                  iterations=radius, border_value=0)
    return BinaryMask(out.astype(np.uint8), mask.spacing, mask.origin)


def open_close(mask: BinaryMask, radius: int = 1, connectivity: int = 6) -> BinaryMask:
    """Opening (erode, dilate) then closing (dilate, erode), one pass each."""
    opened = dilate(erode(mask, radius, connectivity), radius, connectivity)
    return erode(dilate(opened, radius, connectivity), radius, connectivity)


def fill_holes(mask: BinaryMask, connectivity: int = 6) -> BinaryMask:
    """Fill background regions not connected to the grid boundary."""
    out = ndimage.binary_fill_holes(mask.data.astype(bool), _structure(connectivity))
    return BinaryMask(out.astype(np.uint8), mask.spacing, mask.origin)


@dataclass(frozen=True)
class ComponentSet:
    """Labeled foreground instances plus their geometry.

    labels holds one u32 id per voxel, 0 for background, ids contiguous
    1..N in first-voxel scan order.
    """

    labels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise VolumeError(f"label grid must be 3D, got shape {labels.shape}")
        labels = labels.astype(np.uint32)
        present = np.unique(labels)
        n = int(labels.max())
        if not np.array_equal(present[present > 0], np.arange(1, n + 1)):
            raise VolumeError("component labels must be contiguous 1..N")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def n_components(self) -> int:
        return int(self.labels.max())

    @property
    def counts(self) -> np.ndarray:
        """Voxel count per component, index 0 -> label 1."""
        return np.bincount(self.labels.ravel(), minlength=self.n_components + 1)[1:]

    @property
    def volumes_mm3(self) -> np.ndarray:
        sx, sy, sz = self.spacing
        return self.counts * (sx * sy * sz)

    @property
    def equivalent_diameters_mm(self) -> np.ndarray:
        return np.cbrt(6.0 * self.volumes_mm3 / np.pi)

    @property
    def bounding_boxes(self) -> np.ndarray:
        """(N, 6) int array of [x0, y0, z0, x1, y1, z1), half-open."""
        boxes = np.zeros((self.n_components, 6), dtype=np.int64)
        for i, sl in enumerate(ndimage.find_objects(self.labels.astype(np.int64))):
            boxes[i] = [sl[0].start, sl[1].start, sl[2].start,
                        sl[0].stop, sl[1].stop, sl[2].stop]
        return boxes

    def component_mask(self, label: int) -> np.ndarray:
        if not 1 <= label <= self.n_components:
            raise ValueError(f"label {label} out of range 1..{self.n_components}")
        return self.labels == label

    def to_mask(self) -> BinaryMask:
        return BinaryMask((self.labels > 0).astype(np.uint8), self.spacing, self.origin)


def connected_components(mask: BinaryMask, connectivity: int = 26) -> ComponentSet:
    """Label foreground instances; ids follow first-voxel scan order."""
    labels, _ = ndimage.label(mask.data.astype(bool), structure=_structure(connectivity))
    return ComponentSet(labels, mask.spacing, mask.origin)


def filter_small(components: ComponentSet, min_voxels: int = 20,
                 min_diameter_mm: float = 3.0) -> ComponentSet:
    """Keep components with count >= min_voxels and equivalent spherical
    diameter >= min_diameter_mm; surviving labels re-compact in order."""
    keep = (components.counts >= min_voxels) & \
           (components.equivalent_diameters_mm >= min_diameter_mm)
    remap = np.zeros(components.n_components + 1, dtype=np.uint32)
    remap[1:][keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.uint32)
    return ComponentSet(remap[components.labels], components.spacing, components.origin)


def extract_instances(anomaly: Volume, roi: BinaryMask | None = None, bins: int = 256,
                      morph_radius: int = 1, morph_connectivity: int = 6,
                      component_connectivity: int = 26, min_voxels: int = 20,
                      min_diameter_mm: float = 3.0) -> ComponentSet:
    """Full chain: threshold, open/close, fill holes, label, drop small."""
    thr = otsu_threshold(anomaly, roi, bins)
    mask = binarize(anomaly, thr)
    if roi is not None:
        mask = BinaryMask(mask.data * roi.data, mask.spacing, mask.origin)
    mask = fill_holes(open_close(mask, morph_radius, morph_connectivity))
    comps = connected_components(mask, component_connectivity)
    return filter_small(comps, min_voxels, min_diameter_mm)
