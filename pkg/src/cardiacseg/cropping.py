"""Stage-1 to stage-2 glue: heart detection, bounding boxes, crop and paste.

The heart region is found by thresholding the background prediction at
0.5, taking the logical NOT, and keeping the largest connected region.
The resulting box is grown by a configurable safety margin (default 15
pixels), clamped to the frame, then padded so both extents are network
friendly multiples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NoHeartDetectedError, ValidationError
from .tensor import Tensor

BG, LV, RV, MYO = 0, 1, 2, 3
CLASS_NAMES = {BG: "BG", LV: "LV", RV: "RV", MYO: "MYO"}
ANATOMY_CLASSES = (LV, RV, MYO)


@dataclass(frozen=True)
class Bbox:
    """Inclusive pixel bounds of a detected region."""

    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise DimensionError(f"degenerate bbox {self}")
        if min(self.row_min, self.col_min) < 0:
            raise DimensionError(f"negative bbox corner {self}")

    @property
    def height(self) -> int:
        return self.row_max - self.row_min + 1

    @property
    def width(self) -> int:
        return self.col_max - self.col_min + 1

    def contains(self, other: "Bbox") -> bool:
        return (
            self.row_min <= other.row_min
            and self.row_max >= other.row_max
            and self.col_min <= other.col_min
            and self.col_max >= other.col_max
        )

    def as_list(self) -> list:
        return [self.row_min, self.row_max, self.col_min, self.col_max]


@dataclass
class CropConfig:
    shift: int = 15
    connectivity: int = 8
    pad_to_multiple: int = 16

    def __post_init__(self):
        if self.shift < 0:
            raise ConfigError(f"shift must be >= 0, got {self.shift}")
        if self.connectivity not in (4, 8):
            raise ConfigError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.pad_to_multiple not in (8, 16, 32):
            raise ConfigError(f"pad_to_multiple must be 8, 16 or 32, got {self.pad_to_multiple}")


@dataclass
class LabelMap:
    """Per-pixel category map over {BG, LV, RV, MYO} with optional spacing (mm/px)."""

    labels: np.ndarray
    spacing: tuple | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise DimensionError(f"label map must be 2-D, got shape {self.labels.shape}")
        if self.labels.dtype != np.uint8:
            if not np.isin(np.unique(self.labels), (BG, LV, RV, MYO)).all():
                raise ValidationError("labels must be in {0,1,2,3}")
            self.labels = self.labels.astype(np.uint8)
        elif self.labels.size and self.labels.max() > MYO:
            raise ValidationError("labels must be in {0,1,2,3}")
        if self.spacing is not None:
            self.spacing = (float(self.spacing[0]), float(self.spacing[1]))
            if min(self.spacing) <= 0:
                raise ValidationError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    def class_mask(self, cls: int) -> np.ndarray:
        return self.labels == cls


# ---------------------------------------------------------------------------
# connected components (two-pass union-find over the raster scan)
# ---------------------------------------------------------------------------

def connected_components(mask, connectivity: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Label the foreground of a binary grid.

    Returns (labels, sizes): labels are contiguous from 1 in row-major
    first-encounter order, 0 is background, and sizes[k] is the pixel
    count of label k+1.
    """
    if connectivity not in (4, 8):
        raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got shape {mask.shape}")
    mask = mask.astype(bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    parent: list[int] = [0]  # parent[i] for provisional label i; 0 unused

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    next_label = 1
    for r in range(h):
        row = mask[r]
        lab_row = labels[r]
        up = labels[r - 1] if r > 0 else None
        for c in range(w):
            if not row[c]:
                continue
            roots = []
            if c > 0 and lab_row[c - 1]:
                roots.append(find(lab_row[c - 1]))
            if up is not None:
                if connectivity == 8:
                    for cc in range(max(c - 1, 0), min(c + 2, w)):
                        if up[cc]:
                            roots.append(find(up[cc]))
                elif up[c]:
                    roots.append(find(up[c]))
            if not roots:
                parent.append(next_label)
                lab_row[c] = next_label
                next_label += 1
            else:
                best = min(roots)
                for rt in roots:
                    if rt != best:
                        parent[rt] = best
                lab_row[c] = best

    # second pass: compress to contiguous labels in row-major discovery order
    remap: dict[int, int] = {}
    sizes: list[int] = []
    flat = labels.ravel()
    for i in range(flat.size):
        v = flat[i]
        if not v:
            continue
        root = find(v)
        new = remap.get(root)
        if new is None:
            new = len(sizes) + 1
            remap[root] = new
            sizes.append(0)
        flat[i] = new
        sizes[new - 1] += 1
    return labels, np.asarray(sizes, dtype=np.int64)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def largest_region_bbox(bg_pred, threshold: float = 0.5, cfg: CropConfig | None = None) -> Bbox:
    """Box of the largest connected region of the inverted background map.

    ``bg_pred`` is the (1,1,H,W) or (H,W) background probability; the
    foreground is everything predicted below ``threshold``.  Ties on
    region area go to the first region in row-major order.
    """
    cfg = cfg or CropConfig()
    arr = _as_array(bg_pred)
    arr = arr.reshape(arr.shape[-2:])
    fg = arr < threshold
    if not fg.any():
        raise NoHeartDetectedError("background prediction leaves no foreground pixel")
    labels, sizes = connected_components(fg, cfg.connectivity)
    best = int(np.argmax(sizes)) + 1  # argmax returns the first maximum
    rows, cols = np.nonzero(labels == best)
    return Bbox(int(rows.min()), int(rows.max()), int(cols.min()), int(cols.max()))


def _pad_axis(lo: int, hi: int, limit: int, multiple: int) -> tuple[int, int]:
    """Grow [lo,hi] symmetrically (clamped) until its extent is a multiple."""
    need = (-(hi - lo + 1)) % multiple
    lo -= need // 2
    hi += need - need // 2
    if lo < 0:
        hi += -lo
        lo = 0
    if hi > limit - 1:
        lo -= hi - (limit - 1)
        hi = limit - 1
    return max(lo, 0), hi


def expand_clamp(b: Bbox, cfg: CropConfig, height: int, width: int) -> Bbox:
    """Add the safety margin, clamp to the frame, then pad extents to a multiple."""
    if b.row_max >= height or b.col_max >= width:
        raise DimensionError(f"bbox {b} exceeds frame {height}x{width}")
    r0 = max(b.row_min - cfg.shift, 0)
    r1 = min(b.row_max + cfg.shift, height - 1)
    c0 = max(b.col_min - cfg.shift, 0)
    c1 = min(b.col_max + cfg.shift, width - 1)
    r0, r1 = _pad_axis(r0, r1, height, cfg.pad_to_multiple)
    c0, c1 = _pad_axis(c0, c1, width, cfg.pad_to_multiple)
    return Bbox(r0, r1, c0, c1)


def crop_and_binarize(image, stage1_pred, b: Bbox) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Crop the intensity image and binarize the four-channel prediction inside the box.

    Per-pixel class is the argmax over the four sigmoid channels; ties
    go to the lowest channel index, so background wins a full tie.
    Returns (crop, init_lv, init_rv, init_myo) as (1,1,h,w) tensors.
    """
    img = _as_array(image)
    pred = _as_array(stage1_pred)
    if pred.ndim != 4 or pred.shape[:2] != (1, 4):
        raise DimensionError(f"stage-1 prediction must be (1,4,H,W), got {pred.shape}")
    img2d = img.reshape(img.shape[-2:])
    if img2d.shape != pred.shape[2:]:
        raise DimensionError(f"image {img2d.shape} does not match prediction {pred.shape[2:]}")
    rows = slice(b.row_min, b.row_max + 1)
    cols = slice(b.col_min, b.col_max + 1)
    crop = img2d[rows, cols][None, None]
    classes = np.argmax(pred[0, :, rows, cols], axis=0)
    outs = [Tensor(crop.astype(img2d.dtype))]
    for cls in ANATOMY_CLASSES:
        outs.append(Tensor((classes == cls)[None, None].astype(img2d.dtype)))
    return tuple(outs)


def paste_back(m_lv, m_rv, m_myo, b: Bbox, height: int, width: int) -> LabelMap:
    """Assemble a full-frame label map from refined per-anatomy crops.

    Pixels outside the box are background.  Inside, a pixel takes the
    anatomy with the highest score at or above 0.5; full ties follow the
    order LV < RV < MYO; everything below 0.5 is background.
    """
    crops = [np.asarray(_as_array(m)).reshape(-1, *_as_array(m).shape[-2:])[0] for m in (m_lv, m_rv, m_myo)]
    if any(c.shape != (b.height, b.width) for c in crops):
        raise DimensionError(
            f"crop shapes {[c.shape for c in crops]} do not match bbox extent {(b.height, b.width)}"
        )
    if b.row_max >= height or b.col_max >= width:
        raise DimensionError(f"bbox {b} exceeds frame {height}x{width}")
    stack = np.stack(crops)  # (3, h, w)
    winner = np.argmax(stack, axis=0)  # first max wins ties: LV < RV < MYO
    confident = stack.max(axis=0) >= 0.5
    inside = np.where(confident, winner + 1, BG).astype(np.uint8)
    full = np.full((height, width), BG, dtype=np.uint8)
    full[b.row_min : b.row_max + 1, b.col_min : b.col_max + 1] = inside
    return LabelMap(full)


def bbox_log_line(case_id: str, b: Bbox, fallback: bool) -> str:
    """One JSON-lines record of a detection result."""
    return json.dumps({"id": case_id, "bbox": b.as_list(), "fallback": bool(fallback)})
