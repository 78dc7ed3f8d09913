"""
PNG reading/writing and figure grids.
"""

from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import torch
from PIL import Image

# face, hair, clothes, background
LABEL_PALETTE = np.array(
    [[0.90, 0.65, 0.50], [0.35, 0.20, 0.10], [0.20, 0.35, 0.75], [0.55, 0.75, 0.55]],
    dtype=np.float32,
)
SLOT_PALETTE = np.array(
    [
        [0.89, 0.10, 0.11], [0.22, 0.49, 0.72], [0.30, 0.69, 0.29], [0.60, 0.31, 0.64],
        [1.00, 0.50, 0.00], [1.00, 1.00, 0.20], [0.65, 0.34, 0.16], [0.97, 0.51, 0.75],
    ],
    dtype=np.float32,
)


def to_numpy_image(image: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """Return an H×W×C float array from an H×W×C array or a C×H×W tensor."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().float()
        if image.dim() == 3 and image.shape[0] in (1, 3):
            image = image.permute(1, 2, 0)
        image = image.numpy()
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[..., None]
    return image


def to_uint8(image: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """Image in [0, 1] as 8-bit levels (value·255, rounded)."""
    array = to_numpy_image(image)
    return np.clip(np.rint(np.clip(array, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def quantize_8bit(image: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """The float image ``load_png`` would return after ``save_png``."""
    return to_uint8(image).astype(np.float32) / 255.0


def save_png(path: Union[str, Path], image: Union[np.ndarray, torch.Tensor]) -> Path:
    """Write an image in [0, 1] as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = to_uint8(image)
    if array.shape[-1] == 1:
        array = array[..., 0]
    Image.fromarray(array).save(path)
    return path


def load_png(path: Union[str, Path]) -> np.ndarray:
    """Read a PNG as an H×W×3 float32 array in [0, 1]."""
    with Image.open(path) as img:
        array = np.asarray(img.convert("RGB"), dtype=np.float32)
    return array / 255.0


def colorize_labels(labels: np.ndarray, palette: np.ndarray = LABEL_PALETTE) -> np.ndarray:
    """Map an integer label map to RGB."""
    labels = np.asarray(labels)
    return palette[np.mod(labels, len(palette))]


def make_grid(images: Sequence[Union[np.ndarray, torch.Tensor]], padding: int = 2,
              pad_value: float = 1.0) -> np.ndarray:
    """Concatenate same-height images horizontally with a separator."""
    arrays: List[np.ndarray] = []
    for image in images:
        array = to_numpy_image(image)
        if array.shape[-1] == 1:
            array = np.repeat(array, 3, axis=-1)
        arrays.append(array)
    height = max(a.shape[0] for a in arrays)
    columns = []
    for i, array in enumerate(arrays):
        if array.shape[0] != height:
            raise ValueError("make_grid expects images of equal height")
        columns.append(array)
        if i < len(arrays) - 1 and padding:
            columns.append(np.full((height, padding, 3), pad_value, dtype=np.float32))
    return np.concatenate(columns, axis=1)


def stack_rows(rows: Sequence[np.ndarray], padding: int = 2, pad_value: float = 1.0) -> np.ndarray:
    """Stack grid rows vertically, right-padding narrower rows."""
    width = max(r.shape[1] for r in rows)
    out = []
    for i, row in enumerate(rows):
        if row.shape[1] < width:
            filler = np.full((row.shape[0], width - row.shape[1], 3), pad_value, dtype=np.float32)
            row = np.concatenate([row, filler], axis=1)
        out.append(row)
        if i < len(rows) - 1 and padding:
            out.append(np.full((padding, width, 3), pad_value, dtype=np.float32))
    return np.concatenate(out, axis=0)
