"""8-bit PNG image I/O.

Internal images are [H, W, 3] float tensors in linear [0, 1]; conversion to
and from disk is a plain /255 with round-half-up quantization (no gamma),
matching common avatar-pipeline practice.
"""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image


def save_image(path, image: torch.Tensor) -> None:
    arr = image.detach().cpu().numpy()
    arr = np.clip(arr, 0.0, 1.0)
    data = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image(path, dtype=torch.float32) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(arr).to(dtype)
