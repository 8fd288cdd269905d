"""Input validation for the public array-facing entry points."""
from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError, InvalidPromptError
from .model import PromptSet


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Coerce an image stack to float32 ``(N, 3, H, W)`` in ``[0, 1]``.

    Accepts grayscale ``(N, H, W)``, channel-first ``(N, 1|3, H, W)`` and
    channel-last ``(N, H, W, 1|3)``; uint8 input is rescaled by 1/255.
    """
    arr = np.asarray(X)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif arr.dtype.kind not in "fiub":
        raise ConfigurationError(f"images must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(np.float32, copy=False)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise ConfigurationError(f"expected a 3-D or 4-D image stack, got shape {arr.shape}")
    if arr.shape[1] not in (1, 3) and arr.shape[-1] in (1, 3):
        arr = np.moveaxis(arr, -1, 1)
    if arr.shape[1] == 1:
        arr = np.repeat(arr, 3, axis=1)
    if arr.shape[1] != 3:
        raise ConfigurationError(f"images need 1 or 3 channels, got shape {arr.shape}")
    if len(arr) == 0:
        raise ConfigurationError("empty image stack")
    if not np.isfinite(arr).all():
        raise ConfigurationError("images contain NaN or infinity")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ConfigurationError("image intensities must lie in [0, 1]")
    if image_size is not None and arr.shape[2:] != (image_size, image_size):
        raise ConfigurationError(f"images must be {image_size}x{image_size}, got {arr.shape[2:]}")
    return np.ascontiguousarray(arr)


def check_masks(y, n: int | None = None, shape=None) -> np.ndarray:
    """Binary masks as uint8 ``(N, H, W)``."""
    m = np.asarray(y)
    if m.ndim == 4 and m.shape[1] == 1:
        m = m[:, 0]
    if m.ndim != 3:
        raise ConfigurationError(f"masks must be (N, H, W), got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ConfigurationError("masks must be binary")
    if n is not None and len(m) != n:
        raise ConfigurationError(f"got {len(m)} masks for {n} images")
    if shape is not None and m.shape[1:] != tuple(shape):
        raise ConfigurationError(f"mask shape {m.shape[1:]} does not match image shape {tuple(shape)}")
    return m.astype(np.uint8)


def check_prompts(prompts, n: int, image_size: int) -> PromptSet:
    """Accept a :class:`PromptSet`, an ``(N, K, 2)`` point array or an ``(N, 4)`` box array."""
    if not isinstance(prompts, PromptSet):
        arr = np.asarray(prompts, dtype=np.float64)
        if arr.ndim == 3 and arr.shape[-1] == 2:
            prompts = PromptSet.from_points(arr)
        elif arr.ndim == 2 and arr.shape[-1] == 4:
            prompts = PromptSet.from_box(arr)
        else:
            raise InvalidPromptError(f"cannot interpret prompt array of shape {arr.shape}")
    prompts.validate(image_size)
    if prompts.batch_size != n:
        raise InvalidPromptError(f"got {prompts.batch_size} prompts for {n} images")
    return prompts
