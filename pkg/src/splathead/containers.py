"""Named-array container files.

All persistent array data (head assets, Gaussian sets, conditioning caches,
textures, trackings) is stored as uncompressed NPZ: a zip of little-endian
numpy arrays addressed by name.  Every container carries two bookkeeping
entries:

* ``__container_version__``: int64 scalar, currently 1
* ``__kind__``: a short ASCII tag identifying the schema (``head_model``,
  ``gaussian_set``, ``conditioning``, ...)

Readers reject unknown versions and, when asked, wrong kinds.  The per-kind
schemas (array names, shapes, dtypes) are documented in the README.
"""

from __future__ import annotations

import os

import numpy as np

CONTAINER_VERSION = 1


class ContainerError(RuntimeError):
    pass


def save_arrays(path, arrays: dict, kind: str) -> None:
    """Write ``arrays`` (name -> ndarray/scalar) to ``path`` as versioned NPZ."""
    payload = {}
    for name, value in arrays.items():
        if name.startswith("__"):
            raise ContainerError(f"reserved array name: {name!r}")
        payload[name] = np.asarray(value)
    payload["__container_version__"] = np.int64(CONTAINER_VERSION)
    payload["__kind__"] = np.bytes_(kind.encode("ascii"))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        np.savez(f, **payload)
    os.replace(tmp, path)


def load_arrays(path, kind: str | None = None) -> dict:
    """Load a container, optionally checking its kind tag."""
    with np.load(path, allow_pickle=False) as data:
        if "__container_version__" not in data:
            raise ContainerError(f"{path}: not a versioned container")
        version = int(data["__container_version__"])
        if version != CONTAINER_VERSION:
            raise ContainerError(
                f"{path}: container version {version} unsupported "
                f"(expected {CONTAINER_VERSION})"
            )
        found_kind = bytes(data["__kind__"]).decode("ascii")
        if kind is not None and found_kind != kind:
            raise ContainerError(f"{path}: kind {found_kind!r}, expected {kind!r}")
        return {
            name: data[name]
            for name in data.files
            if not name.startswith("__")
        }


def container_kind(path) -> str:
    with np.load(path, allow_pickle=False) as data:
        return bytes(data["__kind__"]).decode("ascii")
