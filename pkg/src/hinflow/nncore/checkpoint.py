"""Model checkpoints on top of the shared container format.

The header carries the model kind tag ("planner" / "policy"), the named
parameter list with shapes, the hyperparameter block, and the RNG state at
save time; parameter arrays follow in header order, bit-exact.
"""

from __future__ import annotations

from ..container import read_container, write_container
from ..errors import DataError
from .tensor import Tensor

CHECKPOINT_VERSION = 1


def save_checkpoint(path, kind: str, params: dict, hyper: dict, rng_state=None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "hyper": hyper,
        "rng_state": rng_state,
    }
    write_container(path, header, {name: p.data for name, p in params.items()})


def load_checkpoint(path):
    """Returns (kind, params {name: Tensor}, hyper, rng_state)."""
    header, arrays = read_container(path)
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    params = {name: Tensor(a, requires_grad=True) for name, a in arrays.items()}
    return header["kind"], params, header.get("hyper", {}), header.get("rng_state")
