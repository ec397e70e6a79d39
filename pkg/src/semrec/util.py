"""Shared plumbing: deterministic seeding, canonical hashing, array serialization.

Every artifact this package writes must be byte-identical across reruns with
the same seed and config, so nothing here may embed timestamps or rely on
dict iteration order of unsorted inputs.
"""

import hashlib
import io
import json
import os
from pathlib import Path

import numpy as np
import torch

ARRAY_MAGIC = b"SRARR1\n"


def derive_seed(seed: int, name: str) -> int:
    """Stable per-component seed so adding/removing one module never shifts
    the init stream of another."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**31 - 1)


def seed_component(seed: int, name: str) -> None:
    """Seed torch's global generator for constructing one component."""
    torch.manual_seed(derive_seed(seed, name))


def np_generator(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name))


def set_deterministic(workers: int = 1) -> None:
    """workers == 1 pins torch to one thread; results are then reproducible
    bit-for-bit on the same platform."""
    if workers == 1:
        torch.set_num_threads(1)
    else:
        torch.set_num_threads(workers)


def save_arrays(path, arrays: dict) -> None:
    """Write named numpy arrays to one file, deterministically.

    npz embeds zip timestamps, so reruns would differ byte-wise; this flat
    container (magic, JSON header, C-order payloads) does not.
    """
    path = Path(path)
    entries = []
    payload = io.BytesIO()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        payload.write(arr.tobytes())
    header = json.dumps(entries, sort_keys=True).encode() + b"\n"
    with open(path, "wb") as f:
        f.write(ARRAY_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        f.write(payload.getvalue())


def load_arrays(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(len(ARRAY_MAGIC))
        if magic != ARRAY_MAGIC:
            raise ValueError(f"{path}: not an array container file")
        header_len = int.from_bytes(f.read(8), "little")
        entries = json.loads(f.read(header_len).decode())
        out = {}
        for e in entries:
            arr = np.frombuffer(
                f.read(int(np.prod(e["shape"], dtype=np.int64)) * np.dtype(e["dtype"]).itemsize),
                dtype=e["dtype"],
            )
            out[e["name"]] = arr.reshape(e["shape"]).copy()
    return out


def state_dict_hash(state: dict) -> str:
    """Canonical sha256 of a parameter dict (torch tensors or numpy arrays).

    Hashes sorted names plus raw little-endian bytes; unlike hashing a
    torch.save file it ignores serialization metadata.
    """
    h = hashlib.sha256()
    for name in sorted(state):
        value = state[name]
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(value)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> None:
    """Sorted-key JSON with trailing newline; stable bytes for fixed content."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)


def env_data_root() -> Path:
    return Path(os.environ.get("SEMREC_DATA_ROOT", "."))
