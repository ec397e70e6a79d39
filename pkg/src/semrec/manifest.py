"""Run manifests: every artifact directory records the command, config, seed,
and hashed inputs that produced it, so any reported number can be traced back
and reproduced."""

import dataclasses
import datetime
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .util import file_hash, read_json, write_json

MANIFEST_NAME = "manifest.json"


def hash_tree(path) -> str:
    """Stable content hash of a file, or of a directory's files by sorted
    relative name. Manifests themselves are excluded so hashes do not depend
    on when an input was produced."""
    path = Path(path)
    if path.is_file():
        return file_hash(path)
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.name != MANIFEST_NAME:
            h.update(p.relative_to(path).as_posix().encode())
            h.update(bytes.fromhex(file_hash(p)))
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    code_version: str
    created_at: str
    inputs: dict = field(default_factory=dict)        # name -> path string
    input_hashes: dict = field(default_factory=dict)  # name -> content hash
    dataset_hash: str = ""
    artifacts: list = field(default_factory=list)     # relative file names

    def to_dict(self):
        return dataclasses.asdict(self)


def write_manifest(out_dir, command: str, config: dict, seed: int,
                   inputs: dict = None, artifacts: list = None) -> RunManifest:
    out_dir = Path(out_dir)
    inputs = {k: Path(v) for k, v in (inputs or {}).items()}
    hashes = {k: hash_tree(v) for k, v in inputs.items()}
    manifest = RunManifest(
        command=command, seed=seed, config=config, code_version=__version__,
        created_at=datetime.datetime.now(datetime.timezone.utc).isoformat(),
        inputs={k: str(v) for k, v in inputs.items()},
        input_hashes=hashes,
        dataset_hash=hashes.get("data", ""),
        artifacts=sorted(artifacts if artifacts is not None else
                         [p.name for p in out_dir.iterdir()
                          if p.is_file() and p.name != MANIFEST_NAME]))
    write_json(out_dir / MANIFEST_NAME, manifest.to_dict())
    return manifest


def read_manifest(dir_path) -> dict:
    return read_json(Path(dir_path) / MANIFEST_NAME)
