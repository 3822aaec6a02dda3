# artifacts.py
"""
Canonical JSON/CSV writers and per-stage manifests.

Every stage writes its outputs plus a ``manifest.json`` holding the config
hash, hashes of inputs and outputs, and the dataset lineage the artifact
descends from. The manifest id is embedded into JSON outputs as
``provenance``.
"""

import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from pydantic import BaseModel, Field

from errors import MissingArtifact, ProvenanceMismatch

logger = logging.getLogger(__name__)

CODE_VERSION = "0.3.0"
MANIFEST_NAME = "manifest.json"


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path: Path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj), encoding="utf-8")
    return path


def read_json(path: Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path)
    return json.loads(path.read_text(encoding="utf-8"))


def fmt(v: Any) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, int)) and not isinstance(v, float):
        return str(int(v))
    return "%.17g" % float(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path: Path) -> Tuple[List[str], List[List[str]]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        return [], []
    return rows[0], rows[1:]


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_hash(cfg: Any) -> str:
    if isinstance(cfg, BaseModel):
        cfg = cfg.model_dump(mode="json")
    return sha256_text(canonical_json(cfg))


# -------------------------
# Manifests
# -------------------------
class Manifest(BaseModel):
    stage: str
    config_hash: str
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    # dataset id this artifact descends from; None for closed-form artifacts
    lineage: Optional[str] = None
    code_version: str = CODE_VERSION
    extra: Dict[str, Any] = Field(default_factory=dict)

    @property
    def id(self) -> str:
        body = self.model_dump(mode="json", exclude={"outputs"})
        return sha256_text(canonical_json(body))[:16]


def begin_manifest(stage: str, cfg: Any, inputs: Optional[Dict[str, Path]] = None,
                   lineage: Optional[str] = None, **extra: Any) -> Manifest:
    hashed = {}
    for name, p in (inputs or {}).items():
        if not Path(p).exists():
            raise MissingArtifact(p)
        hashed[name] = sha256_file(Path(p))
    return Manifest(stage=stage, config_hash=config_hash(cfg), inputs=hashed, lineage=lineage, extra=extra)


def finish_manifest(manifest: Manifest, out_dir: Path, outputs: Sequence[Path]) -> Path:
    out_dir = Path(out_dir)
    manifest.outputs = {Path(p).name: sha256_file(Path(p)) for p in outputs}
    body = manifest.model_dump(mode="json")
    body["id"] = manifest.id
    path = write_json(out_dir / MANIFEST_NAME, body)
    logger.info("%s: wrote %d output(s) to %s (id %s)", manifest.stage, len(outputs), out_dir, manifest.id)
    return path


def load_manifest(directory: Path) -> Manifest:
    d = read_json(Path(directory) / MANIFEST_NAME)
    d.pop("id", None)
    return Manifest.model_validate(d)


def check_lineage(manifests: Dict[str, Manifest]) -> Optional[str]:
    """All dataset-derived artifacts must share one lineage."""
    lineages = {name: m.lineage for name, m in manifests.items() if m.lineage is not None}
    distinct = set(lineages.values())
    if len(distinct) > 1:
        raise ProvenanceMismatch(f"Artifacts descend from different datasets: {lineages}")
    return next(iter(distinct), None)
