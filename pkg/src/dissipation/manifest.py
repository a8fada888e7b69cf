"""Reproducibility manifest written next to every campaign's artifacts.

The manifest ("manifest-v1") records the campaign identity, the seed, a
content hash of the model document, the full parameter echo, the code
version, UTC start/finish timestamps, and a sha256 for every output
file.  The campaign id is a UUID5 over the run inputs, so identical
(command, model, params, seed, code version) always name the same
campaign.  Timestamps are informational; byte-level reproducibility is
claimed for the data artifacts, not for the manifest itself.
"""

import hashlib
import json
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

SCHEMA_VERSION = "manifest-v1"
RNG_DECLARATION = "counter-based splittable, keyed by (seed, replica, step, site)"

_NAMESPACE = uuid.uuid5(uuid.NAMESPACE_URL, "dissipation-toolkit")


class ManifestError(ValueError):
    """Malformed or failed-verification manifest."""


def canonical_json(doc) -> str:
    """Deterministic JSON encoding: sorted keys, no whitespace variance."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def content_hash(doc) -> str:
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    seed: int
    model_hash: str
    params: dict
    campaign_id: str = ""
    code_version: str = __version__
    started_at: str = ""
    finished_at: str = ""
    outputs: list = field(default_factory=list)   # [{"path", "sha256"}]

    def add_output(self, path, base_dir=None) -> None:
        """Hash a finished artifact; paths are stored relative to base_dir."""
        p = Path(path)
        name = str(p.relative_to(base_dir)) if base_dir is not None else p.name
        self.outputs.append({"path": name, "sha256": file_hash(p)})


def start_manifest(command: str, seed: int, model_doc,
                   params: dict) -> RunManifest:
    """Open a manifest before any randomness is drawn.

    The campaign id and the seed are fixed here, ahead of the compute
    call, so a crashed run can still be identified and re-run.
    """
    model_hash = content_hash(model_doc)
    identity = canonical_json({
        "command": command,
        "seed": seed,
        "modelHash": model_hash,
        "params": params,
        "codeVersion": __version__,
    })
    return RunManifest(
        command=command,
        seed=seed,
        model_hash=model_hash,
        params=params,
        campaign_id=str(uuid.uuid5(_NAMESPACE, identity)),
        started_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def write_manifest(manifest: RunManifest, path) -> None:
    manifest.finished_at = datetime.now(
        timezone.utc).isoformat(timespec="seconds")
    doc = {
        "schemaVersion": SCHEMA_VERSION,
        "campaignId": manifest.campaign_id,
        "command": manifest.command,
        "seed": manifest.seed,
        "modelHash": manifest.model_hash,
        "params": manifest.params,
        "codeVersion": manifest.code_version,
        "rng": RNG_DECLARATION,
        "startedAt": manifest.started_at,
        "finishedAt": manifest.finished_at,
        "outputs": manifest.outputs,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"invalid JSON in {path}: {exc}") from None
    if doc.get("schemaVersion") != SCHEMA_VERSION:
        raise ManifestError(
            f"unsupported manifest schema {doc.get('schemaVersion')!r}")
    return doc


def verify_manifest(path) -> dict:
    """Check that every listed output exists and matches its hash.

    Output paths are resolved relative to the manifest's directory.
    Returns {"ok", "checked", "missing", "mismatched"}.
    """
    doc = load_manifest(path)
    base = Path(path).parent
    missing, mismatched = [], []
    for entry in doc["outputs"]:
        target = base / entry["path"]
        if not target.exists():
            missing.append(entry["path"])
        elif file_hash(target) != entry["sha256"]:
            mismatched.append(entry["path"])
    return {
        "ok": not missing and not mismatched,
        "checked": len(doc["outputs"]),
        "missing": missing,
        "mismatched": mismatched,
    }
