"""Common utility functions."""

import logging
import platform
import subprocess
import zlib
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np
import yaml

from src import __version__

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.yaml"


def derive_seed(*parts: Union[int, str]) -> int:
    """
    Derive a 32-bit seed from a path of integers and labels.

    Example: ``derive_seed(2024, epoch, batch, "aug")``. Strings are hashed
    with CRC32 so the result is stable across processes.
    """
    entropy = [p if isinstance(p, int) else zlib.crc32(p.encode("utf-8")) for p in parts]
    if any(e < 0 for e in entropy):
        raise ValueError(f"Seed parts must be non-negative, got {parts}")
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def code_version() -> str:
    """Package version, suffixed with the git revision when one is available."""
    try:
        revision = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True,
            text=True,
            check=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        revision = ""
    return f"{__version__}+{revision}" if revision else __version__


def write_yaml(path: Union[str, Path], payload: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(dict(payload), f, sort_keys=False)
    return path


def write_manifest(
    output_dir: Union[str, Path],
    command: str,
    config: Mapping[str, Any],
    seed: int,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write the run manifest next to a command's artifacts.

    Args:
        output_dir: Directory of the run
        command: CLI command that produced the run
        config: Snapshot of the effective configuration
        seed: Root seed of the run
        extra: Additional fields (artifact names, counts)

    Returns:
        Path of the manifest file
    """
    manifest: Dict[str, Any] = {
        "command": command,
        "seed": seed,
        "code_version": code_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "config": dict(config),
    }
    if extra:
        manifest.update(extra)
    path = write_yaml(Path(output_dir) / MANIFEST_NAME, manifest)
    logger.info("Wrote manifest to %s", path)
    return path
