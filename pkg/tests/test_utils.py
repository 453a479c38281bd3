"""Tests for utility functions."""

from pathlib import Path
from unittest.mock import patch

import pytest
import yaml

from src import __version__
from src.utils import MANIFEST_NAME, code_version, derive_seed, write_manifest, write_yaml


class TestDeriveSeed:
    """Test derive_seed function."""

    def test_deterministic(self) -> None:
        """Test the same path gives the same seed."""
        assert derive_seed(2024, 3, 1, "aug") == derive_seed(2024, 3, 1, "aug")

    def test_path_sensitive(self) -> None:
        """Test order and labels change the seed."""
        seeds = {derive_seed(1, 2), derive_seed(2, 1), derive_seed(1, 2, "aug")}
        assert len(seeds) == 3

    def test_range(self) -> None:
        """Test seeds fit in 32 bits."""
        assert 0 <= derive_seed(7, "init") < 2**32

    def test_negative_part(self) -> None:
        """Test error for a negative part."""
        with pytest.raises(ValueError, match="non-negative"):
            derive_seed(1, -1)


class TestCodeVersion:
    """Test code_version function."""

    def test_without_git(self) -> None:
        """Test the package version alone when git is unavailable."""
        with patch("src.utils.subprocess.run", side_effect=FileNotFoundError("git")):
            assert code_version() == __version__

    def test_with_revision(self) -> None:
        """Test the git revision is appended."""
        with patch("src.utils.subprocess.run") as run:
            run.return_value.stdout = "abc1234\n"
            assert code_version() == f"{__version__}+abc1234"


class TestWriteManifest:
    """Test write_yaml and write_manifest functions."""

    def test_write_yaml_keeps_order(self, tmp_path: Path) -> None:
        """Test keys are written in insertion order."""
        path = write_yaml(tmp_path / "sub" / "out.yaml", {"b": 1, "a": 2})
        assert path.read_text(encoding="utf-8") == "b: 1\na: 2\n"

    def test_manifest_fields(self, tmp_path: Path) -> None:
        """Test the manifest records the run's provenance."""
        path = write_manifest(
            tmp_path, "train", {"train": {"seed": 5}}, seed=5, extra={"artifacts": ["x.csv"]}
        )
        assert path == tmp_path / MANIFEST_NAME
        with open(path, encoding="utf-8") as f:
            manifest = yaml.safe_load(f)
        assert manifest["command"] == "train"
        assert manifest["seed"] == 5
        assert manifest["config"] == {"train": {"seed": 5}}
        assert manifest["artifacts"] == ["x.csv"]
        for key in ("code_version", "python", "numpy", "created_at"):
            assert key in manifest
