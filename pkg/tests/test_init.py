"""Tests for the __init__.py module"""

from src.conformal_missing import __version__


class TestInit:
    """Tests for the package metadata"""

    def test_version_string(self):
        """Test the version is a dotted string"""
        assert __version__.count(".") == 2
