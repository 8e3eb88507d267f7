import pytest

from maskloop.manifest import load_manifest
from maskloop.synthdata import build_manifest


@pytest.fixture(scope="session")
def mini_manifest():
    """20 in-memory synthetic scenes with ground truth."""
    data, store = build_manifest(20, seed=42)
    manifest, rejects = load_manifest(data, size_filter="blueprint", image_store=store)
    assert not rejects
    assert len(manifest.instances) == 20
    return manifest
