from __future__ import annotations

import pytest

from osmap_extractor.backends import load_bundle
from osmap_extractor.config import ExtractorConfig
from osmap_extractor.fixtures import make_fixtures


@pytest.fixture(scope="session")
def config():
    return ExtractorConfig()


@pytest.fixture(scope="session")
def bundle(config):
    return load_bundle(config)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("rgbd")
    make_fixtures(path, n_frames=5, seed=3)
    return path


@pytest.fixture(scope="session")
def fixture_scene(fixture_dir):
    import json
    return json.loads((fixture_dir / "scene.json").read_text())
