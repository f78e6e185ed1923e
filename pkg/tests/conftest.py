import json
import shutil
from pathlib import Path

import pytest

from wvsim import crypto
from wvsim.config import default_config_data
from wvsim.keybox import generate_keybox, save_keybox_file


def write_setup(directory: Path, seed: int | None = 42, keybox_seed: int = 100, **overrides) -> Path:
    """Keybox + config in ``directory``; returns the config path."""
    directory.mkdir(parents=True, exist_ok=True)
    kb = generate_keybox(crypto.seeded_random(keybox_seed))
    save_keybox_file(kb, directory / "keybox.bin")
    data = default_config_data(crypto.seeded_random(7))
    data.update(known_keyboxes=["keybox.bin"], deterministic_seed=seed,
                sample_size=4096, subsample_pattern=[32, 992])
    data.update(overrides)
    path = directory / "config.json"
    path.write_text(json.dumps(data, indent=2))
    return path


@pytest.fixture
def setup_dir(tmp_path):
    return write_setup(tmp_path / "run")


@pytest.fixture
def copy_setup():
    def copy(src_config: Path, dest: Path) -> Path:
        shutil.copytree(src_config.parent, dest)
        return dest / src_config.name
    return copy
