import os
import pathlib

import pytest


@pytest.fixture(scope="session")
def source_dir():
    return pathlib.Path(os.environ.get("CALSEG_SOURCE_DIR", pathlib.Path(__file__).resolve().parents[2]))


@pytest.fixture(scope="session")
def calseg_exe():
    exe = os.environ.get("CALSEG_EXE")
    if not exe or not pathlib.Path(exe).exists():
        pytest.skip("CALSEG_EXE not set")
    return exe
