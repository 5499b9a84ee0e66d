import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from secmon import crypto
from secmon.machine import MachineConfig
from secmon.monitor import SecurityMonitor

DATA_DIR = os.path.join(os.path.dirname(__file__), "..", "src", "secmon", "data")
SCENARIO_DIR = os.path.abspath(os.path.join(DATA_DIR, "scenarios"))
MANIFEST_DIR = os.path.abspath(os.path.join(DATA_DIR, "manifests"))


def make_monitor(seed: int = 1, **kwargs) -> SecurityMonitor:
    kwargs.setdefault("config", MachineConfig.desk())
    kwargs.setdefault("entropy", crypto.EntropySource(seed))
    kwargs.setdefault("device",
                      crypto.DeviceIdentity.from_secrets(b"\x01" * 32, b"\x02" * 32))
    config = kwargs.pop("config")
    return SecurityMonitor(config, **kwargs)


@pytest.fixture
def monitor() -> SecurityMonitor:
    return make_monitor()


@pytest.fixture
def scenario_path():
    def path(name: str) -> str:
        return os.path.join(SCENARIO_DIR, name)
    return path


@pytest.fixture
def manifest_path():
    def path(name: str) -> str:
        return os.path.join(MANIFEST_DIR, name)
    return path
