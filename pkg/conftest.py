"""
Shared pytest fixtures.

The environment is prepared before anything imports the app: the results
service gets a throwaway SQLite database and a desk-machine config file,
and log shipping to Helm stays off.
"""

import os
import tempfile

import numpy as np
import pytest

_workdir = tempfile.mkdtemp(prefix='pimsim-tests-')
os.environ['DATABASE_URL'] = f"sqlite:///{os.path.join(_workdir, 'runs.db')}"
os.environ['PIMSIM_CONFIG'] = os.path.join(_workdir, 'pimsim.conf')
os.environ['HELM_SERVICE_URL'] = ''

from pimsim.config import KernelConfig, MachineConfig, write_config  # noqa: E402
from pimsim.machine import DpuState  # noqa: E402
from pimsim.system import PimSystem  # noqa: E402
from pimsim.tpch import GenSpec, generate  # noqa: E402

write_config(os.environ['PIMSIM_CONFIG'], MachineConfig.desk(), KernelConfig())


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', help='also run tests marked slow')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: larger sweeps and scale factors')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def machine():
    return MachineConfig.desk()


@pytest.fixture
def kernel_cfg():
    return KernelConfig()


@pytest.fixture
def dpu(machine):
    return DpuState(0, machine)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def make_system(machine):
    def make(dpus=4, mode='optimized', tasklets=None, kernel=None):
        return PimSystem(machine, kernel, dpus, mode, tasklets)
    return make


@pytest.fixture(scope='session')
def tables():
    """TPC-H style tables at sf 0.01, generated once per session."""
    return generate(GenSpec(0.01, 42))


@pytest.fixture(scope='session')
def config_path():
    return os.environ['PIMSIM_CONFIG']


@pytest.fixture
def app():
    from app import app as flask_app
    from extensions import db

    flask_app.config['TESTING'] = True
    with flask_app.app_context():
        db.create_all()
        yield flask_app
        db.session.remove()
        db.drop_all()


@pytest.fixture
def client(app):
    return app.test_client()
