import glob
import os
import uuid

import pytest

from mrpc.shmipc import shm_dir
from mrpc.transport import SIM_NETWORK


@pytest.fixture(autouse=True)
def _clean_sim_network():
    SIM_NETWORK.reset()
    yield
    SIM_NETWORK.reset()


@pytest.fixture
def instance():
    return f"t{uuid.uuid4().hex[:10]}"


@pytest.fixture
def service_factory(tmp_path):
    """Start service instances with isolated run dirs; stop them afterwards
    and verify no shared-memory files leak."""
    from mrpc.service import ServiceConfig, ServiceInstance

    started = []

    def make(name=None, **cfg_kw):
        from mrpc.shmipc import DEFAULT_INSTANCE  # noqa: F401  (import check)

        name = name or f"t{uuid.uuid4().hex[:10]}"
        cfg_kw.setdefault("run_dir", str(tmp_path / name))
        svc = ServiceInstance(ServiceConfig(instance=name, **cfg_kw)).start()
        started.append(svc)
        return svc

    yield make
    leaked = []
    for svc in started:
        svc.stop()
        leaked += glob.glob(os.path.join(shm_dir(), f"mrpc.{svc.config.instance}.*"))
    assert not leaked, f"shared memory files left behind: {leaked}"


ECHO_SCHEMA = """
package acme;

message Req {
  string key = 1;
  bytes blob = 2;
  i64 seq = 3;
}

message Rep {
  string key = 1;
  bytes blob = 2;
  i64 seq = 3;
}

service Echo {
  rpc Call (Req) returns (Rep);
}
"""


@pytest.fixture
def echo_schema():
    return ECHO_SCHEMA
