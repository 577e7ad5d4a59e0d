import pytest

from danserver.backend import gen_dataset
from danserver.config import ServerConfig
from danserver.model import CalibKey
from danserver.server import DanServer


def server_config(tmp_path, name="srv", mode="DIRECT", upstream=None, latency_ms=0, **overrides):
    doc = {
        "listen_addr": "127.0.0.1:0",
        "mode": mode,
        "l2": {"dir": str(tmp_path / name / "l2"), "budget_bytes": 256 << 20},
        "l1_budget_bytes": 64 << 20,
        "broker": {"max_inflight_keys": 256, "fetch_timeout_ms": 10000},
        "pool": {"max_connections": 4, "acquire_timeout_ms": 10000},
    }
    if mode == "DIRECT":
        doc["backend"] = {"root_dir": str(tmp_path / "data"), "simulated_latency_ms": latency_ms}
    else:
        doc["upstream_addr"] = upstream
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(doc.get(k), dict):
            doc[k] = {**doc[k], **v}
        else:
            doc[k] = v
    return ServerConfig.from_dict(doc, base_dir=tmp_path)


@pytest.fixture
def data_dir(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    return d


@pytest.fixture
def dataset(data_dir):
    """Generates run sets on demand: ``dataset("T", 1, "v", rows)`` -> key."""

    def make(table="SMT_PED", run=1, variant="v1", rows=100, seed=0):
        gen_dataset(data_dir, table, run, variant, rows, seed)
        return CalibKey(table, run, variant)

    return make


@pytest.fixture
def make_server(tmp_path, data_dir):
    servers = []

    def make(**kwargs):
        srv = DanServer(server_config(tmp_path, **kwargs)).start()
        servers.append(srv)
        return srv

    yield make
    for srv in servers:
        srv.close()
