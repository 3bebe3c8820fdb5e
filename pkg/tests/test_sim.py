from collections import deque

import numpy as np
import pytest

from stagefix.model import edge_id
from stagefix.sim import (
    EPOCH0,
    HOP_DELAY_MS,
    FaultSpec,
    IncidentBundle,
    SimulationError,
    default_horizon,
    generate_topology,
    inject_service_fault,
    query_telemetry,
    simulate_incident,
)
from stagefix.taxonomy import FAULT_CLASSES


def _affected_oracle(topo, root):
    """Hop distances along 'who depends on whom', computed from raw tables."""
    callers = {}
    for u, v in topo.call_edges:
        callers.setdefault(v, []).append(u)
    owner = dict(topo.ownership)
    hosted = {}
    for pod, node in topo.placement.items():
        hosted.setdefault(node, []).append(pod)
    dist = {root: 0}
    q = deque([root])
    while q:
        e = q.popleft()
        if e.startswith("svc:"):
            nxt = callers.get(e, [])
        elif e.startswith("pod:"):
            nxt = [owner[e]]
        else:
            nxt = hosted.get(e, [])
        for n in nxt:
            if n not in dist:
                dist[n] = dist[e] + 1
                q.append(n)
    return dist


def test_topology_shape():
    topo = generate_topology(7, n_services=8, replicas=3, n_nodes=4)
    assert len(topo.services) == 8 and len(topo.pods) == 24 and len(topo.nodes) == 4
    callees = {v for _, v in topo.call_edges}
    # every service but the entry has a caller
    assert set(topo.services) - callees == {topo.entry}
    assert all(topo.ownership[p] in topo.services for p in topo.pods)
    counts = {}
    for node in topo.placement.values():
        counts[node] = counts.get(node, 0) + 1
    assert max(counts.values()) - min(counts.values()) <= 1


def test_topology_is_deterministic():
    assert generate_topology(3) == generate_topology(3)
    assert generate_topology(3) != generate_topology(4)


@pytest.mark.parametrize("args", [(1, 1, 1), (3, 0, 1), (3, 1, 0)])
def test_degenerate_topology_rejected(args):
    with pytest.raises(SimulationError):
        generate_topology(0, *args)


@pytest.mark.parametrize("fc", FAULT_CLASSES)
@pytest.mark.parametrize("seed", [0, 5])
def test_anomalies_match_propagation(seed, fc):
    b = simulate_incident(seed, fc)
    dist = _affected_oracle(b.topology, b.truth.root_entity)
    assert b.store.anomalous_entities() == set(dist)
    assert {e for e, _ in b.truth.propagation_order} == set(dist)
    for e, d in dist.items():
        # detection lags the injected hop onset by at most one sample
        onset = b.store.onset(e)
        assert b.truth.onset + d * HOP_DELAY_MS <= onset <= b.truth.onset + d * HOP_DELAY_MS + 15_000


@pytest.mark.parametrize("fc", ["cpu_hog", "network_delay"])
def test_pod_and_node_roots(fc):
    topo = generate_topology(2)
    for root in (topo.pods[5], topo.nodes[1]):
        spec = FaultSpec(fc, root, EPOCH0 + 900_000)
        store, truth = inject_service_fault(topo, spec, default_horizon(), seed=3)
        assert store.anomalous_entities() == set(_affected_oracle(topo, root))


def test_memory_leak_is_monotone_after_onset():
    b = simulate_incident(2, "memory_leak")
    k0 = int(np.searchsorted(b.store.timestamps, b.truth.onset))
    series = b.store.metrics[(b.truth.root_entity, "memory")][k0:]
    assert np.all(np.diff(series) >= 0)


def test_fault_errors():
    topo = generate_topology(0)
    with pytest.raises(SimulationError):
        inject_service_fault(topo, FaultSpec("meteor", topo.services[1], EPOCH0))
    with pytest.raises(SimulationError):
        inject_service_fault(topo, FaultSpec("cpu_hog", "svc:nope", EPOCH0))
    with pytest.raises(SimulationError):
        inject_service_fault(topo, FaultSpec("cpu_hog", topo.services[1], EPOCH0 - 1))


def test_query_windows_are_half_open():
    b = simulate_incident(1, "packet_loss")
    store = b.store
    t0 = int(store.timestamps[10])
    got = query_telemetry(store, "metric", [b.truth.root_entity], (t0, t0 + 15_000))
    assert all(ts == [t0] for ts, _ in got.values())
    assert query_telemetry(store, "metric", [b.truth.root_entity], (t0, t0)) == {}
    logs = query_telemetry(store, "log", [b.truth.root_entity], store.horizon)
    assert all(store.horizon[0] <= r.ts < store.horizon[1] for r in logs)
    caller, callee = b.topology.call_edges[0]
    spans = query_telemetry(store, "trace", [edge_id(caller, callee)], (t0, t0 + 15_000))
    assert spans and all((s.caller, s.callee) == (caller, callee) for s in spans)
    with pytest.raises(ValueError):
        query_telemetry(store, "metric", [], (5, 1))


def test_packet_loss_leaves_error_logs_and_spans():
    b = simulate_incident(1, "packet_loss")
    root = b.truth.root_entity
    errs = [r for r in b.store.logs if r.entity == root and r.severity == "error"]
    assert errs and min(r.ts for r in errs) >= b.truth.onset
    bad = [s for s in b.store.spans if s.status == "error"]
    assert bad and all(s.callee == root for s in bad)


def test_alert_follows_entry_onset():
    b = simulate_incident(1, "cpu_hog")
    entry, ts = b.store.alert
    assert entry == b.topology.entry
    assert ts == dict(b.truth.propagation_order)[entry] + 30_000


def test_bundle_roundtrip(tmp_path):
    b = simulate_incident(3, "disk_exhaustion")
    b.save(tmp_path / "b")
    back = IncidentBundle.load(tmp_path / "b")
    assert back.topology == b.topology and back.truth == b.truth
    assert back.store.to_jsonl() == b.store.to_jsonl()
    (tmp_path / "b" / "telemetry.jsonl").unlink()
    with pytest.raises(FileNotFoundError):
        IncidentBundle.load(tmp_path / "b")


def test_simulation_is_deterministic():
    assert simulate_incident(9, "cpu_hog").store.to_jsonl() == simulate_incident(9, "cpu_hog").store.to_jsonl()
