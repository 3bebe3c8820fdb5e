"""Synthetic microservice incidents: topology, injected fault, telemetry, ground truth.

Signal model:
  * every entity carries the five metrics in ``METRICS`` on a 15 s grid;
  * baseline noise is Gaussian with sigma = 5% of the baseline mean,
    truncated at 2.5 sigma so the pre-onset window never crosses z = 3;
  * the root shows a fault-class signature from onset, every entity the
    fault reaches shows a latency rise after ``HOP_DELAY_MS`` per hop.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import model
from .model import SystemTopology, edge_id
from .taxonomy import (
    BASELINE_MEAN,
    FAULT_CLASSES,
    METRICS,
    SPAN_ERRORS,
    SPAN_LATENCY,
    T_DISK_ERR,
    T_INFO,
    T_NET_ERR,
    entity_kind,
)

STEP_MS = 15_000
HOP_DELAY_MS = 45_000
ALERT_DELAY_MS = 30_000
HORIZON_MS = 30 * 60_000
EPOCH0 = 1_700_000_000_000
NOISE_FRACTION = 0.05
NOISE_CLIP = 2.5
Z_THRESHOLD = 3.0

SERVICE_NAMES = (
    "frontend", "checkout", "cart", "catalog", "payment", "shipping",
    "email", "currency", "recommendation", "ad", "auth", "inventory",
)


class SimulationError(ValueError):
    pass


def generate_topology(seed: int, n_services: int = 10, replicas: int = 4, n_nodes: int = 6) -> SystemTopology:
    if n_services < 2 or replicas < 1 or n_nodes < 1:
        raise SimulationError(
            f"degenerate topology size: services={n_services} replicas={replicas} nodes={n_nodes}"
        )
    rng = random.Random(seed)
    names = [
        f"svc:{SERVICE_NAMES[i]}" if i < len(SERVICE_NAMES) else f"svc:svc{i:02d}"
        for i in range(n_services)
    ]
    edges = set()
    for i in range(1, n_services):
        # each later service gets at least one caller, so names[0] is the only entry
        edges.add((names[rng.randrange(i)], names[i]))
        if i >= 2 and rng.random() < 0.3:
            edges.add((names[rng.randrange(i)], names[i]))
    nodes = tuple(f"node:n{k}" for k in range(n_nodes))
    pods, placement, ownership = [], {}, {}
    idx = 0
    for svc in names:
        for r in range(replicas):
            pod = f"pod:{svc.split(':', 1)[1]}-{r}"
            pods.append(pod)
            placement[pod] = nodes[idx % n_nodes]
            ownership[pod] = svc
            idx += 1
    return SystemTopology(
        services=tuple(names),
        pods=tuple(pods),
        nodes=nodes,
        call_edges=tuple(sorted(edges)),
        placement=placement,
        ownership=ownership,
    )


@dataclass(frozen=True)
class FaultSpec:
    fault_class: str
    root_entity: str
    onset: int
    magnitude: float = 1.0


@dataclass(frozen=True)
class GroundTruth:
    root_entity: str
    fault_class: str
    onset: int
    propagation_order: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class LogRecord:
    ts: int
    entity: str
    severity: str
    template: str
    text: str


@dataclass(frozen=True)
class Span:
    trace_id: str
    caller: str
    callee: str
    start: int
    duration: float
    status: str


class TelemetryStore:
    """Immutable per-incident observability with lazily cached derived views."""

    def __init__(self, horizon, timestamps, metrics, logs, spans, baseline_stats, alert):
        self.horizon = (int(horizon[0]), int(horizon[1]))
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        self.metrics = {k: np.asarray(v, dtype=float) for k, v in metrics.items()}
        self.logs = tuple(sorted(logs, key=lambda r: (r.ts, r.entity, r.template, r.text)))
        self.spans = tuple(sorted(spans, key=lambda s: (s.start, s.caller, s.callee, s.trace_id)))
        self.baseline_stats = dict(baseline_stats)
        self.alert = (alert[0], int(alert[1]))

    # --- derived, cached --------------------------------------------------

    @cached_property
    def _z(self) -> dict:
        out = {}
        for key, values in self.metrics.items():
            mean, std = self.baseline_stats[key]
            out[key] = (values - mean) / std if std > 0 else np.zeros_like(values)
        return out

    @cached_property
    def entities(self) -> tuple[str, ...]:
        return tuple(sorted({e for e, _ in self.metrics}))

    @cached_property
    def _onsets(self) -> dict[str, int | None]:
        out = {}
        for entity in self.entities:
            first = None
            for metric in METRICS:
                z = self._z.get((entity, metric))
                if z is None:
                    continue
                hits = np.nonzero(z >= Z_THRESHOLD)[0]
                if hits.size:
                    t = int(self.timestamps[hits[0]])
                    first = t if first is None else min(first, t)
            out[entity] = first
        return out

    @cached_property
    def _logs_by_key(self) -> dict:
        out: dict = {}
        for rec in self.logs:
            out.setdefault((rec.entity, rec.template), []).append(rec)
        return out

    @cached_property
    def _spans_by_edge(self) -> dict:
        out: dict = {}
        for sp in self.spans:
            out.setdefault(edge_id(sp.caller, sp.callee), []).append(sp)
        return out

    def zscores(self, entity: str, metric: str):
        return self._z.get((entity, metric))

    def onset(self, entity: str) -> int | None:
        """First timestamp at which any metric of ``entity`` reaches z >= 3."""
        return self._onsets.get(entity)

    def anomalous_entities(self, window=None) -> set[str]:
        if window is None:
            return {e for e, t in self._onsets.items() if t is not None}
        return {e for e in self.entities if self.entity_anomalous_in(e, window)}

    def _slice(self, window) -> slice:
        a, b = window
        lo = int(np.searchsorted(self.timestamps, a, side="left"))
        hi = int(np.searchsorted(self.timestamps, b, side="left"))
        return slice(lo, hi)

    def entity_anomalous_in(self, entity: str, window) -> bool:
        sl = self._slice(window)
        for metric in METRICS:
            z = self._z.get((entity, metric))
            if z is not None and z[sl].size and float(z[sl].max()) >= Z_THRESHOLD:
                return True
        return False

    # --- evidence measurement ----------------------------------------------

    def measure_metric(self, entity: str, metric: str, window):
        """(onset, anomaly score) of a metric inside ``window`` or None when normal."""
        z = self._z.get((entity, metric))
        if z is None:
            return None
        sl = self._slice(window)
        seg = z[sl]
        if not seg.size:
            return None
        peak = float(seg.max())
        if peak < Z_THRESHOLD:
            return None
        first = int(np.argmax(seg >= Z_THRESHOLD))
        onset = int(self.timestamps[sl][first])
        return onset, min(1.0, peak / 10.0)

    def measure_log(self, entity: str, template: str, window):
        recs = [
            r for r in self._logs_by_key.get((entity, template), ())
            if window[0] <= r.ts < window[1] and r.severity in ("error", "warn")
        ]
        if not recs:
            return None
        return recs[0].ts, min(1.0, 0.3 + 0.05 * len(recs))

    def measure_trace(self, edge: str, signal: str, window):
        spans = [s for s in self._spans_by_edge.get(edge, ()) if window[0] <= s.start < window[1]]
        if not spans:
            return None
        if signal == SPAN_ERRORS:
            bad = [s for s in spans if s.status == "error"]
            if not bad:
                return None
            return bad[0].start, min(1.0, 0.3 + 0.05 * len(bad))
        if signal == SPAN_LATENCY:
            callee = spans[0].callee
            mean, std = self.baseline_stats[(callee, "latency_ms")]
            hits = [s for s in spans if std > 0 and (s.duration - mean) / std >= Z_THRESHOLD]
            if not hits:
                return None
            peak = max((s.duration - mean) / std for s in spans)
            return hits[0].start, min(1.0, peak / 10.0)
        return None

    def log_templates(self, entity: str) -> list[str]:
        return sorted({t for (e, t) in self._logs_by_key if e == entity and t != T_INFO})

    def edges_with_spans(self) -> list[str]:
        return sorted(self._spans_by_edge)

    # --- serialization --------------------------------------------------------

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "header", "horizon": list(self.horizon),
                             "timestamps": self.timestamps.tolist(),
                             "alert": list(self.alert)}, sort_keys=True)]
        for (entity, metric) in sorted(self.metrics):
            mean, std = self.baseline_stats[(entity, metric)]
            lines.append(json.dumps({
                "kind": "metric", "entity": entity, "metric": metric,
                "values": self.metrics[(entity, metric)].tolist(),
                "baseline": [mean, std],
            }, sort_keys=True))
        for r in self.logs:
            lines.append(json.dumps({"kind": "log", "ts": r.ts, "entity": r.entity,
                                     "severity": r.severity, "template": r.template,
                                     "text": r.text}, sort_keys=True))
        for s in self.spans:
            lines.append(json.dumps({"kind": "span", "trace_id": s.trace_id, "caller": s.caller,
                                     "callee": s.callee, "start": s.start,
                                     "duration": s.duration, "status": s.status}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TelemetryStore":
        header = None
        metrics, baseline, logs, spans = {}, {}, [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.get("kind")
            if kind == "header":
                header = rec
            elif kind == "metric":
                key = (rec["entity"], rec["metric"])
                metrics[key] = rec["values"]
                baseline[key] = tuple(rec["baseline"])
            elif kind == "log":
                logs.append(LogRecord(rec["ts"], rec["entity"], rec["severity"], rec["template"], rec["text"]))
            elif kind == "span":
                spans.append(Span(rec["trace_id"], rec["caller"], rec["callee"], rec["start"],
                                  rec["duration"], rec["status"]))
        if header is None:
            raise SimulationError("telemetry stream has no header record")
        return cls(header["horizon"], header["timestamps"], metrics, logs, spans, baseline, header["alert"])


def query_telemetry(store: TelemetryStore, modality: str, targets, window):
    """Items of one modality whose target is in ``targets`` and timestamp in ``[start, end)``.

    Metric results map ``(entity, metric)`` to ``(timestamps, values)``; log
    results are :class:`LogRecord` lists; traces are :class:`Span` lists,
    where a span matches by its edge id or by either endpoint.
    """
    a, b = window
    if a > b:
        raise ValueError(f"malformed window {window}")
    targets = set(targets)
    if modality == "metric":
        sl = store._slice(window)
        out = {}
        for (entity, metric), values in sorted(store.metrics.items()):
            if entity in targets and sl.stop > sl.start:
                out[(entity, metric)] = (store.timestamps[sl].tolist(), values[sl].tolist())
        return out
    if modality == "log":
        return [r for r in store.logs if r.entity in targets and a <= r.ts < b]
    if modality == "trace":
        return [
            s for s in store.spans
            if a <= s.start < b and (
                edge_id(s.caller, s.callee) in targets or s.caller in targets or s.callee in targets
            )
        ]
    raise ValueError(f"unknown modality {modality!r}")


def default_horizon() -> tuple[int, int]:
    return (EPOCH0, EPOCH0 + HORIZON_MS)


def _propagation(topo: SystemTopology, root: str) -> dict[str, int]:
    return topo.ancestors_of_effects(root)


def inject_service_fault(topo: SystemTopology, spec: FaultSpec, horizon=None, seed: int = 0):
    """Generate (TelemetryStore, GroundTruth) for one injected fault."""
    if spec.fault_class not in FAULT_CLASSES:
        raise SimulationError(f"unknown fault class {spec.fault_class!r}")
    if spec.root_entity not in topo.entities:
        raise SimulationError(f"root entity {spec.root_entity!r} not in topology")
    if spec.magnitude <= 0:
        raise SimulationError("fault magnitude must be positive")
    horizon = tuple(horizon) if horizon is not None else default_horizon()
    if not horizon[0] <= spec.onset < horizon[1]:
        raise SimulationError("fault onset outside the simulation horizon")

    rng = np.random.default_rng(seed)
    prng = random.Random(seed)
    ts = np.arange(horizon[0], horizon[1], STEP_MS, dtype=np.int64)
    n = ts.size
    k0 = int(np.searchsorted(ts, spec.onset, side="left"))
    entities = sorted(topo.entities)
    m = spec.magnitude

    values: dict[tuple[str, str], np.ndarray] = {}
    sigma: dict[tuple[str, str], float] = {}
    means: dict[tuple[str, str], float] = {}
    for e in entities:
        for metric in METRICS:
            base = BASELINE_MEAN[metric] * (1.0 + rng.uniform(-0.1, 0.1))
            sd = NOISE_FRACTION * base
            noise = np.clip(rng.standard_normal(n), -NOISE_CLIP, NOISE_CLIP) * sd
            values[(e, metric)] = base + noise
            sigma[(e, metric)] = sd
            means[(e, metric)] = base

    dist = _propagation(topo, spec.root_entity)
    onset_of = {e: int(spec.onset + d * HOP_DELAY_MS) for e, d in dist.items()}

    root = spec.root_entity
    post = np.arange(n) >= k0
    j = np.clip(np.arange(n) - k0, 0, None)

    def bump(entity, metric, delta):
        values[(entity, metric)] = values[(entity, metric)] + np.where(post, delta, 0.0)

    lat_base = BASELINE_MEAN["latency_ms"]
    fc = spec.fault_class
    if fc == "cpu_hog":
        bump(root, "cpu", 40.0 * m)
        bump(root, "latency_ms", 0.5 * m * lat_base)
    elif fc == "memory_leak":
        sd = sigma[(root, "memory")]
        ramp = values[(root, "memory")] + np.where(post, sd * (4.0 + 1.5 * j) * m, 0.0)
        # leaked memory is never released: usage is a high-water mark after onset
        ramp[k0:] = np.maximum.accumulate(ramp[k0:])
        values[(root, "memory")] = ramp
        bump(root, "latency_ms", 0.4 * m * lat_base)
    elif fc == "network_delay":
        bump(root, "latency_ms", 0.8 * m * lat_base)
    elif fc == "packet_loss":
        bump(root, "error_rate", 5.0 * m)
        bump(root, "latency_ms", 0.3 * m * lat_base)
    elif fc == "disk_exhaustion":
        disk = values[(root, "disk")]
        values[(root, "disk")] = np.where(post, np.minimum(100.0, disk + 30.0 * m + 2.0 * j), disk)
        bump(root, "latency_ms", 0.3 * m * lat_base)

    for e, d in dist.items():
        if d == 0:
            continue
        ke = int(np.searchsorted(ts, onset_of[e], side="left"))
        rise = 0.6 * m * lat_base * (0.9 ** (d - 1))
        values[(e, "latency_ms")] = values[(e, "latency_ms")] + np.where(np.arange(n) >= ke, rise, 0.0)

    # the generating (mean, sigma) is the baseline: unaffected series stay below z = 2.5
    baseline_stats = {key: (float(means[key]), float(sigma[key])) for key in values}

    logs = []
    for svc in topo.services:
        for k in range(n):
            for c in range(int(rng.poisson(0.5))):
                logs.append(LogRecord(int(ts[k]) + 1000 * c, svc, "info", T_INFO, "request served"))
    if fc in ("packet_loss", "disk_exhaustion"):
        template = T_NET_ERR if fc == "packet_loss" else T_DISK_ERR
        text = "connection reset by peer" if fc == "packet_loss" else "write failed: no space left on device"
        rate = 2.0 if fc == "packet_loss" else 1.0
        for k in range(k0, n):
            for c in range(max(1 if k == k0 else 0, int(rng.poisson(rate)))):
                logs.append(LogRecord(int(ts[k]) + 500 * c, root, "error", template, text))

    # spans land on the service-level entity closest to the root
    faulty_svc = root
    if entity_kind(root) == "pod":
        faulty_svc = topo.ownership[root]
    elif entity_kind(root) == "node":
        faulty_svc = None
    spans = []
    for caller, callee in topo.call_edges:
        lat = values[(callee, "latency_ms")]
        for k in range(n):
            status = "ok"
            if fc == "packet_loss" and callee == faulty_svc and k >= k0 and (k == k0 or prng.random() < 0.3):
                status = "error"
            spans.append(Span(f"t{int(ts[k])}-{caller.split(':')[1]}-{callee.split(':')[1]}",
                              caller, callee, int(ts[k]), float(lat[k]), status))

    entry = topo.entry
    alert_ts = onset_of.get(entry, spec.onset) + ALERT_DELAY_MS
    store = TelemetryStore(horizon, ts, values, logs, spans, baseline_stats, (entry, alert_ts))
    order = tuple(sorted(onset_of.items(), key=lambda kv: (kv[1], kv[0] != root, kv[0])))
    truth = GroundTruth(root, fc, int(spec.onset), order)
    return store, truth


@dataclass
class IncidentBundle:
    incident_id: str
    topology: SystemTopology
    store: TelemetryStore
    truth: GroundTruth

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "topology.json").write_text(model.dumps(self.topology, indent=2) + "\n")
        (d / "telemetry.jsonl").write_text(self.store.to_jsonl())
        gt = model.encode(self.truth)
        gt["incident_id"] = self.incident_id
        (d / "ground_truth.json").write_text(json.dumps(gt, sort_keys=True, indent=2) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "IncidentBundle":
        d = Path(directory)
        missing = [n for n in ("topology.json", "telemetry.jsonl", "ground_truth.json") if not (d / n).exists()]
        if missing:
            raise FileNotFoundError(f"incident bundle {d} is missing {', '.join(missing)}")
        topo = model.loads(SystemTopology, (d / "topology.json").read_text())
        store = TelemetryStore.from_jsonl((d / "telemetry.jsonl").read_text())
        raw = json.loads((d / "ground_truth.json").read_text())
        incident_id = raw.pop("incident_id", d.name)
        truth = model.decode(GroundTruth, raw)
        return cls(incident_id, topo, store, truth)


def simulate_incident(
    seed: int,
    fault_class: str,
    root: str | None = None,
    n_services: int = 10,
    replicas: int = 4,
    n_nodes: int = 6,
    topology_seed: int | None = None,
    magnitude: float = 1.0,
    onset_offset_ms: int = 15 * 60_000,
) -> IncidentBundle:
    """One-call incident: topology from ``topology_seed`` (default ``seed``), fault, telemetry."""
    topo = generate_topology(seed if topology_seed is None else topology_seed, n_services, replicas, n_nodes)
    if root is None:
        choices = [s for s in topo.services if s != topo.entry]
        root = random.Random(seed).choice(choices)
    horizon = default_horizon()
    spec = FaultSpec(fault_class, root, horizon[0] + onset_offset_ms, magnitude)
    store, truth = inject_service_fault(topo, spec, horizon, seed)
    incident_id = f"inc-{seed}-{fault_class}-{root.replace(':', '_')}"
    return IncidentBundle(incident_id, topo, store, truth)


def hop_count(onset_a: int, onset_b: int) -> float:
    return math.floor((onset_b - onset_a) / HOP_DELAY_MS)


def redact_evidence(store: TelemetryStore, entities) -> TelemetryStore:
    """Copy of ``store`` with the telemetry of ``entities`` flattened to baseline.

    Models evidence lost after the fault (expired retention, dropped
    scrapes): metrics sit at their baseline mean, error logs vanish and
    spans into the entities report baseline latency.
    """
    gone = set(entities)
    metrics = {}
    for key, values in store.metrics.items():
        if key[0] in gone:
            metrics[key] = np.full_like(values, store.baseline_stats[key][0])
        else:
            metrics[key] = values
    logs = [r for r in store.logs if r.entity not in gone or r.severity == "info"]
    spans = []
    for s in store.spans:
        if s.callee in gone or s.caller in gone:
            s = Span(s.trace_id, s.caller, s.callee, s.start,
                     store.baseline_stats[(s.callee, "latency_ms")][0], "ok")
        spans.append(s)
    return TelemetryStore(store.horizon, store.timestamps, metrics, logs, spans,
                          store.baseline_stats, store.alert)
