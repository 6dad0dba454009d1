"""Deterministic seeded network simulation: a single event loop over timed
deliveries, node timers, and scripted actions.

Identical configurations and scripts replay to bit-identical traces, chains,
and stores: all randomness flows from the config seed, simulated time is
integer ticks, and per-edge delivery is FIFO. The observer trace records
metadata only (time, endpoints, message type, size); envelope bodies are
never exposed to analysis code.
"""

from __future__ import annotations

import configparser
import heapq
import random
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from . import crypto, ledger, wire
from .crypto import Pseudonym
from .errors import P3Error, ScenarioError
from .keystore import ROLE_CONSUMER, KeyStore
from .node import Node, NodeConfig, Send, Timer

DEFAULT_LATENCY_MIN = 1
DEFAULT_LATENCY_MAX = 5


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class SimConfig:
    seed: int
    nodes: list[NodeConfig]
    topology: Union[str, list[tuple[str, str]]] = "full-mesh"
    duration: int = 2000
    latency_min: int = DEFAULT_LATENCY_MIN
    latency_max: int = DEFAULT_LATENCY_MAX

    def node_names(self) -> list[str]:
        return [n.identity_id for n in self.nodes]


def parse_sim_config(text: str) -> SimConfig:
    """Text config: a [sim] section plus one [node <name>] section per node."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ScenarioError(f"bad config: {exc}") from exc
    if "sim" not in parser:
        raise ScenarioError("config is missing the [sim] section")
    sim = parser["sim"]
    nodes = []
    for section in parser.sections():
        if not section.startswith("node "):
            continue
        name = section[len("node "):].strip()
        if not name:
            raise ScenarioError(f"empty node name in section [{section}]")
        nodes.append(NodeConfig.from_mapping(name, dict(parser[section])))
    if not nodes:
        raise ScenarioError("config defines no [node <name>] sections")
    topology_raw = sim.get("topology", "full-mesh").strip()
    topology: Union[str, list[tuple[str, str]]]
    if topology_raw == "full-mesh":
        topology = "full-mesh"
    else:
        topology = []
        for part in topology_raw.split(","):
            ends = part.strip().split("-")
            if len(ends) != 2:
                raise ScenarioError(f"bad topology edge {part.strip()!r}")
            topology.append((ends[0].strip(), ends[1].strip()))
    return SimConfig(
        seed=sim.getint("seed", 0),
        nodes=nodes,
        topology=topology,
        duration=sim.getint("duration", 2000),
        latency_min=sim.getint("latency_min", DEFAULT_LATENCY_MIN),
        latency_max=sim.getint("latency_max", DEFAULT_LATENCY_MAX),
    )


# ---------------------------------------------------------------------------
# scripted actions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RequestAction:
    tick: int
    node: str
    owner: str
    datum: Union[int, bytes]  # ordinal into the owner's datums, or raw id
    purpose: str = ""


@dataclass(frozen=True)
class EraseAction:
    tick: int
    node: str
    pseudonym: Optional[Pseudonym] = None
    ordinal: Optional[int] = None  # k-th own pseudonym of the given role
    role: str = ROLE_CONSUMER


@dataclass(frozen=True)
class CrashAction:
    tick: int
    node: str


@dataclass(frozen=True)
class RestoreAction:
    tick: int
    node: str


Action = Union[RequestAction, EraseAction, CrashAction, RestoreAction]


def parse_script(text: str) -> list[Action]:
    """One action per line:

        at <tick> <node> request <owner> <datum>  [purpose words...]
        at <tick> <node> erase <pseudonym-hex | #ordinal>
        at <tick> <node> crash
        at <tick> <node> restore

    ``<datum>`` is a decimal ordinal into the owner's provisioned datums or a
    32-hex-digit datum id.
    """
    actions: list[Action] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip() if not raw.strip().startswith("#") else ""
        if raw.strip().startswith("#") or not raw.strip():
            continue
        line = raw.strip()
        parts = line.split()
        try:
            if parts[0] != "at":
                raise ValueError("line must start with 'at'")
            tick = int(parts[1])
            node_name = parts[2]
            verb = parts[3]
            if verb == "request":
                owner, datum_token = parts[4], parts[5]
                datum: Union[int, bytes]
                if len(datum_token) == 32 and all(c in "0123456789abcdefABCDEF" for c in datum_token):
                    datum = bytes.fromhex(datum_token)
                else:
                    datum = int(datum_token)
                purpose = " ".join(parts[6:])
                actions.append(RequestAction(tick, node_name, owner, datum, purpose))
            elif verb == "erase":
                token = parts[4]
                if token.startswith("#"):
                    actions.append(EraseAction(tick, node_name, ordinal=int(token[1:])))
                else:
                    actions.append(EraseAction(tick, node_name, pseudonym=Pseudonym.from_hex(token)))
            elif verb == "crash":
                actions.append(CrashAction(tick, node_name))
            elif verb == "restore":
                actions.append(RestoreAction(tick, node_name))
            else:
                raise ValueError(f"unknown verb {verb!r}")
        except (IndexError, ValueError, P3Error) as exc:
            raise ScenarioError(f"line {lineno}: {exc}", line=lineno) from exc
    return actions


# ---------------------------------------------------------------------------
# observation and ground truth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRecord:
    """Metadata of one delivered envelope; block announcements additionally
    carry their public announcement id (tip-hash prefix)."""

    time: int
    src: str
    dst: str
    msg_type: str
    size: int
    info: str = ""


class ObserverTrace:
    def __init__(self):
        self.records: list[TraceRecord] = []

    def add(self, record: TraceRecord) -> None:
        self.records.append(record)

    def lines(self) -> list[str]:
        return [
            f"{r.time} {r.src} {r.dst} {r.msg_type} {r.size} {r.info or '-'}"
            for r in self.records
        ]

    def serialize(self) -> bytes:
        return ("\n".join(self.lines()) + "\n").encode("utf-8")


class GroundTruth:
    """Harness-side record of what actually happened, for scoring attacks."""

    def __init__(self):
        self.events: list[dict] = []

    def add(self, event: dict) -> None:
        self.events.append(event)

    def sessions(self, fake: Optional[bool] = None) -> list[dict]:
        out = [e for e in self.events if e["kind"] == "session"]
        if fake is not None:
            out = [e for e in out if e["fake"] == fake]
        return out

    def blocks(self) -> list[dict]:
        return [e for e in self.events if e["kind"] == "block"]

    def erasures(self) -> list[dict]:
        return [e for e in self.events if e["kind"] == "erase"]

    def pseudonym_identities(self) -> dict[str, str]:
        """pseudonym hex -> identity, for every real completed session."""
        mapping: dict[str, str] = {}
        for event in self.sessions(fake=False):
            mapping[event["consumer_pseudonym"]] = event["consumer"]
            mapping[event["owner_pseudonym"]] = event["owner"]
        return mapping


@dataclass
class SimResult:
    config: SimConfig
    nodes: dict[str, Node]
    trace: ObserverTrace
    truth: GroundTruth
    session_trace: dict[str, list[TraceRecord]]
    skipped_actions: list[tuple[Action, str]]

    def chains(self) -> dict[str, ledger.Chain]:
        return {name: node.chain for name, node in self.nodes.items()}

    def stores(self) -> dict[str, KeyStore]:
        return {name: node.store for name, node in self.nodes.items()}

    def honest_nodes(self) -> dict[str, Node]:
        return {name: node for name, node in self.nodes.items() if not node.config.adversarial}


# ---------------------------------------------------------------------------
# the simulator
# ---------------------------------------------------------------------------

_DELIVER = 0
_TIMER = 1
_ACTION = 2


def _node_master_seed(seed: int, name: str) -> bytes:
    return crypto.keyed_digest(crypto.digest(b"p3-sim-master"), struct.pack(">Q", seed) + name.encode("utf-8"))


def _derived_rng(seed: int, tag: str) -> random.Random:
    material = crypto.keyed_digest(crypto.digest(b"p3-sim-rng"), struct.pack(">Q", seed) + tag.encode("utf-8"))
    return random.Random(int.from_bytes(material, "big"))


class Simulation:
    def __init__(self, config: SimConfig, script: Iterable[Action] = ()):
        self.config = config
        self.trace = ObserverTrace()
        self.truth = GroundTruth()
        self.session_trace: dict[str, list[TraceRecord]] = {}
        self.skipped_actions: list[tuple[Action, str]] = []
        self._queue: list[tuple[int, int, int, object]] = []
        self._seq = 0
        self._edge_clock: dict[tuple[str, str], int] = {}
        self._crashed: set[str] = set()
        self._latency_rng = _derived_rng(config.seed, "latency")

        names = config.node_names()
        if len(set(names)) != len(names):
            raise ScenarioError("duplicate node names in config")
        self.nodes: dict[str, Node] = {}
        for ncfg in config.nodes:
            node = Node(ncfg, _node_master_seed(config.seed, ncfg.identity_id), _derived_rng(config.seed, "node:" + ncfg.identity_id))
            node.on_truth = self.truth.add
            self.nodes[ncfg.identity_id] = node
        for node in self.nodes.values():
            if node.config.datum_count > 0:
                node.provision_datums(node.config.datum_count, node.config.datum_size)
        # Everyone knows everyone's identity key (in-person verification);
        # the topology only shapes the gossip graph.
        for a in self.nodes.values():
            for b in self.nodes.values():
                if a is not b:
                    a.identity.pin_peer(b.identity_id, b.identity.identity_keypair.public_key)
        if config.topology == "full-mesh":
            for name, node in self.nodes.items():
                node.neighbors = [other for other in names if other != name]
        else:
            adjacency: dict[str, list[str]] = {name: [] for name in names}
            for a, b in config.topology:
                if a not in adjacency or b not in adjacency:
                    raise ScenarioError(f"topology edge references unknown node {a!r} or {b!r}")
                adjacency[a].append(b)
                adjacency[b].append(a)
            for name, node in self.nodes.items():
                node.neighbors = adjacency[name]
        for action in script:
            if action.node not in self.nodes:
                raise ScenarioError(f"script references unknown node {action.node!r}")
            if isinstance(action, RequestAction) and action.owner not in self.nodes:
                raise ScenarioError(f"script references unknown owner {action.owner!r}")
            self._push(action.tick, _ACTION, action)

    def _push(self, time: int, kind: int, payload: object) -> None:
        heapq.heappush(self._queue, (time, self._seq, kind, payload))
        self._seq += 1

    def _schedule_effects(self, src: str, now: int, effects: Iterable) -> None:
        for effect in effects:
            if isinstance(effect, Send):
                latency = self._latency_rng.randint(self.config.latency_min, self.config.latency_max)
                edge = (src, effect.dst)
                at = max(now + latency, self._edge_clock.get(edge, 0))
                self._edge_clock[edge] = at
                self._push(at, _DELIVER, (src, effect.dst, effect.envelope))
            elif isinstance(effect, Timer):
                self._push(effect.at, _TIMER, (src, effect.tag))
            else:
                raise P3Error(f"unknown effect {effect!r}")

    def run(self) -> SimResult:
        for name, node in self.nodes.items():
            self._schedule_effects(name, 0, node.start(0))
        while self._queue:
            time, _, kind, payload = heapq.heappop(self._queue)
            if time > self.config.duration:
                break
            if kind == _DELIVER:
                src, dst, envelope = payload
                if dst in self._crashed or src in self._crashed:
                    continue
                record = TraceRecord(
                    time=time,
                    src=src,
                    dst=dst,
                    msg_type=wire.MSG_NAMES[envelope.msg_type],
                    size=len(envelope.encode()),
                    info=envelope.session_id.hex() if envelope.msg_type == wire.MSG_BLOCK else "",
                )
                self.trace.add(record)
                if envelope.msg_type != wire.MSG_BLOCK:
                    self.session_trace.setdefault(envelope.session_id.hex(), []).append(record)
                effects = self.nodes[dst].on_envelope(envelope, time)
                self._schedule_effects(dst, time, effects)
            elif kind == _TIMER:
                name, tag = payload
                if name in self._crashed:
                    continue
                self._schedule_effects(name, time, self.nodes[name].on_timer(tag, time))
            else:
                self._apply_action(payload, time)
        return SimResult(
            config=self.config,
            nodes=self.nodes,
            trace=self.trace,
            truth=self.truth,
            session_trace=self.session_trace,
            skipped_actions=self.skipped_actions,
        )

    def _apply_action(self, action: Action, now: int) -> None:
        node = self.nodes[action.node]
        if isinstance(action, CrashAction):
            self._crashed.add(action.node)
            return
        if isinstance(action, RestoreAction):
            if action.node in self._crashed:
                self._crashed.remove(action.node)
                self._schedule_effects(action.node, now, node.restart(now))
            return
        if action.node in self._crashed:
            self.skipped_actions.append((action, "node crashed"))
            return
        if isinstance(action, RequestAction):
            if isinstance(action.datum, int):
                from .node import datum_id_for

                datum_id = datum_id_for(action.owner, action.datum)
            else:
                datum_id = action.datum
            self._schedule_effects(action.node, now, node.begin_request(action.owner, datum_id, now, action.purpose))
            return
        if isinstance(action, EraseAction):
            pseudonym = action.pseudonym
            if pseudonym is None:
                own = node.store.list_own_pseudonyms(action.role)
                if action.ordinal is None or action.ordinal >= len(own):
                    self.skipped_actions.append((action, f"no such {action.role}-side pseudonym"))
                    return
                pseudonym = own[action.ordinal]
            try:
                self._schedule_effects(action.node, now, node.begin_erase(pseudonym, now))
            except P3Error as exc:
                self.skipped_actions.append((action, str(exc)))
            return
        raise ScenarioError(f"unknown action {action!r}")


def run_scenario(config: SimConfig, script: Iterable[Action] = ()) -> SimResult:
    return Simulation(config, script).run()
