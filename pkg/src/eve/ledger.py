"""Two-tier permissioned ledger simulation.

One global ledger (``commonchannel``) plus one local ledger per aggregator
(``agg{n}channel``). Each ledger is an append-only hash chain of
transactions over a key-value world state, guarded by attribute-based
access rules that deny anything not explicitly allowed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from .errors import AccessDenied, ChannelMismatch, IoFailure, LedgerError, NotFound, WindowClosed

log = logging.getLogger(__name__)

GENESIS_PREV = "00" * 32
GLOBAL = "commonchannel"
CONTRACTS = {"ACT": "global", "RC": "global", "BC": "local", "MC": "local"}


def local_channel(n: int) -> str:
    return f"agg{n}channel"


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def canonical(obj) -> bytes:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def digest(obj) -> str:
    return hashlib.sha256(canonical(obj)).hexdigest()


@dataclass(frozen=True)
class Identity:
    token: str
    role: str                  # "admin" | "prosumer" | "operator"
    org: int | None = None     # aggregator the identity belongs to
    attrs: tuple[tuple[str, Any], ...] = ()

    def attr(self, key, default=None):
        return dict(self.attrs).get(key, default)


@dataclass
class Transaction:
    channel: str
    contract: str
    op: str
    submitter: str
    type: str
    key: str
    value: Any

    def to_json(self) -> dict:
        return {"channel": self.channel, "contract": self.contract, "op": self.op,
                "submitter": self.submitter, "type": self.type, "key": self.key,
                "value": _plain(self.value)}


@dataclass
class LedgerBlock:
    index: int
    prev_hash: str
    payload_hash: str
    timestamp: int
    tx: dict
    hash: str = ""

    def header(self) -> dict:
        return {"index": self.index, "prev_hash": self.prev_hash,
                "payload_hash": self.payload_hash, "timestamp": self.timestamp}

    def to_json(self) -> dict:
        return {**self.header(), "hash": self.hash, "tx": self.tx}

    @classmethod
    def from_json(cls, obj: dict) -> LedgerBlock:
        return cls(obj["index"], obj["prev_hash"], obj["payload_hash"], obj["timestamp"],
                   obj["tx"], obj.get("hash", ""))


class LogicalClock:
    def __init__(self):
        self._t = 0
        self._lock = threading.Lock()

    def tick(self) -> int:
        with self._lock:
            self._t += 1
            return self._t


@dataclass(frozen=True)
class AccessRule:
    channel: str                       # exact name, "agg*" for any local channel, or "*"
    contract: str
    ops: tuple[str, ...]               # "read" covers queries
    predicate: Callable[[Identity, str, dict | None], bool]
    note: str = ""

    def matches(self, channel: str, contract: str, op: str) -> bool:
        if self.channel == "*" or self.channel == channel:
            pass
        elif self.channel == "agg*" and channel.startswith("agg") and channel != GLOBAL:
            pass
        else:
            return False
        return self.contract in ("*", contract) and (op in self.ops or "*" in self.ops)


class AccessPolicy:
    """Deny-by-default rule set."""

    def __init__(self, rules: Iterable[AccessRule] = ()):
        self.rules = list(rules)

    def allowed(self, ident: Identity, channel: str, contract: str, op: str,
                record: dict | None = None) -> bool:
        return any(r.matches(channel, contract, op) and r.predicate(ident, channel, record)
                   for r in self.rules)


def _org_channel(ident: Identity, channel: str) -> bool:
    return ident.org is not None and channel == local_channel(ident.org)


def _readers_ok(ident: Identity, record: dict | None) -> bool:
    if record is None:
        return True
    readers = record.get("readers")
    return readers is None or (ident.org is not None and ident.org in readers)


def default_policy() -> AccessPolicy:
    admin = lambda i: i.role == "admin"  # noqa: E731
    op = lambda i: i.role == "operator"  # noqa: E731
    return AccessPolicy([
        # global ledger: aggregator admins and the operator only
        AccessRule(GLOBAL, "ACT", ("act_init", "act_post_schedule", "act_window"),
                   lambda i, c, r: admin(i) or op(i), "accounts and schedules"),
        AccessRule(GLOBAL, "RC", ("rc_put_round",), lambda i, c, r: admin(i) or op(i), "round records"),
        AccessRule(GLOBAL, "*", ("read",),
                   lambda i, c, r: (admin(i) and _readers_ok(i, r)) or op(i), "edge-scoped reads"),
        # local ledgers: own prosumers bid and read their own records; own admin does the rest
        AccessRule("agg*", "BC", ("bc_submit_bid",),
                   lambda i, c, r: i.role == "prosumer" and _org_channel(i, c), "bids"),
        AccessRule("agg*", "BC", ("bc_post_dispatch",),
                   lambda i, c, r: admin(i) and _org_channel(i, c), "dispatch"),
        AccessRule("agg*", "MC", ("mc_submit_measurements",),
                   lambda i, c, r: (admin(i) or i.role == "meter") and _org_channel(i, c), "meters"),
        AccessRule("agg*", "*", ("read",),
                   lambda i, c, r: _org_channel(i, c) and (
                       admin(i) or (r is not None and r.get("owner") == i.token)), "local reads"),
        AccessRule("*", "*", ("read",), lambda i, c, r: op(i), "operator audit"),
    ])


class Ledger:
    """Hash-chained transaction log over a key-value world state."""

    def __init__(self, name: str, *, clock: LogicalClock | None = None,
                 journal: str | Path | None = None):
        self.name = name
        self.blocks: list[LedgerBlock] = []
        self.state: dict[str, dict] = {}
        self.clock = clock or LogicalClock()
        self._lock = threading.RLock()
        self.journal = Path(journal) if journal is not None else None
        if self.journal is not None:
            try:
                self.journal.parent.mkdir(parents=True, exist_ok=True)
                self.journal.write_text("")
            except OSError as exc:
                raise IoFailure(f"cannot open journal {self.journal}: {exc}") from exc

    def __len__(self) -> int:
        return len(self.blocks)

    def append(self, tx: Transaction) -> int:
        if tx.channel != self.name:
            raise ChannelMismatch(f"transaction for {tx.channel} submitted to {self.name}")
        txj = tx.to_json()
        with self._lock:
            idx = len(self.blocks)
            prev = self.blocks[-1].hash if self.blocks else GENESIS_PREV
            blk = LedgerBlock(idx, prev, digest(txj), self.clock.tick(), txj)
            blk.hash = digest(blk.header())
            if self.journal is not None:
                try:
                    with self.journal.open("a") as fh:
                        fh.write(json.dumps(blk.to_json(), sort_keys=True, separators=(",", ":")) + "\n")
                except OSError as exc:
                    raise IoFailure(f"journal write failed: {exc}") from exc
            self.blocks.append(blk)
            self.state[tx.key] = {"value": txj["value"], "type": tx.type, "submitter": tx.submitter,
                                  "op": tx.op, "block": idx, **_meta(txj["value"])}
            return idx

    @classmethod
    def from_journal(cls, path: str | Path) -> Ledger:
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise IoFailure(f"cannot read journal {path}: {exc}") from exc
        blocks = [LedgerBlock.from_json(json.loads(line)) for line in lines if line.strip()]
        led = cls(blocks[0].tx.get("channel", "?") if blocks else "?")
        led.blocks = blocks
        return led


def _meta(value) -> dict:
    if isinstance(value, dict):
        return {k: value[k] for k in ("readers", "owner", "round", "window", "region") if k in value}
    return {}


def verify_chain(ledger: Ledger | list[LedgerBlock]) -> int | None:
    """Index of the first block that fails recomputation, or None when intact."""
    blocks = ledger.blocks if isinstance(ledger, Ledger) else ledger
    prev = GENESIS_PREV
    for i, blk in enumerate(blocks):
        try:
            ok = (blk.index == i and blk.prev_hash == prev
                  and blk.payload_hash == digest(blk.tx) and blk.hash == digest(blk.header()))
        except (TypeError, ValueError):
            ok = False
        if not ok:
            return i
        prev = blk.hash
    return None


@dataclass
class Bid:
    pid: str
    window: int
    params: dict
    budget: float | None = None


class LedgerNetwork:
    """The global ledger, the local ledgers and the contracts that write them."""

    def __init__(self, regions: Iterable[int], *, policy: AccessPolicy | None = None,
                 journal_dir: str | Path | None = None):
        self.clock = LogicalClock()
        jd = Path(journal_dir) if journal_dir is not None else None
        self.regions = tuple(sorted(regions))
        self.ledgers: dict[str, Ledger] = {
            GLOBAL: Ledger(GLOBAL, clock=self.clock, journal=jd / f"{GLOBAL}.jsonl" if jd else None)}
        for n in self.regions:
            ch = local_channel(n)
            self.ledgers[ch] = Ledger(ch, clock=self.clock, journal=jd / f"{ch}.jsonl" if jd else None)
        self.policy = policy or default_policy()
        self.identities: dict[str, Identity] = {}
        self.bidding_window: int | None = None
        self.operator = self.register(Identity("operator", "operator"))
        self.admins = {n: self.register(Identity(f"admin{n}", "admin", n)) for n in self.regions}

    @property
    def gl(self) -> Ledger:
        return self.ledgers[GLOBAL]

    def ll(self, n: int) -> Ledger:
        return self.ledgers[local_channel(n)]

    def register(self, ident: Identity) -> Identity:
        self.identities[ident.token] = ident
        return ident

    def prosumer(self, pid: str, region: int, kind: str) -> Identity:
        return self.register(Identity(pid, "prosumer", region, (("asset", kind),)))

    def _ident(self, who: Identity | str) -> Identity:
        if isinstance(who, Identity):
            return who
        if who not in self.identities:
            raise AccessDenied(f"unknown identity {who!r}")
        return self.identities[who]

    # -- generic ---------------------------------------------------------

    def submit(self, who: Identity | str, channel: str, contract: str, op: str, key: str, value,
               type_: str = "record") -> int:
        ident = self._ident(who)
        if channel not in self.ledgers:
            raise ChannelMismatch(f"no channel {channel!r}")
        scope = CONTRACTS.get(contract)
        if scope is None or (scope == "global") != (channel == GLOBAL):
            raise ChannelMismatch(f"contract {contract} is not deployed on {channel}")
        if not self.policy.allowed(ident, channel, contract, op):
            raise AccessDenied(f"{ident.token} may not {op} on {channel}")
        tx = Transaction(channel, contract, op, ident.token, type_, key, value)
        return self.ledgers[channel].append(tx)

    def query(self, who: Identity | str, channel: str, key: str | None = None, **selector):
        """Read one key, or every record matching equality filters on
        ``type``, ``round``, ``submitter``, ``window``, ``region`` and a key ``prefix``."""
        ident = self._ident(who)
        if channel not in self.ledgers:
            raise ChannelMismatch(f"no channel {channel!r}")
        led = self.ledgers[channel]
        with led._lock:
            if key is not None:
                rec = led.state.get(key)
                if rec is None:
                    raise NotFound(f"{key!r} not on {channel}")
                if not self.policy.allowed(ident, channel, "*", "read", rec):
                    raise AccessDenied(f"{ident.token} may not read {key!r} on {channel}")
                return rec["value"]
            prefix = selector.pop("prefix", "")
            out = {}
            for k, rec in led.state.items():
                if not k.startswith(prefix):
                    continue
                if any(rec.get(f) != v for f, v in selector.items()):
                    continue
                if not self.policy.allowed(ident, channel, "*", "read", rec):
                    continue
                out[k] = rec["value"]
            return out

    # -- contracts ---------------------------------------------------------

    def act_init(self, who, key: str, value) -> int:
        return self.submit(who, GLOBAL, "ACT", "act_init", f"acct/{key}", value, "account")

    def open_bidding(self, window: int) -> None:
        self.bidding_window = window
        self.submit(self.operator, GLOBAL, "ACT", "act_window", f"window/{window}",
                    {"window": window, "stage": "bidding"}, "window")

    def close_bidding(self) -> None:
        if self.bidding_window is not None:
            self.submit(self.operator, GLOBAL, "ACT", "act_window", f"window/{self.bidding_window}",
                        {"window": self.bidding_window, "stage": "closed"}, "window")
        self.bidding_window = None

    def bc_submit_bid(self, who, window: int, bid: dict) -> int:
        ident = self._ident(who)
        if self.bidding_window is None or window != self.bidding_window:
            raise WindowClosed(f"bidding for window {window} is not open")
        if ident.role != "prosumer":
            raise AccessDenied("only prosumers submit bids")
        # the bid is bound to the submitting identity, never to a claimed id
        value = {**bid, "pid": ident.token, "owner": ident.token, "window": window}
        return self.submit(ident, local_channel(ident.org), "BC", "bc_submit_bid",
                           f"bid/{window}/{ident.token}", value, "bid")

    def bids(self, region: int, window: int) -> dict[str, dict]:
        recs = self.query(self.admins[region], local_channel(region), prefix=f"bid/{window}/")
        return {v["pid"]: v for v in recs.values()}

    def bc_post_dispatch(self, region: int, window: int, pid: str, dispatch, budget: float) -> int:
        return self.submit(self.admins[region], local_channel(region), "BC", "bc_post_dispatch",
                           f"dispatch/{window}/{pid}",
                           {"dispatch": dispatch, "budget": budget, "owner": pid, "window": window},
                           "dispatch")

    def act_post_schedule(self, who, window: int, region: int, per_bus: dict) -> int:
        return self.submit(who, GLOBAL, "ACT", "act_post_schedule", f"schedule/{window}/{region}",
                           {"window": window, "region": region, "buses": per_bus}, "schedule")

    def mc_submit_measurements(self, who, window: int, values, interval: int | None = None) -> int:
        ident = self._ident(who)
        if ident.org is None:
            raise AccessDenied("meter readings must come from an aggregator")
        tag = "all" if interval is None else str(interval)
        return self.submit(ident, local_channel(ident.org), "MC", "mc_submit_measurements",
                           f"meas/{window}/{tag}",
                           {"window": window, "interval": interval, "values": values,
                            "region": ident.org}, "measurement")

    def measurements(self, region: int, window: int):
        recs = self.query(self.admins[region], local_channel(region), prefix=f"meas/{window}/")
        if f"meas/{window}/all" in recs:
            return recs[f"meas/{window}/all"]["values"]
        cols = sorted((v["interval"], v["values"]) for v in recs.values())
        if not cols:
            raise NotFound(f"no readings for window {window} on {local_channel(region)}")
        return np.array([c[1] for c in cols]).T.tolist()

    def rc_put_round(self, who, type_: str, window: int, round_: int, key: str, payload,
                     readers: Iterable[int] | None = None) -> int:
        if type_ not in ("pricing", "verification"):
            raise LedgerError(f"unknown round record type {type_!r}")
        value = {"window": window, "round": round_, "payload": payload}
        if readers is not None:
            value["readers"] = sorted(int(r) for r in readers)
        return self.submit(who, GLOBAL, "RC", "rc_put_round", f"{type_}/{window}/{round_}/{key}",
                           value, type_)

    def verify_all(self) -> dict[str, int | None]:
        return {ch: verify_chain(led) for ch, led in self.ledgers.items()}


class LedgerPricingExchange:
    """Pricing aggregates posted to and collected from the global ledger."""

    def __init__(self, net: LedgerNetwork, window: int, silent: Iterable[int] = ()):
        self.net, self.window, self.silent = net, window, set(silent)

    def post(self, region, k, aggregate):
        if region in self.silent:
            return
        self.net.rc_put_round(self.net.admins[region], "pricing", self.window, k, f"agg{region}",
                              {"region": region, "aggregate": np.asarray(aggregate)})

    def collect(self, k, regions):
        out = {}
        for n in regions:
            try:
                rec = self.net.query(self.net.operator, GLOBAL, f"pricing/{self.window}/{k}/agg{n}")
            except NotFound:
                continue
            out[n] = np.asarray(rec["payload"]["aggregate"], dtype=float)
        return out


class LedgerVerificationExchange:
    """Shared-variable messages through the global ledger, readable only by
    the two aggregators on the edge."""

    def __init__(self, net: LedgerNetwork, window: int):
        self.net, self.window = net, window

    def send(self, k, sender, receiver, payload):
        self.net.rc_put_round(self.net.admins[sender], "verification", self.window, k,
                              f"{sender}-{receiver}", np.asarray(payload), readers=(sender, receiver))

    def receive(self, k, receiver, sender):
        try:
            rec = self.net.query(self.net.admins[receiver], GLOBAL,
                                 f"verification/{self.window}/{k}/{sender}-{receiver}")
        except NotFound:
            return None
        return np.asarray(rec["payload"], dtype=float)

    def publish_row(self, k, region, row):
        self.net.rc_put_round(self.net.admins[region], "verification", self.window, k,
                              f"B{region}", {str(m): v for m, v in row.items()})
