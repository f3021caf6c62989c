"""Inter-sensor wire format: one JSON object per newline-terminated line.

Three message kinds flow between sensors:

  data  -- the per-window (q, d) statistics a child pushes to its parent
  cmd   -- an analyst-triggered request, currently only action "diagnose"
  resp  -- the diagnosis result travelling back down the command connection

Every line carries a protocol version ``v``; unknown versions are rejected.
Field order is fixed (v, kind, sender, window, then kind-specific fields) so
encoding is byte-deterministic.  Floats are serialized with ``repr`` and so
survive the round trip bit-exactly.  Raw excerpt lines may contain anything;
JSON escaping keeps each message on a single wire line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from msnmon.errors import ProtocolError

PROTOCOL_VERSION = 1


@dataclass(frozen=True)
class DataMessage:
    sender: str
    window: int
    q: float
    d: float


@dataclass(frozen=True)
class CommandMessage:
    sender: str
    window: int
    action: str = "diagnose"


@dataclass(frozen=True)
class ResponseMessage:
    sender: str
    window: int
    status: str  # "ok" | "incomplete" | "not_found"
    chain: tuple[str, ...]
    top: tuple[tuple[str, float], ...]  # (variable name, contribution)
    raw: tuple[str, ...]


Message = DataMessage | CommandMessage | ResponseMessage

_KINDS = {DataMessage: "data", CommandMessage: "cmd", ResponseMessage: "resp"}


def _num(x: float) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ProtocolError(f"numeric field has type {type(x).__name__}")
    return float(x)


def encode(msg: Message) -> str:
    """One newline-terminated wire line per message."""
    kind = _KINDS.get(type(msg))
    if kind is None:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    body: dict = {"v": PROTOCOL_VERSION, "kind": kind, "sender": msg.sender,
                  "window": int(msg.window)}
    if isinstance(msg, DataMessage):
        body["q"] = float(msg.q)
        body["d"] = float(msg.d)
    elif isinstance(msg, CommandMessage):
        body["action"] = msg.action
    else:
        body["status"] = msg.status
        body["chain"] = list(msg.chain)
        body["top"] = [{"name": n, "value": float(v)} for n, v in msg.top]
        body["raw"] = list(msg.raw)
    line = json.dumps(body, separators=(",", ":"), ensure_ascii=False)
    if "\n" in line:  # json escapes newlines; this would be an encoder bug
        raise ProtocolError("encoded message contains an interior newline")
    return line + "\n"


def decode(line: str) -> Message:
    """Parse one wire line back into a message, or raise ProtocolError."""
    line = line.rstrip("\n")
    try:
        body = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed wire line: {exc}") from exc
    if not isinstance(body, dict):
        raise ProtocolError("wire line is not an object")
    version = body.get("v")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version!r}")
    kind = body.get("kind")
    try:
        sender = body["sender"]
        window = body["window"]
        if not isinstance(sender, str) or not sender:
            raise ProtocolError("sender must be a nonempty string")
        if not isinstance(window, int) or isinstance(window, bool):
            raise ProtocolError("window must be an integer")
        if kind == "data":
            return DataMessage(
                sender=sender, window=window, q=_num(body["q"]), d=_num(body["d"])
            )
        if kind == "cmd":
            action = body["action"]
            if not isinstance(action, str):
                raise ProtocolError("action must be a string")
            return CommandMessage(sender=sender, window=window, action=action)
        if kind == "resp":
            status = body["status"]
            chain = body["chain"]
            top = body["top"]
            raw = body["raw"]
            if not isinstance(status, str):
                raise ProtocolError("status must be a string")
            if not isinstance(chain, list) or not all(isinstance(c, str) for c in chain):
                raise ProtocolError("chain must be a list of strings")
            if not isinstance(raw, list) or not all(isinstance(r, str) for r in raw):
                raise ProtocolError("raw must be a list of strings")
            if not isinstance(top, list):
                raise ProtocolError("top must be a list")
            pairs = []
            for item in top:
                if (
                    not isinstance(item, dict)
                    or not isinstance(item.get("name"), str)
                    or "value" not in item
                ):
                    raise ProtocolError("top entries must be {name, value} objects")
                pairs.append((item["name"], _num(item["value"])))
            return ResponseMessage(
                sender=sender,
                window=window,
                status=status,
                chain=tuple(chain),
                top=tuple(pairs),
                raw=tuple(raw),
            )
    except KeyError as exc:
        raise ProtocolError(f"missing field {exc.args[0]!r} in {kind!r} message") from exc
    raise ProtocolError(f"unknown message kind {kind!r}")
