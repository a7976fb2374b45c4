"""Wire messages between the analysis coordinator and the data sites.

A frame is a 4-byte big-endian length prefix followed by a UTF-8 JSON body
with a fixed field order and a leading ``"version": 1`` field.  Floats are
written with 17 significant decimal digits so that decode(encode(m)) == m
bit-exactly and independent implementations of this format agree on every
value.  No message variant ever carries an individual-level data row.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

VERSION = 1
HEADER_SIZE = 4
MAX_BODY_SIZE = 64 * 1024 * 1024
MAX_PAIRS_PER_MESSAGE = 65536


class ProtocolError(Exception):
    pass


class MalformedFrameError(ProtocolError):
    pass


class UnknownVariantError(ProtocolError):
    pass


class VersionMismatchError(ProtocolError):
    pass


def _float_list(values):
    return [float(v) for v in values]


def _pair_list(pairs):
    out = []
    seen = set()
    for j, k in pairs:
        j, k = int(j), int(k)
        if j == k:
            raise ValueError(f"diagonal pair ({j},{j}) not allowed")
        if j < 0 or k < 0:
            raise ValueError(f"negative index in pair ({j},{k})")
        pair = (min(j, k), max(j, k))
        if pair in seen:
            raise ValueError(f"duplicate pair {pair}")
        seen.add(pair)
        out.append(pair)
    if len(out) > MAX_PAIRS_PER_MESSAGE:
        raise ValueError(f"{len(out)} pairs exceed the per-message cap "
                         f"of {MAX_PAIRS_PER_MESSAGE}")
    return out


# --- requests -------------------------------------------------------------

@dataclass
class Describe:
    request_id: int = 0


@dataclass
class StandardizeLocal:
    request_id: int = 0


@dataclass
class GlobalMeans:
    request_id: int = 0


@dataclass
class GlobalSsq:
    means: list = field(default_factory=list)
    y_mean: float = 0.0
    request_id: int = 0

    def __post_init__(self):
        self.means = _float_list(self.means)
        self.y_mean = float(self.y_mean)


@dataclass
class ApplyGlobalStandardization:
    means: list = field(default_factory=list)
    sds: list = field(default_factory=list)
    y_mean: float = 0.0
    request_id: int = 0

    def __post_init__(self):
        self.means = _float_list(self.means)
        self.sds = _float_list(self.sds)
        self.y_mean = float(self.y_mean)


@dataclass
class UnivariableStats:
    request_id: int = 0


@dataclass
class CovarianceBlock:
    pairs: list = field(default_factory=list)
    request_id: int = 0

    def __post_init__(self):
        self.pairs = _pair_list(self.pairs)


# --- responses ------------------------------------------------------------

@dataclass
class SiteMeta:
    n_l: int = 0
    p: int = 0
    request_id: int = 0


@dataclass
class Ack:
    request_id: int = 0


@dataclass
class MomentSums:
    n_l: int = 0
    sum_y: float = 0.0
    sum_x: list = field(default_factory=list)
    request_id: int = 0

    def __post_init__(self):
        self.sum_y = float(self.sum_y)
        self.sum_x = _float_list(self.sum_x)


@dataclass
class SsqSums:
    ssq_x: list = field(default_factory=list)
    ssq_y: float = 0.0
    request_id: int = 0

    def __post_init__(self):
        self.ssq_x = _float_list(self.ssq_x)
        self.ssq_y = float(self.ssq_y)


@dataclass
class UnivariableValues:
    a: list = field(default_factory=list)
    c_diag: list = field(default_factory=list)
    request_id: int = 0

    def __post_init__(self):
        self.a = _float_list(self.a)
        self.c_diag = _float_list(self.c_diag)


@dataclass
class CovarianceValues:
    values: list = field(default_factory=list)  # (j, k, value) triples
    request_id: int = 0

    def __post_init__(self):
        self.values = [(int(j), int(k), float(v)) for j, k, v in self.values]


@dataclass
class Refusal:
    reason: str = ""
    request_id: int = 0


REQUEST_TYPES = (Describe, StandardizeLocal, GlobalMeans, GlobalSsq,
                 ApplyGlobalStandardization, UnivariableStats, CovarianceBlock)
RESPONSE_TYPES = (SiteMeta, Ack, MomentSums, SsqSums, UnivariableValues,
                  CovarianceValues, Refusal)

# field name -> serialized shape, in canonical body order
_SCHEMAS = {
    Describe: (),
    StandardizeLocal: (),
    GlobalMeans: (),
    GlobalSsq: (("means", "floats"), ("y_mean", "float")),
    ApplyGlobalStandardization: (("means", "floats"), ("sds", "floats"),
                                 ("y_mean", "float")),
    UnivariableStats: (),
    CovarianceBlock: (("pairs", "pairs"),),
    SiteMeta: (("n_l", "int"), ("p", "int")),
    Ack: (),
    MomentSums: (("n_l", "int"), ("sum_y", "float"), ("sum_x", "floats")),
    SsqSums: (("ssq_x", "floats"), ("ssq_y", "float")),
    UnivariableValues: (("a", "floats"), ("c_diag", "floats")),
    CovarianceValues: (("values", "triples"),),
    Refusal: (("reason", "str"),),
}

_BY_VARIANT = {("request" if t in REQUEST_TYPES else "response", t.__name__): t
               for t in REQUEST_TYPES + RESPONSE_TYPES}


def _fmt_float(v) -> str:
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {v!r} cannot be serialized")
    s = "%.17g" % v
    if "." not in s and "e" not in s and "E" not in s:
        s += ".0"  # keep a float a float on the wire (notably -0.0)
    return s


def _fmt_field(value, shape) -> str:
    if shape == "int":
        return "%d" % int(value)
    if shape == "float":
        return _fmt_float(value)
    if shape == "floats":
        return "[" + ",".join(_fmt_float(v) for v in value) + "]"
    if shape == "pairs":
        return "[" + ",".join("[%d,%d]" % (j, k) for j, k in value) + "]"
    if shape == "triples":
        return "[" + ",".join("[%d,%d,%s]" % (j, k, _fmt_float(v))
                              for j, k, v in value) + "]"
    if shape == "str":
        return json.dumps(value, ensure_ascii=False)
    raise AssertionError(shape)


def _parse_field(raw, shape):
    if shape == "int":
        if not isinstance(raw, int) or isinstance(raw, bool):
            raise MalformedFrameError(f"expected integer, got {raw!r}")
        return raw
    if shape == "float":
        if not isinstance(raw, (int, float)) or isinstance(raw, bool):
            raise MalformedFrameError(f"expected number, got {raw!r}")
        return float(raw)
    if shape == "floats":
        if not isinstance(raw, list):
            raise MalformedFrameError("expected a list of numbers")
        return [_parse_field(v, "float") for v in raw]
    if shape == "pairs":
        if not isinstance(raw, list):
            raise MalformedFrameError("expected a list of pairs")
        try:
            return [(int(j), int(k)) for j, k in raw]
        except (TypeError, ValueError) as exc:
            raise MalformedFrameError(f"bad pair list: {exc}") from exc
    if shape == "triples":
        if not isinstance(raw, list):
            raise MalformedFrameError("expected a list of triples")
        try:
            return [(int(j), int(k), float(v)) for j, k, v in raw]
        except (TypeError, ValueError) as exc:
            raise MalformedFrameError(f"bad value list: {exc}") from exc
    if shape == "str":
        if not isinstance(raw, str):
            raise MalformedFrameError(f"expected string, got {raw!r}")
        return raw
    raise AssertionError(shape)


def encode(msg) -> bytes:
    """Serialize a message into one length-prefixed frame."""
    cls = type(msg)
    if cls not in _SCHEMAS:
        raise UnknownVariantError(f"{cls.__name__} is not a protocol message")
    kind = "request" if cls in REQUEST_TYPES else "response"
    parts = ['"version":%d' % VERSION,
             '"kind":"%s"' % kind,
             '"variant":"%s"' % cls.__name__,
             '"request_id":%d' % int(msg.request_id)]
    for name, shape in _SCHEMAS[cls]:
        parts.append('"%s":%s' % (name, _fmt_field(getattr(msg, name), shape)))
    body = ("{" + ",".join(parts) + "}").encode("utf-8")
    if len(body) > MAX_BODY_SIZE:
        raise ValueError(f"message body of {len(body)} bytes exceeds cap")
    return struct.pack(">I", len(body)) + body


def decode(frame: bytes):
    """Parse one full frame back into a message; inverse of :func:`encode`."""
    if len(frame) < HEADER_SIZE:
        raise MalformedFrameError(f"frame of {len(frame)} bytes has no header")
    (length,) = struct.unpack(">I", frame[:HEADER_SIZE])
    body = frame[HEADER_SIZE:]
    if len(body) != length:
        raise MalformedFrameError(f"header says {length} bytes, got {len(body)}")
    return decode_body(body)


def decode_body(body: bytes):
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFrameError(f"body is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedFrameError("body is not a JSON object")
    version = obj.pop("version", None)
    if version != VERSION:
        raise VersionMismatchError(f"expected version {VERSION}, got {version!r}")
    kind = obj.pop("kind", None)
    variant = obj.pop("variant", None)
    cls = _BY_VARIANT.get((kind, variant))
    if cls is None:
        raise UnknownVariantError(f"unknown message {kind!r}/{variant!r}")
    request_id = _parse_field(obj.pop("request_id", None), "int")
    kwargs = {}
    for name, shape in _SCHEMAS[cls]:
        if name not in obj:
            raise MalformedFrameError(f"{variant} is missing field {name!r}")
        kwargs[name] = _parse_field(obj.pop(name), shape)
    if obj:
        raise MalformedFrameError(f"{variant} has unexpected fields {sorted(obj)}")
    try:
        return cls(request_id=request_id, **kwargs)
    except ValueError as exc:
        raise MalformedFrameError(str(exc)) from exc


def write_message(stream, msg) -> None:
    stream.write(encode(msg))
    stream.flush()


def read_message(stream):
    """Read one message from a blocking binary stream; None on clean EOF."""
    header = stream.read(HEADER_SIZE)
    if header == b"":
        return None
    if len(header) < HEADER_SIZE:
        raise MalformedFrameError("connection closed mid-header")
    (length,) = struct.unpack(">I", header)
    if length > MAX_BODY_SIZE:
        raise MalformedFrameError(f"advertised body of {length} bytes exceeds cap")
    body = b""
    while len(body) < length:
        chunk = stream.read(length - len(body))
        if not chunk:
            raise MalformedFrameError("connection closed mid-body")
        body += chunk
    return decode_body(body)


# --- disclosure guard -----------------------------------------------------

# request variants whose response would carry data-derived statistics
STATISTIC_BEARING = (GlobalMeans, GlobalSsq, UnivariableStats, CovarianceBlock)


@dataclass
class DisclosurePolicy:
    """Minimum cohort size below which a site refuses to serve statistics."""

    min_site_n: int = 10

    def __post_init__(self):
        if self.min_site_n < 1:
            raise ValueError("min_site_n must be >= 1")


def check_disclosure(req, meta: SiteMeta, policy: DisclosurePolicy):
    """Return None to allow, or a Refusal for the site to send instead.

    Describe is always answered; requests that only push parameters to the
    site (standardization instructions) are allowed as well, since nothing
    derived from the data leaves the site.
    """
    if isinstance(req, STATISTIC_BEARING) and meta.n_l < policy.min_site_n:
        return Refusal(reason=f"site too small: n={meta.n_l} < "
                              f"min_site_n={policy.min_site_n}",
                       request_id=req.request_id)
    return None
