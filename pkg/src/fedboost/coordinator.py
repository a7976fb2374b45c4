"""Analysis-server side: fans requests out to sites and pools the sums.

The coordinator implements the aggregate-provider interface the boosting
engine consumes: a univariable round plus on-demand covariance blocks.  Every
pooled value is an elementwise sum of per-site sums, so pooling loses no
information relative to computing the same statistic on the concatenated
data.  A :class:`CallLedger` tracks logical data calls (one per fetch event,
regardless of the number of sites) and the number of covariance values
transferred; standardization rounds are counted separately.
"""

from __future__ import annotations

import dataclasses
import socket
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import protocol
from .boostcore import BoostingConfig, run_boosting
from .protocol import (Ack, ApplyGlobalStandardization, CovarianceBlock,
                       CovarianceValues, Describe, DisclosurePolicy,
                       GlobalMeans, GlobalSsq, MomentSums, Refusal, SiteMeta,
                       SsqSums, StandardizeLocal, UnivariableStats,
                       UnivariableValues)
from .sitenode import DegenerateColumnError, SiteDataset, SiteSession

LOCAL = "local"
GLOBAL = "global"


class SiteError(RuntimeError):
    """A site refused a request or failed; the run cannot continue."""

    def __init__(self, site_id, reason):
        super().__init__(f"site {site_id}: {reason}")
        self.site_id = site_id
        self.reason = reason


class PoolingError(RuntimeError):
    pass


class LengthMismatchError(PoolingError):
    pass


class MissingSiteError(PoolingError):
    pass


class PairMismatchError(PoolingError):
    pass


@dataclass
class CallLedger:
    """Traffic accounting for one analysis run.

    ``data_calls`` counts the univariable round plus every covariance fetch;
    ``covariance_values`` counts pooled covariance entries (one per distinct
    pair per call, not per site).  ``history`` holds one cumulative row per
    boosting step for call-size-versus-step summaries.
    """

    setup_rounds: int = 0
    univariable_calls: int = 0
    covariance_calls: int = 0
    covariance_values: int = 0
    per_site: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def data_calls(self) -> int:
        return self.univariable_calls + self.covariance_calls

    def record_setup_round(self) -> None:
        self.setup_rounds += 1

    def record_univariable_call(self) -> None:
        self.univariable_calls += 1

    def record_covariance_call(self, n_pairs: int) -> None:
        self.covariance_calls += 1
        self.covariance_values += n_pairs

    def record_site_request(self, site_id, n_values: int = 0) -> None:
        entry = self.per_site.setdefault(site_id, {"requests": 0, "values": 0})
        entry["requests"] += 1
        entry["values"] += n_values

    def snapshot(self, step: int, model_size: int) -> None:
        self.history.append({"step": step, "model_size": model_size,
                             "covariance_calls": self.covariance_calls,
                             "covariance_values": self.covariance_values})

    def to_rows(self) -> list[tuple[str, int]]:
        rows = [("setup_rounds", self.setup_rounds),
                ("univariable_calls", self.univariable_calls),
                ("covariance_calls", self.covariance_calls),
                ("data_calls", self.data_calls),
                ("covariance_values", self.covariance_values)]
        for site_id in sorted(self.per_site):
            entry = self.per_site[site_id]
            rows.append((f"site_{site_id}_requests", entry["requests"]))
            rows.append((f"site_{site_id}_values", entry["values"]))
        return rows


class AggregateProvider(Protocol):
    """What the boosting engine needs from any data backend."""

    ledger: CallLedger

    def fetch_univariable(self) -> tuple[np.ndarray, np.ndarray]: ...

    def fetch_covariances(self, pairs) -> list[tuple[int, int, float]]: ...


# --- pooling --------------------------------------------------------------

def pool_univariable(responses) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise sums of per-site (a, c_diag) arrays."""
    responses = list(responses)
    if not responses:
        raise MissingSiteError("no site responses to pool")
    p = len(responses[0][0])
    a = np.zeros(p)
    c_diag = np.zeros(p)
    for site_a, site_c in responses:
        site_a = np.asarray(site_a, dtype=float)
        site_c = np.asarray(site_c, dtype=float)
        if site_a.shape != (p,) or site_c.shape != (p,):
            raise LengthMismatchError(
                f"expected arrays of length {p}, got {site_a.shape} / {site_c.shape}")
        a += site_a
        c_diag += site_c
    return a, c_diag


def pool_covariances(responses, pairs) -> list[tuple[int, int, float]]:
    """Per-pair sums across sites; each site must cover exactly ``pairs``."""
    responses = list(responses)
    if not responses:
        raise MissingSiteError("no site responses to pool")
    totals = np.zeros(len(pairs))
    for values in responses:
        if len(values) != len(pairs):
            raise PairMismatchError(
                f"site returned {len(values)} values for {len(pairs)} pairs")
        for i, ((j, k, value), want) in enumerate(zip(values, pairs)):
            if (j, k) != tuple(want):
                raise PairMismatchError(f"expected pair {tuple(want)}, got ({j},{k})")
            totals[i] += value
    return [(int(j), int(k), float(v)) for (j, k), v in zip(pairs, totals)]


# --- transports -----------------------------------------------------------

class InProcessChannel:
    """Talks to a SiteSession in this process, through the wire encoding."""

    def __init__(self, session: SiteSession):
        self.session = session
        self._next_id = 1

    def request(self, msg):
        msg = dataclasses.replace(msg, request_id=self._next_id)
        self._next_id += 1
        return protocol.decode(self.session.handle_frame(protocol.encode(msg)))

    def close(self) -> None:
        pass


class SocketChannel:
    """One persistent connection to a site process."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.address = f"{host}:{port}"
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._stream = self._sock.makefile("rwb")
        self._next_id = 1

    def request(self, msg):
        msg = dataclasses.replace(msg, request_id=self._next_id)
        self._next_id += 1
        protocol.write_message(self._stream, msg)
        resp = protocol.read_message(self._stream)
        if resp is None:
            raise ConnectionError(f"{self.address}: connection closed by site")
        return resp

    def close(self) -> None:
        try:
            self._stream.close()
        finally:
            self._sock.close()


@dataclass
class SiteHandle:
    channel: object
    site_id: int
    meta: SiteMeta | None = None


class Coordinator:
    """Broadcasts requests, pools responses, owns the call ledger."""

    def __init__(self, channels, ledger: CallLedger | None = None):
        self.sites = [SiteHandle(channel=ch, site_id=i)
                      for i, ch in enumerate(channels)]
        if not self.sites:
            raise MissingSiteError("coordinator needs at least one site")
        self.ledger = ledger if ledger is not None else CallLedger()
        self.p: int | None = None
        self.n_total: int | None = None

    def close(self) -> None:
        for site in self.sites:
            site.channel.close()

    def _ask(self, site: SiteHandle, msg, expect, n_values: int = 0):
        try:
            resp = site.channel.request(msg)
        except (OSError, protocol.ProtocolError) as exc:
            raise SiteError(site.site_id, str(exc)) from exc
        self.ledger.record_site_request(site.site_id, n_values)
        if isinstance(resp, Refusal):
            raise SiteError(site.site_id, resp.reason)
        if not isinstance(resp, expect):
            raise SiteError(site.site_id,
                            f"expected {expect.__name__}, got {type(resp).__name__}")
        return resp

    def _broadcast(self, msg, expect, n_values: int = 0):
        return [self._ask(site, msg, expect, n_values) for site in self.sites]

    def describe(self) -> list[SiteMeta]:
        """Handshake: collect site metadata and check a common p."""
        metas = self._broadcast(Describe(), SiteMeta)
        ps = {meta.p for meta in metas}
        if len(ps) != 1:
            raise LengthMismatchError(f"sites disagree on p: {sorted(ps)}")
        for site, meta in zip(self.sites, metas):
            site.meta = meta
        self.p = ps.pop()
        self.n_total = sum(meta.n_l for meta in metas)
        self.ledger.record_setup_round()
        return metas

    def standardize(self, mode: str) -> None:
        """Run the standardization rounds; local is one round, global three."""
        if self.p is None:
            self.describe()
        if mode == LOCAL:
            self._broadcast(StandardizeLocal(), Ack)
            self.ledger.record_setup_round()
            return
        if mode != GLOBAL:
            raise ValueError(f"unknown standardization mode {mode!r}")
        moments = self._broadcast(GlobalMeans(), MomentSums)
        self.ledger.record_setup_round()
        n = sum(m.n_l for m in moments)
        sum_x = np.sum([m.sum_x for m in moments], axis=0)
        sum_y = sum(m.sum_y for m in moments)
        means = sum_x / n
        y_mean = sum_y / n
        ssqs = self._broadcast(GlobalSsq(means=means, y_mean=y_mean), SsqSums)
        self.ledger.record_setup_round()
        ssq_x = np.sum([s.ssq_x for s in ssqs], axis=0)
        if (ssq_x == 0).any():
            raise DegenerateColumnError(int(np.flatnonzero(ssq_x == 0)[0]))
        sds = np.sqrt(ssq_x / (n - 1))
        self._broadcast(ApplyGlobalStandardization(means=means, sds=sds,
                                                   y_mean=y_mean), Ack)
        self.ledger.record_setup_round()

    # --- aggregate-provider interface ---------------------------------------

    def fetch_univariable(self) -> tuple[np.ndarray, np.ndarray]:
        responses = self._broadcast(UnivariableStats(), UnivariableValues)
        self.ledger.record_univariable_call()
        return pool_univariable((r.a, r.c_diag) for r in responses)

    def fetch_covariances(self, pairs) -> list[tuple[int, int, float]]:
        """One logical data call; large pair lists are split across frames."""
        pairs = [(int(j), int(k)) for j, k in pairs]
        pooled: list[tuple[int, int, float]] = []
        for start in range(0, len(pairs), protocol.MAX_PAIRS_PER_MESSAGE):
            chunk = pairs[start:start + protocol.MAX_PAIRS_PER_MESSAGE]
            responses = self._broadcast(CovarianceBlock(pairs=chunk),
                                        CovarianceValues, n_values=len(chunk))
            pooled.extend(pool_covariances((r.values for r in responses), chunk))
        self.ledger.record_covariance_call(len(pairs))
        return pooled


class DirectAggregateProvider:
    """Aggregates served straight from one standardized in-memory dataset.

    Bypasses the wire protocol entirely; used for fast tests and for call
    accounting studies where transport is irrelevant.  ``x`` must already be
    standardized and ``y`` centered.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray):
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.ledger = CallLedger()

    def fetch_univariable(self):
        self.ledger.record_univariable_call()
        a = self.x.T @ self.y
        c_diag = np.einsum("ij,ij->j", self.x, self.x)
        return a, c_diag

    def fetch_covariances(self, pairs):
        js = np.array([j for j, _ in pairs], dtype=np.intp)
        ks = np.array([k for _, k in pairs], dtype=np.intp)
        values = np.einsum("ij,ij->j", self.x[:, js], self.x[:, ks])
        self.ledger.record_covariance_call(len(pairs))
        return [(int(j), int(k), float(v)) for j, k, v in zip(js, ks, values)]


class PooledSitesProvider:
    """Per-site aggregates pooled without the wire layer.

    Bit-identical to a :class:`Coordinator` over in-process sessions: the
    same site code computes each per-site sum, the same pooling helpers add
    them in site order, and the wire encoding is value-exact so skipping it
    changes no bits.  Useful for large replication loops where transport is
    not the thing under study.
    """

    def __init__(self, site_data, standardize: str = LOCAL):
        self.sites = [ds if isinstance(ds, SiteDataset) else SiteDataset(*ds)
                      for ds in site_data]
        self.ledger = CallLedger()
        self.ledger.record_setup_round()  # describe equivalent
        if standardize == LOCAL:
            for site in self.sites:
                site.standardize_local()
            self.ledger.record_setup_round()
        elif standardize == GLOBAL:
            # mirror Coordinator.standardize arithmetic exactly
            moments = [site.global_moment_contrib() for site in self.sites]
            n = sum(m[0] for m in moments)
            sum_x = np.sum([m[2] for m in moments], axis=0)
            sum_y = sum(m[1] for m in moments)
            means = sum_x / n
            y_mean = sum_y / n
            ssq_x = np.sum([site.global_ssq_contrib(means, y_mean)[0]
                            for site in self.sites], axis=0)
            if (ssq_x == 0).any():
                raise DegenerateColumnError(int(np.flatnonzero(ssq_x == 0)[0]))
            sds = np.sqrt(ssq_x / (n - 1))
            for site in self.sites:
                site.apply_global(means, sds, y_mean)
            for _ in range(3):
                self.ledger.record_setup_round()
        else:
            raise ValueError(f"unknown standardization mode {standardize!r}")

    def fetch_univariable(self):
        responses = [site.univariable_stats() for site in self.sites]
        self.ledger.record_univariable_call()
        return pool_univariable(responses)

    def fetch_covariances(self, pairs):
        pairs = [(int(j), int(k)) for j, k in pairs]
        responses = [site.covariance_block(pairs) for site in self.sites]
        self.ledger.record_covariance_call(len(pairs))
        return pool_covariances(responses, pairs)


def run_pooled_sites(datasets, config: BoostingConfig, standardize: str = LOCAL):
    """Like :func:`run_inprocess` but through :class:`PooledSitesProvider`."""
    provider = PooledSitesProvider(datasets, standardize=standardize)
    return run_boosting(provider, config)


def run_inprocess(datasets, config: BoostingConfig, standardize: str = LOCAL,
                  min_site_n: int = 1):
    """Wire up in-process sites, standardize, and run one boosting analysis.

    ``datasets`` may be SiteDataset objects or (x, y) array pairs.  Returns
    the final boosting state and the call ledger.
    """
    sites = [ds if isinstance(ds, SiteDataset) else SiteDataset(*ds)
             for ds in datasets]
    policy = DisclosurePolicy(min_site_n=min_site_n)
    channels = [InProcessChannel(SiteSession(site, policy)) for site in sites]
    coordinator = Coordinator(channels)
    coordinator.describe()
    coordinator.standardize(standardize)
    return run_boosting(coordinator, config)
