"""One data site: holds individual-level rows, serves only aggregates.

This module is the only place where individual-level data exists.  Every
outgoing payload is a sum over the site's rows (cross-products, squared
sums, covariance entries), so nothing proportional to the number of
individuals ever leaves the process.
"""

from __future__ import annotations

import logging
import socket
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import protocol
from .protocol import (Ack, ApplyGlobalStandardization, CovarianceBlock,
                       CovarianceValues, Describe, DisclosurePolicy,
                       GlobalMeans, GlobalSsq, MomentSums, Refusal, SiteMeta,
                       SsqSums, StandardizeLocal, UnivariableStats,
                       UnivariableValues, check_disclosure)

log = logging.getLogger("fedboost.site")

LOCAL = "local"
GLOBAL = "global"


class DegenerateColumnError(ValueError):
    """A covariate column is constant within this site."""

    def __init__(self, j):
        super().__init__(f"column {j} has zero variance at this site")
        self.column = j


class NotStandardizedError(RuntimeError):
    pass


class IndexOutOfRangeError(IndexError):
    pass


@dataclass
class StandardizationParams:
    mode: str
    means: np.ndarray
    sds: np.ndarray
    y_mean: float

    def __post_init__(self):
        if (np.asarray(self.sds) <= 0).any():
            raise DegenerateColumnError(int(np.flatnonzero(np.asarray(self.sds) <= 0)[0]))


class SiteDataset:
    """One cohort's covariate matrix and binary outcome.

    ``x`` and ``y`` start raw; :meth:`standardize_local` or
    :meth:`apply_global` replace them with centered/scaled versions and set
    ``std_mode``.  The raw arrays are kept so standardization is
    reproducible from scratch.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray):
        # fix the memory layout so reductions round identically no matter
        # how the data arrived (CSV loads come back column-major)
        x = np.ascontiguousarray(x, dtype=float)
        y = np.ascontiguousarray(y, dtype=float)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"incompatible shapes x{x.shape}, y{y.shape}")
        if x.shape[0] < 1:
            raise ValueError("a site needs at least one individual")
        if not np.isfinite(x).all() or not np.isfinite(y).all():
            raise ValueError("dataset contains non-finite values")
        self.raw_x = x
        self.raw_y = y
        self.x = x
        self.y = y
        self.n_l, self.p = x.shape
        self.std_mode: str | None = None
        self.params: StandardizationParams | None = None

    @classmethod
    def from_csv(cls, path) -> "SiteDataset":
        """Load ``x1..xp`` columns plus a ``y`` column from a CSV file."""
        frame = pd.read_csv(path)
        if "y" not in frame.columns:
            raise ValueError(f"{path}: no outcome column named 'y'")
        xcols = [c for c in frame.columns if c != "y"]
        expected = [f"x{j}" for j in range(1, len(xcols) + 1)]
        if xcols != expected:
            raise ValueError(f"{path}: covariate columns must be x1..x{len(xcols)} in order")
        y = frame["y"].to_numpy(dtype=float)
        if not np.isin(y, (0.0, 1.0)).all():
            raise ValueError(f"{path}: outcome must be binary 0/1")
        return cls(frame[xcols].to_numpy(dtype=float), y)

    # --- standardization ---------------------------------------------------

    def standardize_local(self) -> StandardizationParams:
        """Center/scale columns to sum-of-squares n_l - 1, center y."""
        means = self.raw_x.mean(axis=0)
        centered = self.raw_x - means
        ssq = np.einsum("ij,ij->j", centered, centered)
        if (ssq == 0).any():
            raise DegenerateColumnError(int(np.flatnonzero(ssq == 0)[0]))
        sds = np.sqrt(ssq / (self.n_l - 1))
        y_mean = self.raw_y.mean()
        self.x = centered / sds
        self.y = self.raw_y - y_mean
        self.std_mode = LOCAL
        self.params = StandardizationParams(LOCAL, means, sds, float(y_mean))
        return self.params

    def global_moment_contrib(self) -> tuple[int, float, np.ndarray]:
        """(n_l, sum of raw y, per-column sum of raw x)."""
        return self.n_l, float(self.raw_y.sum()), self.raw_x.sum(axis=0)

    def global_ssq_contrib(self, means, y_mean) -> tuple[np.ndarray, float]:
        """Centered sums of squares given broadcast global means."""
        centered = self.raw_x - np.asarray(means, dtype=float)
        ssq_x = np.einsum("ij,ij->j", centered, centered)
        ssq_y = float(((self.raw_y - float(y_mean)) ** 2).sum())
        return ssq_x, ssq_y

    def apply_global(self, means, sds, y_mean) -> StandardizationParams:
        """Apply coordinator-computed global centering and scaling."""
        means = np.asarray(means, dtype=float)
        sds = np.asarray(sds, dtype=float)
        if means.shape != (self.p,) or sds.shape != (self.p,):
            raise ValueError("global parameter length does not match p")
        if (sds <= 0).any() or not np.isfinite(sds).all():
            raise DegenerateColumnError(int(np.flatnonzero(~(sds > 0))[0]))
        self.x = (self.raw_x - means) / sds
        self.y = self.raw_y - float(y_mean)
        self.std_mode = GLOBAL
        self.params = StandardizationParams(GLOBAL, means, sds, float(y_mean))
        return self.params

    # --- aggregate statistics ----------------------------------------------

    def univariable_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Cross-products a_j = sum_i x_ij y_i and diagonal entries sum_i x_ij^2."""
        if self.std_mode is None:
            raise NotStandardizedError("standardize before requesting statistics")
        a = self.x.T @ self.y
        if self.std_mode == LOCAL:
            # The local scaling makes every column's sum of squares n_l - 1
            # by definition; serve the exact value instead of re-rounding it.
            c_diag = np.full(self.p, float(self.n_l - 1))
        else:
            c_diag = np.einsum("ij,ij->j", self.x, self.x)
        return a, c_diag

    def covariance_block(self, pairs) -> list[tuple[int, int, float]]:
        """Cross-product sum_i x_ij x_ik for each requested pair."""
        if self.std_mode is None:
            raise NotStandardizedError("standardize before requesting statistics")
        if not pairs:
            return []
        js = np.array([j for j, _ in pairs], dtype=np.intp)
        ks = np.array([k for _, k in pairs], dtype=np.intp)
        if js.min() < 0 or ks.min() < 0 or js.max() >= self.p or ks.max() >= self.p:
            raise IndexOutOfRangeError(f"pair index outside 0..{self.p - 1}")
        values = np.einsum("ij,ij->j", self.x[:, js], self.x[:, ks])
        return [(int(j), int(k), float(v)) for j, k, v in zip(js, ks, values)]


class SiteSession:
    """Protocol-level request handling for one coordinator connection."""

    def __init__(self, data: SiteDataset, policy: DisclosurePolicy | None = None):
        self.data = data
        self.policy = policy or DisclosurePolicy()
        self.meta = SiteMeta(n_l=data.n_l, p=data.p)
        self.last_request_id: int | None = None

    def reset_request_ids(self) -> None:
        self.last_request_id = None

    def handle_frame(self, frame: bytes) -> bytes:
        return protocol.encode(self.handle(protocol.decode(frame)))

    def handle(self, req):
        rid = req.request_id
        if self.last_request_id is not None and rid <= self.last_request_id:
            return Refusal(reason=f"request_id {rid} not greater than "
                                  f"{self.last_request_id}", request_id=rid)
        self.last_request_id = rid
        refusal = check_disclosure(req, self.meta, self.policy)
        if refusal is not None:
            log.info("CALL %d %s refused", rid, type(req).__name__)
            return refusal
        try:
            resp = self._dispatch(req)
        except (DegenerateColumnError, NotStandardizedError,
                IndexOutOfRangeError, ValueError) as exc:
            resp = Refusal(reason=str(exc))
        resp.request_id = rid
        npairs = len(req.pairs) if isinstance(req, CovarianceBlock) else 0
        log.info("CALL %d %s pairs=%d", rid, type(req).__name__, npairs)
        return resp

    def _dispatch(self, req):
        data = self.data
        if isinstance(req, Describe):
            return SiteMeta(n_l=data.n_l, p=data.p)
        if isinstance(req, StandardizeLocal):
            data.standardize_local()
            return Ack()
        if isinstance(req, GlobalMeans):
            n_l, sum_y, sum_x = data.global_moment_contrib()
            return MomentSums(n_l=n_l, sum_y=sum_y, sum_x=sum_x)
        if isinstance(req, GlobalSsq):
            ssq_x, ssq_y = data.global_ssq_contrib(req.means, req.y_mean)
            return SsqSums(ssq_x=ssq_x, ssq_y=ssq_y)
        if isinstance(req, ApplyGlobalStandardization):
            data.apply_global(req.means, req.sds, req.y_mean)
            return Ack()
        if isinstance(req, UnivariableStats):
            a, c_diag = data.univariable_stats()
            return UnivariableValues(a=a, c_diag=c_diag)
        if isinstance(req, CovarianceBlock):
            return CovarianceValues(values=data.covariance_block(req.pairs))
        return Refusal(reason=f"unhandled request {type(req).__name__}")


def serve(data: SiteDataset, host: str = "127.0.0.1", port: int = 0,
          policy: DisclosurePolicy | None = None, announce=print,
          max_connections: int | None = None) -> None:
    """Blocking request loop: one coordinator connection served at a time.

    Binding to port 0 picks a free port; the assigned address is announced
    as ``LISTENING <host>:<port>`` so a supervisor can discover it.
    """
    session = SiteSession(data, policy)
    server = socket.create_server((host, port))
    bound = server.getsockname()
    announce(f"LISTENING {bound[0]}:{bound[1]}", flush=True)
    served = 0
    try:
        while max_connections is None or served < max_connections:
            conn, peer = server.accept()
            served += 1
            session.reset_request_ids()
            log.info("connection from %s:%d", *peer[:2])
            stream = conn.makefile("rwb")
            try:
                while True:
                    req = protocol.read_message(stream)
                    if req is None:
                        break
                    protocol.write_message(stream, session.handle(req))
            except protocol.ProtocolError as exc:
                log.error("dropping connection: %s", exc)
            finally:
                stream.close()
                conn.close()
    finally:
        server.close()
