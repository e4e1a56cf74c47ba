"""Experiment runner: pipelined clients against an in-process runtime."""

from __future__ import annotations

import asyncio
import csv
import hashlib
import json
import logging
import random
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .. import codec
from ..errors import ConfigError, KVActorError, LogError, TxnAborted
from ..logstore import LogMode, replay, stream_filename
from ..runtime import Runtime, RuntimeConfig
from ..scheduler import Granularity
from ..values import ActorId
from ..workloads import marketplace, smallbank
from ..workloads.common import TxnRequest

log = logging.getLogger(__name__)

# name -> (granularity, log mode, nontxn)
VARIANTS = {
    "Snapper": (Granularity.ACTOR, LogMode.SNAPSHOT, False),
    "SmSa+": (Granularity.ACTOR, LogMode.INCREMENTAL, False),
    "SmSa-X": (Granularity.KEY, LogMode.INCREMENTAL, False),
    "NonTxn": (Granularity.ACTOR, LogMode.INCREMENTAL, True),
}

INTERVALS = ("I1", "I2", "I3", "I4", "I5", "I6", "I7")

STATE_FILE = "final_state.bin"
BASE_FILE = "base_state.bin"
REPORT_FILE = "report.json"
CONFIG_FILE = "run_config.json"


@dataclass
class RunConfig:
    variant: str = "SmSa-X"
    workload: dict = field(default_factory=lambda: {"type": "smallbank"})
    workers: int = 4
    clients: int = 1
    pipeline_size: Optional[int] = None   # per client; None = derived from the workload size
    txn_count: Optional[int] = 2000      # total across clients
    duration: Optional[float] = None     # seconds; used when txn_count is None
    warmup: Optional[float] = None       # fraction of txns or seconds; None = 10% / 2 s
    logging_enabled: bool = True
    flush: str = "batched"
    hop_latency: float = 0.0
    batch_size: int = 64
    batch_timeout: float = 0.005
    # SmallBank only: submit MultiTransfer as "pact" or "act"
    txn_mode: str = "pact"
    retry_cap: int = 0
    seed: int = 1
    name: str = ""

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        wtype = self.workload.get("type")
        if wtype not in ("smallbank", "marketplace"):
            raise ConfigError(f"unknown workload type {wtype!r}")
        if self.txn_count is None and self.duration is None:
            raise ConfigError("need txn_count or duration")
        if self.txn_count is not None and self.txn_count < 1:
            raise ConfigError("txn_count must be positive")
        if self.clients < 1 or (self.pipeline_size is not None and self.pipeline_size < 1):
            raise ConfigError("clients and pipeline_size must be positive")
        if self.txn_mode not in ("pact", "act"):
            raise ConfigError(f"txn_mode must be pact or act, got {self.txn_mode!r}")
        if self.retry_cap < 0:
            raise ConfigError("retry_cap must be >= 0")
        self.workload_config().validate()

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        unknown = set(d) - set(cls.__dataclass_fields__) - {"variants"}
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def workload_config(self):
        body = {k: v for k, v in self.workload.items() if k != "type"}
        if self.workload.get("type") == "smallbank":
            return smallbank.SmallBankConfig.from_dict(body)
        return marketplace.MarketplaceConfig.from_dict(body)

    @property
    def granularity(self) -> Granularity:
        return VARIANTS[self.variant][0]

    def effective_pipeline(self) -> int:
        """Key-level pipelines scale with total keys, actor-level with total actors."""
        if self.pipeline_size is not None:
            return self.pipeline_size
        w = self.workload_config()
        if isinstance(w, smallbank.SmallBankConfig):
            actors, keys = w.num_actor, w.total_keys
        else:
            actors = (w.sellers * 3 + w.customers + w.customer_actors + w.order_actors + w.payment_actors + w.shipment_actors)
            keys = w.sellers * w.products_per_seller
        if self.granularity is Granularity.KEY:
            return max(1, round(0.0128 * keys))
        return max(1, round(0.2 * actors))

    def runtime_config(self, log_dir=None) -> RuntimeConfig:
        gran, mode, nontxn = VARIANTS[self.variant]
        return RuntimeConfig(granularity=gran, nontxn=nontxn, log_mode=mode,
                             log_enabled=self.logging_enabled and not nontxn,
                             log_dir=None if log_dir is None else str(log_dir), flush=self.flush,
                             hop_latency=self.hop_latency, batch_size=self.batch_size,
                             batch_timeout=self.batch_timeout, workers=self.workers)


@dataclass
class Sample:
    client: int
    seq: int
    kind: str
    is_pact: bool
    ok: bool
    cause: str
    submitted: float
    finished: float
    intervals: Optional[list] = None


@dataclass
class MetricsReport:
    variant: str
    workload: str
    committed: int
    attempts: int
    aborted: int
    elapsed_s: float
    throughput: float
    throughput_pact: float
    throughput_act: float
    throughput_by_type: dict
    abort_rate: float
    aborts_by_cause: dict
    latency_mean_ns: dict          # I1..I7 plus "total"
    latency_p50_ns: float
    overlap_rate: float
    batches: int
    mean_batch_size: float
    log_bytes: int
    log_records: int
    log_mode: str
    logging_enabled: bool
    pipeline_size: int
    clients: int
    state_hash: str
    commit_order_hash: str
    batch_schedule_hash: str
    measured: int
    integrity: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_row(self) -> dict:
        row = {k: v for k, v in self.to_dict().items() if not isinstance(v, dict)}
        for k in INTERVALS + ("total",):
            row[f"lat_{k}_ns"] = self.latency_mean_ns.get(k, 0.0)
        return row


def _digest(items) -> str:
    h = hashlib.sha256()
    for x in items:
        h.update(str(x).encode())
        h.update(b"\n")
    return h.hexdigest()


class _Workload:
    """Per-run request source with one rng per client."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.wcfg = cfg.workload_config()
        self.kind = cfg.workload["type"]
        self.model = None

    async def setup(self, rt: Runtime) -> None:
        if self.kind == "smallbank":
            smallbank.populate(rt, self.wcfg)
        else:
            self.model = await marketplace.build_marketplace(rt, self.wcfg, self.cfg.seed)
            await rt.quiesce()

    def customers_for(self, client: int) -> list[int]:
        n = self.wcfg.customers
        mine = [c for c in range(n) if c % self.cfg.clients == client]
        return mine or list(range(n))

    def next(self, rng: random.Random, client: int) -> TxnRequest:
        if self.kind == "smallbank":
            req = smallbank.gen_multitransfer(self.wcfg, rng)
            if self.cfg.txn_mode == "act":
                req.spec = None
            return req
        return marketplace.gen_marketplace_txn(self.model, rng, self.customers_for(client), client)

    def integrity(self, rt: Runtime) -> dict:
        # NonTxn has no isolation, so lost updates are expected there
        if rt.config.nontxn:
            return {}
        return check_invariants(self.kind, self.wcfg, rt.states())


def check_invariants(kind: str, wcfg, states) -> dict:
    """Workload invariants over a state map; values are lists of violations."""
    if kind == "smallbank":
        total = smallbank.total_balance(states, wcfg)
        expected = smallbank.expected_total(wcfg)
        bad = [] if total == expected else [f"total balance {total} != {expected}"]
        return {"conservation": bad}
    return marketplace.check_integrity(states, wcfg)


def _submit(rt: Runtime, req: TxnRequest, first_tid: int | None = None):
    """Submit ``req``; a retry passes its first tid and keeps that wait-die age."""
    if req.spec is not None:
        return rt.submit_pact(req.root, req.method, req.args, req.spec)
    return rt.submit_act(req.root, req.method, req.args, priority=first_tid is not None, age=first_tid)


async def _client(rt: Runtime, wl: _Workload, cfg: RunConfig, client: int, quota: Optional[int],
                  deadline: Optional[float], samples: list) -> None:
    rng = random.Random(cfg.seed * 1000003 + client)
    pipeline = cfg.effective_pipeline()
    seq = 0
    inflight: set = set()

    async def one(req: TxnRequest, n: int):
        attempt = 0
        first_tid = None
        while True:
            t0 = time.perf_counter()
            h = _submit(rt, req, first_tid)
            if first_tid is None:
                first_tid = h.tid
            ok, cause = True, ""
            try:
                await h
            except TxnAborted as exc:
                ok, cause = False, exc.cause
            except KVActorError as exc:
                ok, cause = False, type(exc).__name__
            t1 = time.perf_counter()
            is_pact = req.spec is not None and not rt.config.nontxn
            samples.append(Sample(client, n, req.kind, is_pact, ok, cause, t0, t1,
                                  h.intervals() if is_pact and ok else None))
            # user-level failures are not retried, only lock-based aborts
            if ok or is_pact or attempt >= cfg.retry_cap or cause != "Die":
                return
            attempt += 1

    def more() -> bool:
        if quota is not None:
            return seq < quota
        return time.perf_counter() < deadline

    while more() or inflight:
        while more() and len(inflight) < pipeline:
            req = wl.next(rng, client)
            inflight.add(asyncio.ensure_future(one(req, seq)))
            seq += 1
        if not inflight:
            break
        done, inflight = await asyncio.wait(inflight, return_when=asyncio.FIRST_COMPLETED)
        for t in done:
            t.result()


def _warmup_cut(cfg: RunConfig, samples: list[Sample], t_start: float) -> list[Sample]:
    if cfg.txn_count is not None:
        frac = 0.1 if cfg.warmup is None else cfg.warmup
        if not 0 <= frac < 1:
            raise ConfigError("warmup for count-based runs is a fraction in [0, 1)")
        per_client = {}
        for s in samples:
            per_client.setdefault(s.client, []).append(s)
        out = []
        for rows in per_client.values():
            n = max(s.seq for s in rows) + 1
            cut = int(n * frac)
            out.extend(s for s in rows if s.seq >= cut)
        return out
    secs = 2.0 if cfg.warmup is None else cfg.warmup
    return [s for s in samples if s.submitted >= t_start + secs]


def _summarize(cfg: RunConfig, rt: Runtime, samples: list[Sample], measured: list[Sample],
               integrity: dict) -> MetricsReport:
    mode = rt.config.log_mode.value
    if measured:
        t0 = min(s.submitted for s in measured)
        t1 = max(s.finished for s in measured)
        elapsed = max(t1 - t0, 1e-9)
    else:
        elapsed = 1e-9
    ok = [s for s in measured if s.ok]
    by_type: dict[str, float] = {}
    for s in ok:
        by_type[s.kind] = by_type.get(s.kind, 0) + 1
    causes: dict[str, int] = {}
    for s in measured:
        if not s.ok:
            causes[s.cause] = causes.get(s.cause, 0) + 1
    lat = [s.intervals for s in ok if s.intervals is not None]
    lat_mean = {name: (statistics.fmean(iv[i] for iv in lat) if lat else 0.0) for i, name in enumerate(INTERVALS)}
    totals = [sum(iv) for iv in lat]
    lat_mean["total"] = statistics.fmean(totals) if totals else 0.0
    stats = rt.coordinator.stats.summary()
    schedules = rt.coordinator.schedules or []
    return MetricsReport(
        variant=cfg.variant,
        workload=cfg.workload["type"],
        committed=len(ok),
        attempts=len(measured),
        aborted=len(measured) - len(ok),
        elapsed_s=elapsed,
        throughput=len(ok) / elapsed,
        throughput_pact=sum(1 for s in ok if s.is_pact) / elapsed,
        throughput_act=sum(1 for s in ok if not s.is_pact) / elapsed,
        throughput_by_type={k: v / elapsed for k, v in sorted(by_type.items())},
        abort_rate=(len(measured) - len(ok)) / len(measured) if measured else 0.0,
        aborts_by_cause=dict(sorted(causes.items())),
        latency_mean_ns=lat_mean,
        latency_p50_ns=statistics.median(totals) if totals else 0.0,
        overlap_rate=stats["mean_overlap_rate"],
        batches=stats["batches"],
        mean_batch_size=stats["mean_batch_size"],
        log_bytes=rt.log.total_bytes,
        log_records=rt.log.total_records,
        log_mode=mode,
        logging_enabled=rt.log.enabled,
        pipeline_size=cfg.effective_pipeline(),
        clients=cfg.clients,
        state_hash=rt.state_hash(),
        commit_order_hash=_digest(rt.commit_order),
        batch_schedule_hash=_digest(s.to_json() for s in schedules),
        measured=len(measured),
        integrity={k: len(v) for k, v in integrity.items()},
    )


def dump_states(states: dict, path: Path) -> None:
    buf = bytearray()
    items = sorted(states.items())
    buf += len(items).to_bytes(4, "little")
    for a, st in items:
        codec.encode_actor(buf, a)
        codec.encode_state(buf, st)
    path.write_bytes(bytes(buf))


def load_states(path: Path) -> dict[ActorId, object]:
    data = Path(path).read_bytes()
    r = codec.Reader(data)
    out = {}
    for _ in range(r.u32()):
        a = r.actor()
        st = r.state()
        st.actor_id = a
        out[a] = st
    return out


async def run_experiment_async(cfg: RunConfig, out: str | Path | None = None,
                               keep_samples: bool = False) -> MetricsReport:
    cfg.validate()
    out = None if out is None else Path(out)
    log_dir = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_dir = out / "logs"
    rcfg = cfg.runtime_config(log_dir)
    rcfg.keep_schedules = True
    rt = Runtime(rcfg)
    wl = _Workload(cfg)
    await wl.setup(rt)
    samples: list[Sample] = []
    t_start = time.perf_counter()
    deadline = None if cfg.duration is None else t_start + cfg.duration
    quotas = [None] * cfg.clients
    if cfg.txn_count is not None:
        base, extra = divmod(cfg.txn_count, cfg.clients)
        quotas = [base + (1 if c < extra else 0) for c in range(cfg.clients)]
    await asyncio.gather(*(_client(rt, wl, cfg, c, quotas[c], deadline, samples) for c in range(cfg.clients)))
    await rt.quiesce()
    rt.close()
    integrity = wl.integrity(rt)
    measured = _warmup_cut(cfg, samples, t_start)
    report = _summarize(cfg, rt, samples, measured, integrity)
    if keep_samples:
        report.samples = samples  # type: ignore[attr-defined]
        report.runtime = rt       # type: ignore[attr-defined]
    if out is not None:
        write_report(report, cfg, out)
        dump_states(rt.states(), out / STATE_FILE)
        dump_states(rt.base_states, out / BASE_FILE)
    log.info("%s: %d committed in %.2fs (%.1f txn/s), abort rate %.3f", cfg.variant, report.committed,
             report.elapsed_s, report.throughput, report.abort_rate)
    bad = {k: v for k, v in integrity.items() if v}
    if bad:
        raise AssertionError(f"invariant violations after run: { {k: v[:3] for k, v in bad.items()} }")
    return report


def run_experiment(cfg: RunConfig, out: str | Path | None = None, keep_samples: bool = False) -> MetricsReport:
    return asyncio.run(run_experiment_async(cfg, out, keep_samples))


def write_report(report: MetricsReport, cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_FILE).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    (out / CONFIG_FILE).write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    row = report.csv_row()
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)


def find_runs(out: str | Path) -> list[Path]:
    """Run directories (those holding a report) at or below ``out``."""
    out = Path(out)
    return sorted(p.parent for p in out.rglob(REPORT_FILE))


def verify_run(run_dir: str | Path) -> dict[str, list[str]]:
    """Replay the run's logs against its final state and re-check invariants."""
    run_dir = Path(run_dir)
    cfg = RunConfig.from_dict(json.loads((run_dir / CONFIG_FILE).read_text()))
    final = load_states(run_dir / STATE_FILE)
    bases = load_states(run_dir / BASE_FILE)
    problems: dict[str, list[str]] = {"replay": []}
    logs = run_dir / "logs"
    if cfg.logging_enabled and cfg.variant != "NonTxn":
        for a in sorted(set(final) | set(bases)):
            path = logs / stream_filename(a)
            data = path.read_bytes() if path.exists() else b""
            try:
                got = replay(data, actor=a, base=bases.get(a))
            except LogError as exc:
                problems["replay"].append(f"{a}: {type(exc).__name__}: {exc}")
                continue
            want = final.get(a)
            if want is None or got.canonical()[:2] != want.canonical()[:2]:
                problems["replay"].append(f"{a}: replayed state differs from final state")
    if cfg.variant != "NonTxn":
        problems.update(check_invariants(cfg.workload["type"], cfg.workload_config(), final))
    return problems
