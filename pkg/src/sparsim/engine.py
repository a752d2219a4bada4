"""Deterministic cycle-driven simulation kernel.

Each cycle has three phases. The dispatcher issues tile instructions to
cores (phase 0); every active component advances one cycle touching only
its own state and outbox (phase 1, safe to spread over host worker
threads); the engine then commits all cross-component transfers in a
canonical component order (phase 2). Because inter-component effects only
happen in the single-threaded commit phase, final statistics and the
output matrix are bit-for-bit functions of (program, chip config, mapper
config, seed) regardless of host parallelism.

The memory system is an analytic channel model per tile: bandwidth cap,
fixed pipelined latency, bounded queue. Runs end when every instruction
has retired, every hash line has been evicted and written back, and all
queues are empty; conservation invariants are checked at exit. A watchdog
raises a diagnostic deadlock error if nothing makes progress for an
extended window.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import isa
from .errors import DeadlockError, SimulationError
from .mapping import Mapper, MapperConfig
from .matio import CsrMatrix
from .uarch import (
    ChipConfig,
    K_EVICT,
    K_HACC,
    K_REQ,
    K_RESP,
    MemChannelModel,
    P_EAST,
    P_NORTH,
    P_SOUTH,
    P_WEST,
    build_chip,
)

__all__ = [
    "SimRun",
    "SimStats",
    "MemChannelModel",
    "ROLLING",
    "BARRIER",
    "run_spgemm_simulation",
    "collect_cpi",
]

ROLLING = "rolling"
BARRIER = "barrier"

_OPPOSITE = {P_EAST: P_WEST, P_WEST: P_EAST, P_NORTH: P_SOUTH, P_SOUTH: P_NORTH}


class SimStats:
    """Counters and traces of one run; serializes to a stable JSON schema.

    Wall-clock derived numbers (simulated kilocycles per host second) stay
    out of the JSON so repeated runs are byte-identical; they live on the
    object for sidecar logging.
    """

    def __init__(self):
        self.cycles = 0
        self.mmh4_issued = 0
        self.mmh4_retired = 0
        self.hacc_created = 0
        self.hacc_committed = 0
        self.evictions = 0
        self.stalls = {"reg": 0, "operand": 0, "port": 0, "dispatch": 0}
        self.cpi = {}  # kind -> {cycles: count}
        self.core_loads = []
        self.mem_loads = []
        self.grid = None  # cores x mems HACC traffic
        self.hashpad_occupancy_max = 0
        self.hashpad_occupancy_final = 0
        self.hashpad_capacity = 0
        self.occupancy_trace = []  # (cycle, occupancy)
        self.inflight_trace = []  # (cycle, outstanding reads)
        self.peak_inflight_reads = 0
        self.flits = 0
        self.hops_total = 0
        self.bytes_read = 0
        self.bytes_written = 0
        self.read_transactions = 0
        self.write_transactions = 0
        self.reads_merged = 0
        self.mapper_assignments = 0
        self.mapper_strategy = ""
        self.eviction_mode = ROLLING
        self.seed = 0
        self.windows = 0
        self.conservation = {}
        self.kcps = 0.0  # sidecar only
        self.wall_seconds = 0.0  # sidecar only

    def mean_cpi(self, kind: str) -> float:
        hist = self.cpi.get(kind, {})
        total = sum(hist.values())
        return sum(c * n for c, n in hist.items()) / total if total else 0.0

    def to_json_dict(self) -> dict:
        return {
            "schema": "sparsim-stats-v1",
            "cycles": self.cycles,
            "instructions": {
                "mmh4_issued": self.mmh4_issued,
                "mmh4_retired": self.mmh4_retired,
                "hacc_created": self.hacc_created,
                "hacc_committed": self.hacc_committed,
            },
            "evictions": self.evictions,
            "stalls": dict(sorted(self.stalls.items())),
            "cpi": {
                kind: {
                    "count": sum(h.values()),
                    "mean": self.mean_cpi(kind),
                    "histogram": {str(c): h[c] for c in sorted(h)},
                }
                for kind, h in sorted(self.cpi.items())
            },
            "loads": {"core": self.core_loads, "mem": self.mem_loads},
            "hashpad": {
                "occupancy_max": self.hashpad_occupancy_max,
                "occupancy_final": self.hashpad_occupancy_final,
                "capacity": self.hashpad_capacity,
            },
            "network": {"flits": self.flits, "hops_total": self.hops_total},
            "memory": {
                "bytes_read": self.bytes_read,
                "bytes_written": self.bytes_written,
                "read_transactions": self.read_transactions,
                "write_transactions": self.write_transactions,
                "reads_merged": self.reads_merged,
                "peak_inflight_reads": self.peak_inflight_reads,
            },
            "mapper": {
                "assignments": self.mapper_assignments,
                "strategy": self.mapper_strategy,
            },
            "eviction_mode": self.eviction_mode,
            "seed": self.seed,
            "windows": self.windows,
            "conservation": dict(sorted(self.conservation.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=1)


def collect_cpi(stats: SimStats, kind: str) -> dict:
    """Histogram {cycles: count} for one instruction kind."""
    return dict(stats.cpi.get(kind, {}))


class _Dispatcher:
    """Issues tile instructions in program order: round-robin over cores
    with buffer space, consecutive tiles of one A-column group pinned to
    one core, window fences respected."""

    def __init__(self, run):
        self.run = run
        self.pointer = 0
        self.rr = 0
        self.active_group = None
        self.active_core = None
        self.log = []  # (instr index, core id)

    @property
    def done(self) -> bool:
        return self.pointer >= len(self.run.program.instrs)

    def step(self, cycle):
        run = self.run
        instrs = run.program.instrs
        cores = run.chip.cores
        pushed = set()
        while self.pointer < len(instrs):
            ins = instrs[self.pointer]
            if ins.window != run.current_window:
                break  # fence: previous window still draining
            if ins.group == self.active_group:
                core = cores[self.active_core]
                if core.id in pushed or core.dispatch_latch is not None:
                    if core.dispatch_latch is not None and core.id not in pushed:
                        run.stats.stalls["dispatch"] += 1
                    break
            else:
                core = self._next_free_core(cores, pushed)
                if core is None:
                    run.stats.stalls["dispatch"] += 1
                    break
                self.active_group = ins.group
                self.active_core = core.id
            core.dispatch_latch = ins
            run.wake(core)
            run.stats.mmh4_issued += 1
            run.window_issued[ins.window] += 1
            self.log.append((self.pointer, core.id))
            pushed.add(core.id)
            self.pointer += 1

    def _next_free_core(self, cores, pushed):
        n = len(cores)
        for off in range(n):
            core = cores[(self.rr + off) % n]
            if core.dispatch_latch is None and core.id not in pushed:
                self.rr = (self.rr + off + 1) % n
                return core
        return None


class _TagWindow:
    """Window id of a tag, looked up through its packed row field."""

    __slots__ = ("row_window", "col_bits")

    def __init__(self, row_window, col_bits):
        self.row_window = row_window
        self.col_bits = col_bits

    def get(self, tag, default=0):
        return self.row_window.get(tag >> self.col_bits, default)


class SimRun:
    """One simulation: program + chip + mapper + seed, advanced to
    completion deterministically."""

    def __init__(
        self,
        program: isa.Program,
        chip_cfg: ChipConfig,
        mapper_cfg: MapperConfig,
        plan,
        window_plan=None,
        seed: int = 0,
        eviction_mode: str = ROLLING,
        sample_interval: int = 64,
        trace_stages: bool = False,
    ):
        if eviction_mode not in (ROLLING, BARRIER):
            raise SimulationError(f"unknown eviction mode {eviction_mode!r}")
        self.program = program
        self.chip_cfg = chip_cfg
        self.chip = build_chip(chip_cfg)
        self.plan = plan
        self.window_plan = window_plan
        self.seed = seed
        self.eviction_mode = eviction_mode
        self.rolling_evictions = eviction_mode == ROLLING
        self.sample_interval = sample_interval
        self.cycle = 0
        self.stats = SimStats()
        self.stats.seed = seed
        self.stats.eviction_mode = eviction_mode
        self.stats.hashpad_capacity = chip_cfg.n_mems * chip_cfg.tile.hashlines_per_mem
        self.stats.windows = program.n_windows

        mapper_cfg = replace(
            mapper_cfg,
            n_targets=self.chip.n_mems,
            rng_seed=seed,
            col_bits=program.layout.col_bits,
        )
        self.mapper = Mapper(mapper_cfg)
        self.stats.mapper_strategy = mapper_cfg.strategy

        self.n_cores = self.chip.n_cores
        self.stage_traces = []
        for core in self.chip.cores:
            core.ctx = self
            core.trace_stages = trace_stages
        for mem in self.chip.mems:
            mem.ctx = self
        for mc in self.chip.memctrls:
            mc.ctx = self

        # Output region: evictions write 12-byte elements row-contiguously
        # after the input image; addresses drive channel interleave only.
        out_prefix = np.zeros(program.n_rows + 1, dtype=np.int64)
        np.cumsum(plan.out_nnz_per_row, out=out_prefix[1:])
        granule = chip_cfg.granule
        image_end = program.image._next_base
        self._out_base = ((image_end + granule - 1) // granule) * granule
        self._out_prefix = out_prefix
        self._col_bits = program.layout.col_bits
        self._col_mask = (1 << self._col_bits) - 1

        # window accounting
        n_win = max(program.n_windows, 1)
        self.window_total = [0] * n_win
        row_window = {}
        for ins in program.instrs:
            self.window_total[ins.window] += 1
            for r in ins.a_rows:
                row_window[r] = ins.window
        self.window_issued = [0] * n_win
        self.window_retired = [0] * n_win
        self.window_hacc_created = [0] * n_win
        self.window_hacc_committed = [0] * n_win
        self.current_window = 0
        self._hacc_window = _TagWindow(row_window, self._col_bits)
        self._window_caps = None
        if window_plan is not None:
            self._window_caps = [w.capacity for w in window_plan.windows]

        self.dispatcher = _Dispatcher(self)
        self.components = list(self.chip.cores) + list(self.chip.mems) + list(self.chip.memctrls)
        for idx, comp in enumerate(self.components):
            comp._engine_idx = idx
        self._mem_base = self.chip.n_cores
        self._mc_base = self.chip.n_cores + self.chip.n_mems
        self.active = set()
        self._woken = set()
        self._live_routers = set()
        self.reads_outstanding = 0
        self.evictions_arrived = 0
        self.net_flits = 0
        self.result = None

    # -- context API used by components --------------------------------------

    def expand(self, instr):
        return isa.expand_mmh4(instr, self.program.image, self.program.layout)

    def memctrl_rid_for(self, addr: int) -> int:
        tile = (addr // self.chip_cfg.granule) % len(self.chip.memctrls)
        return self.chip.memctrl_rids[tile]

    def core_rid(self, core_id: int) -> int:
        return self.chip.core_rids[core_id]

    def eviction_target(self, tag: int):
        i = tag >> self._col_bits
        j = tag & self._col_mask
        addr = self._out_base + int(self._out_prefix[i]) * 12
        return i, j, addr, 12

    def on_mmh4_retired(self, instr):
        self.stats.mmh4_retired += 1
        self.window_retired[instr.window] += 1

    def on_hacc_committed(self, tag):
        self.stats.hacc_committed += 1
        self.window_hacc_committed[self._hacc_window.get(tag, 0)] += 1

    def on_eviction_arrived(self):
        self.evictions_arrived += 1

    def wake(self, comp):
        self._woken.add(comp._engine_idx)

    # -- main loop ------------------------------------------------------------

    def run_to_completion(self, host_workers: int = 1) -> SimStats:
        t0 = time.perf_counter()
        cfg = self.chip_cfg
        diameter = self.chip.width // 2 + self.chip.height // 2 + 1
        max_stage = max(
            cfg.decode_latency, cfg.regalloc_latency, cfg.mul_latency,
            cfg.accumulate_latency, cfg.channel_fixed_latency,
        )
        watchdog_limit = 10 * (diameter + max_stage)
        idle_cycles = 0
        pool = ThreadPoolExecutor(max_workers=host_workers) if host_workers > 1 else None
        try:
            while True:
                progressed = self._step_cycle(pool, host_workers)
                if self._finished():
                    break
                if progressed:
                    idle_cycles = 0
                else:
                    idle_cycles += 1
                    if idle_cycles > watchdog_limit:
                        raise DeadlockError(self._deadlock_dump(watchdog_limit))
                self.cycle += 1
        finally:
            if pool is not None:
                pool.shutdown(wait=True)
        self.stats.cycles = self.cycle
        self._finalize()
        self.stats.wall_seconds = time.perf_counter() - t0
        if self.stats.wall_seconds > 0:
            self.stats.kcps = (self.cycle / 1000.0) / self.stats.wall_seconds
        return self.stats

    def _step_cycle(self, pool, host_workers) -> bool:
        cycle = self.cycle
        events = 0

        # Phase 0: dispatch
        before = self.stats.mmh4_issued
        if not self.dispatcher.done:
            self.dispatcher.step(cycle)
        events += self.stats.mmh4_issued - before

        # Phase 1: step active components (parallel-safe: own state only)
        order = sorted(self.active | self._woken)
        self._woken.clear()
        still_busy = set()
        if pool is None or len(order) < 2 * host_workers:
            comps = self.components
            for idx in order:
                comp = comps[idx]
                if comp.step(cycle):
                    still_busy.add(idx)
                events += comp.activity
                comp.activity = 0
        else:
            chunks = _chunk(order, host_workers)
            for busy_list, ev in pool.map(self._step_chunk, [(c, cycle) for c in chunks]):
                still_busy.update(busy_list)
                events += ev

        # Phase 2: canonical single-threaded commit
        events += self._commit(cycle, order)
        self.active = still_busy | self._woken
        self._woken.clear()

        events += self._advance_window_fence()
        self._sample(cycle)
        return events > 0

    def _step_chunk(self, args):
        chunk, cycle = args
        busy = []
        events = 0
        comps = self.components
        for idx in chunk:
            comp = comps[idx]
            if comp.step(cycle):
                busy.append(idx)
            events += comp.activity
            comp.activity = 0
        return busy, events

    def _commit(self, cycle, order) -> int:
        moved = 0
        routers = self.chip.routers

        # 2a: network movement, one hop per flit per cycle, canonical order.
        # _live_routers becomes the wake set during this commit; candidates
        # that still hold flits are re-added at the end.
        candidates = self._live_routers
        self._live_routers = set()
        for rid in sorted(candidates):
            moved += self._route_router(routers[rid], cycle)

        # 2b: component outboxes -> own router injection queues
        for idx in order:
            comp = self.components[idx]
            if comp.outbox:
                moved += self._drain_outbox(comp, routers, cycle)

        for rid in candidates:
            if routers[rid].pending_flits():
                self._live_routers.add(rid)
        return moved

    def _route_router(self, router, cycle) -> int:
        """Advance the head flit of each input queue of one router.

        Direction inputs move one flit per cycle, the injection queue up to
        four (the component's ports); ejection delivers up to four flits.
        Bubble rule: continuing along a ring needs one free slot downstream,
        entering a ring (first hop or X->Y turn) needs two.
        """
        cfg = self.chip_cfg
        chip = self.chip
        routers = chip.routers
        depth = cfg.router_queue_depth
        width, height = chip.width, chip.height
        mem_depth = cfg.mem_inbox_depth
        stats = self.stats
        rid = router.rid
        in_q = router.in_q
        moved = 0
        ejected = 0
        out_used = 0
        start = (cycle + rid) % 5
        for off in range(5):
            qi = (start + off) % 5
            q = in_q[qi]
            budget = 4 if qi == 0 else 1
            while q and budget:
                pkt = q[0]
                if pkt.moved_at == cycle:
                    break  # arrived this commit; hops at one per cycle
                port = _route_port(pkt, router, routers, width, height)
                if port == 0:  # eject here
                    if ejected >= 4:
                        break
                    kind = pkt.kind
                    pkt.moved_at = cycle  # acceptance stamp at the unit
                    if kind == K_HACC:
                        comp = router.component
                        if len(comp.inbox) >= mem_depth:
                            break
                        comp.inbox.append(pkt)
                    elif kind == K_RESP:
                        comp = router.component
                        comp.inbox.append(pkt)
                        self.reads_outstanding -= 1
                    else:  # K_REQ / K_EVICT
                        comp = router.memctrl
                        comp.inbox.append(pkt)
                    q.popleft()
                    self.net_flits -= 1
                    self.wake(comp)
                    ejected += 1
                    moved += 1
                    budget -= 1
                    continue
                bit = 1 << port
                if out_used & bit:
                    break  # one flit per output port per cycle
                dim = 1 if port in (P_EAST, P_WEST) else 2
                need = 1 if pkt.ring == dim else 2
                nrid = _neighbor(rid, port, width, height)
                nq = routers[nrid].in_q[_OPPOSITE[port]]
                if len(nq) > depth - need:
                    break  # credit backpressure (with the ring bubble)
                q.popleft()
                pkt.ring = dim
                pkt.moved_at = cycle
                pkt.hops += 1
                nq.append(pkt)
                stats.hops_total += 1
                self._live_routers.add(nrid)  # wake set during commit
                out_used |= bit
                moved += 1
                budget -= 1
        return moved

    def _drain_outbox(self, comp, routers, cycle) -> int:
        cfg = self.chip_cfg
        outbox = comp.outbox
        budget = cfg.tile.ports
        injq = routers[comp.rid].in_q[0]
        inj_cap = cfg.injection_depth
        mapper = self.mapper
        mem_rids = self.chip.mem_rids
        stats = self.stats
        direct_evictions = cfg.eviction_path == "direct"
        moved = 0
        is_core = comp._engine_idx < self._mem_base
        while outbox and budget:
            pkt = outbox[0]
            kind = pkt.kind
            if kind == K_EVICT and direct_evictions:
                outbox.popleft()
                mc = routers[pkt.dst].memctrl
                mc.inbox.append(pkt)
                self.wake(mc)
                budget -= 1
                moved += 1
                continue
            if len(injq) >= inj_cap:
                break
            outbox.popleft()
            if kind == K_HACC:
                tag = pkt.payload[0]
                pkt.dst = mem_rids[mapper.map_for_accumulation(tag)]
                stats.hacc_created += 1
                self.window_hacc_created[self._hacc_window.get(tag, 0)] += 1
                if is_core:
                    rec = comp.inflight.get(pkt.payload[4])
                    if rec is not None:
                        rec.haccs_pending -= 1
            elif kind == K_REQ:
                self.reads_outstanding += 1
                if self.reads_outstanding > stats.peak_inflight_reads:
                    stats.peak_inflight_reads = self.reads_outstanding
            injq.append(pkt)
            pkt.moved_at = cycle  # first hop happens next cycle
            stats.flits += 1
            self.net_flits += 1
            self._live_routers.add(comp.rid)
            budget -= 1
            moved += 1
        if outbox and budget == 0:
            comp.stalls_port += 1
        return moved

    def _advance_window_fence(self) -> int:
        w = self.current_window
        if w >= len(self.window_total):
            return 0
        total = self.window_total[w]
        if self.window_issued[w] < total or self.window_retired[w] < total:
            return 0
        if self.window_hacc_committed[w] < self.window_hacc_created[w]:
            return 0
        for mem in self.chip.mems:
            if self.eviction_mode == BARRIER and mem.occupancy:
                mem.flush_all()
                self.wake(mem)
            mem.reset_pads()
        self.current_window = w + 1
        return 1

    def _sample(self, cycle):
        occ = 0
        for mem in self.chip.mems:
            occ += mem.occupancy
        stats = self.stats
        if occ > stats.hashpad_occupancy_max:
            stats.hashpad_occupancy_max = occ
        if self._window_caps is not None and self.current_window < len(self._window_caps):
            cap = self._window_caps[self.current_window]
            if occ > cap:
                raise SimulationError(
                    f"hashpad occupancy {occ} exceeds window {self.current_window} "
                    f"capacity {cap} at cycle {cycle}"
                )
        if cycle % self.sample_interval == 0:
            stats.occupancy_trace.append((cycle, occ))
            stats.inflight_trace.append((cycle, self.reads_outstanding))

    def _finished(self) -> bool:
        if not self.dispatcher.done:
            return False
        s = self.stats
        prog = self.program
        if s.mmh4_retired < s.mmh4_issued:
            return False
        if s.hacc_created < prog.total_fma or s.hacc_committed < s.hacc_created:
            return False
        if self.current_window < len(self.window_total):
            return False
        if self.reads_outstanding or self.net_flits:
            return False
        if self.evictions_arrived < prog.total_out_nnz:
            return False
        for mc in self.chip.memctrls:
            if mc.inbox or mc.read_pending or mc.write_pending or mc.inflight or mc.outbox:
                return False
        for mem in self.chip.mems:
            if mem.outbox:
                return False
        return True

    def _deadlock_dump(self, limit) -> str:
        lines = [f"no progress for {limit} cycles at cycle {self.cycle}"]
        oldest = None
        for core in self.chip.cores:
            for rec in core.inflight.values():
                if oldest is None or rec.accept_cycle < oldest[0]:
                    oldest = (rec.accept_cycle, core.id, rec.seq, rec.stage)
            if core.inflight or core.outbox:
                lines.append(
                    f"  core {core.id}: inflight={len(core.inflight)} outbox={len(core.outbox)}"
                )
        if oldest is not None:
            from .uarch import STAGE_NAMES

            lines.append(
                f"  oldest blocked instruction: core {oldest[1]} seq {oldest[2]} "
                f"stage {STAGE_NAMES.get(oldest[3], oldest[3])} accepted at cycle {oldest[0]}"
            )
        for mem in self.chip.mems:
            if mem.inbox or mem.outbox:
                lines.append(f"  mem {mem.id}: inbox={len(mem.inbox)} outbox={len(mem.outbox)}")
        flits = sum(r.pending_flits() for r in self.chip.routers)
        lines.append(f"  network flits pending: {flits}")
        return "\n".join(lines)

    def _finalize(self):
        stats = self.stats
        chip = self.chip
        stats.core_loads = [core.lanes_executed for core in chip.cores]
        stats.mem_loads = [mem.haccs_committed for mem in chip.mems]
        grid = np.zeros((chip.n_cores, chip.n_mems), dtype=np.int64)
        for mem in chip.mems:
            if mem.grid_row is not None:
                grid[:, mem.id] = mem.grid_row
        stats.grid = grid
        mmh4_hist = {}
        for core in chip.cores:
            stats.stalls["reg"] += core.stalls_reg
            stats.stalls["operand"] += core.stalls_operand
            stats.stalls["port"] += core.stalls_port
            for c, n in core.cpi.items():
                mmh4_hist[c] = mmh4_hist.get(c, 0) + n
        stats.cpi["mmh4"] = mmh4_hist
        kind = "hacc-re" if self.eviction_mode == ROLLING else "hacc-be"
        hacc_hist = {}
        for mem in chip.mems:
            stats.stalls["port"] += mem.stalls_port
            for c, n in mem.cpi.items():
                hacc_hist[c] = hacc_hist.get(c, 0) + n
            stats.evictions += mem.evictions
        stats.cpi[kind] = hacc_hist
        occ = sum(mem.occupancy for mem in chip.mems)
        stats.hashpad_occupancy_final = occ
        for mc in chip.memctrls:
            stats.bytes_read += mc.bytes_read
            stats.bytes_written += mc.bytes_written
            stats.read_transactions += mc.transactions_read
            stats.write_transactions += mc.transactions_write
            stats.reads_merged += mc.reads_merged
        stats.mapper_assignments = self.mapper.assignments

        rows = {}
        for mem in chip.mems:
            for tag, value in mem.evicted_values:
                i, j = isa.decode_tag(tag, self.program.layout)
                rows.setdefault(i, []).append((j, value))
        offsets = np.zeros(self.program.n_rows + 1, dtype=np.int64)
        cols, vals = [], []
        for i in range(self.program.n_rows):
            for j, v in sorted(rows.get(i, ())):
                cols.append(j)
                vals.append(v)
            offsets[i + 1] = len(cols)
        self.result = CsrMatrix(
            self.program.n_rows,
            self.program.n_cols,
            offsets,
            np.asarray(cols, dtype=np.int32),
            np.asarray(vals, dtype=np.float64),
        )

        cons = {
            "hacc_created": stats.hacc_created,
            "hacc_committed": stats.hacc_committed,
            "expected_fma": self.program.total_fma,
            "evictions": stats.evictions,
            "expected_out_nnz": self.program.total_out_nnz,
            "hashpad_final": occ,
            "mapper_assignments": stats.mapper_assignments,
            "evictions_written_back": self.evictions_arrived,
        }
        cons["ok"] = bool(
            stats.hacc_committed == self.program.total_fma
            and stats.hacc_created == self.program.total_fma
            and stats.evictions == self.program.total_out_nnz
            and occ == 0
            and stats.mapper_assignments == stats.hacc_created
            and self.evictions_arrived == stats.evictions
        )
        stats.conservation = cons
        if not cons["ok"]:
            raise SimulationError(f"conservation violated: {cons}")


def _route_port(pkt, router, routers, w, h):
    """Output port for a flit: dimension order (X then Y) with shortest
    wraparound; exact ties broken adaptively toward the shorter downstream
    queue. Returns 0 when the flit should eject at this router."""
    dst = pkt.dst
    x, y = router.x, router.y
    dx_raw = (dst % w) - x
    if dx_raw != 0:
        dx = dx_raw % w
        east, west = dx, w - dx
        if east < west:
            return P_EAST
        if west < east:
            return P_WEST
        eq = routers[_neighbor(router.rid, P_EAST, w, h)].in_q[P_WEST]
        wq = routers[_neighbor(router.rid, P_WEST, w, h)].in_q[P_EAST]
        return P_EAST if len(eq) <= len(wq) else P_WEST
    dy_raw = (dst // w) - y
    if dy_raw == 0:
        return 0
    dy = dy_raw % h
    south, north = dy, h - dy  # +y is "south" (row-major downward)
    if south < north:
        return P_SOUTH
    if north < south:
        return P_NORTH
    sq = routers[_neighbor(router.rid, P_SOUTH, w, h)].in_q[P_NORTH]
    nq = routers[_neighbor(router.rid, P_NORTH, w, h)].in_q[P_SOUTH]
    return P_SOUTH if len(sq) <= len(nq) else P_NORTH


def _neighbor(rid, port, w, h):
    x, y = rid % w, rid // w
    if port == P_EAST:
        x = (x + 1) % w
    elif port == P_WEST:
        x = (x - 1) % w
    elif port == P_SOUTH:
        y = (y + 1) % h
    else:
        y = (y - 1) % h
    return y * w + x


def _chunk(order, n):
    size = -(-len(order) // n)
    return [order[i : i + size] for i in range(0, len(order), size)] or [[]]


def run_spgemm_simulation(
    a_csr,
    b_csr,
    chip_cfg: ChipConfig,
    mapper_cfg: MapperConfig,
    seed: int = 0,
    eviction_mode: str = ROLLING,
    spad_budget: int | None = None,
    host_workers: int = 1,
    trace_stages: bool = False,
):
    """Lower C = A * B, simulate it, and return (stats, output CSR, run).

    The window plan is sized to half the chip's hashpad by default, keeping
    per-region load factors comfortably below the probing limit.
    """
    from . import oracle
    from .matio import csr_to_coo, to_csc

    plan = oracle.symbolic_pass(a_csr, b_csr)
    if spad_budget is None:
        spad_budget = chip_cfg.n_mems * chip_cfg.tile.hashlines_per_mem // 2
    wplan = oracle.plan_windows(plan, spad_budget=spad_budget)
    a_csc = to_csc(csr_to_coo(a_csr))
    program = isa.lower_spgemm(a_csc, b_csr, plan, windows=wplan)
    run = SimRun(
        program,
        chip_cfg,
        mapper_cfg,
        plan,
        window_plan=wplan,
        seed=seed,
        eviction_mode=eviction_mode,
        trace_stages=trace_stages,
    )
    stats = run.run_to_completion(host_workers=host_workers)
    return stats, run.result, run
