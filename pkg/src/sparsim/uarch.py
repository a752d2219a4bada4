"""Structural models of the accelerator's building blocks.

The chip is a 2D torus of routers, one per compute unit, partitioned into
eight tiles (horizontal slabs of the torus). Each tile holds an equal-ish
interleave of multiplier cores and hash-accumulate memory units plus one
memory controller attached at the tile's origin router. Units exchange
packets over the torus: operand read requests and responses, hash-
accumulate instructions, and eviction write-backs.

All components are pure state machines advanced once per cycle by the
engine. During a step a component mutates only its own state and appends
outgoing packets to its outbox; the engine moves packets between
components in a canonical commit order, which keeps results deterministic
under any host-thread count. Fabric queues are bounded with credit
backpressure; endpoint inboxes for responses and memory requests are
modeled as sinks so the network always drains.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .errors import ConfigError, SimulationError
from .oracle import prev_prime_at_most

HASHLINE_BYTES = 12  # 32-bit tag + 64-bit accumulator

# Packet kinds
K_REQ = 0  # operand read request  -> memory controller
K_RESP = 1  # operand response      -> core
K_HACC = 2  # hash-accumulate       -> mem unit
K_EVICT = 3  # eviction write-back   -> memory controller

# Router ports
P_INJ = 0
P_EAST = 1
P_WEST = 2
P_NORTH = 3
P_SOUTH = 4


class Packet:
    """``ring`` tracks bubble flow control: 0 = not yet in a ring, 1 = in an
    X ring, 2 = in a Y ring. Entering a ring demands two free downstream
    slots so every ring always keeps a bubble (no circular wait); moving
    along a ring needs one."""

    __slots__ = ("dst", "kind", "payload", "hops", "ring", "moved_at")

    def __init__(self, dst, kind, payload):
        self.dst = dst
        self.kind = kind
        self.payload = payload
        self.hops = 0
        self.ring = 0
        self.moved_at = -1

    def __repr__(self):
        return f"Packet(dst={self.dst}, kind={self.kind}, hops={self.hops})"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TileConfig:
    """Per-unit element counts for one tile flavor."""

    name: str
    cores_per_tile: int
    mems_per_tile: int
    pipelines_per_core: int
    regs_per_pipeline: int  # each register is 128 bits
    multipliers: int
    addr_generators: int
    ports: int
    hash_engines: int
    tag_comparators_per_engine: int
    hashlines_per_mem: int
    accumulators_per_mem: int

    @property
    def routers_per_tile(self) -> int:
        return self.cores_per_tile + self.mems_per_tile

    @property
    def reg_bits_per_pipeline(self) -> int:
        return self.regs_per_pipeline * 128


TILE4 = TileConfig(
    name="tile4",
    cores_per_tile=4,
    mems_per_tile=4,
    pipelines_per_core=2,
    regs_per_pipeline=4,
    multipliers=2,
    addr_generators=1,
    ports=4,
    hash_engines=2,
    tag_comparators_per_engine=2,
    hashlines_per_mem=4096,
    accumulators_per_mem=128,
)

TILE16 = TileConfig(
    name="tile16",
    cores_per_tile=16,
    mems_per_tile=16,
    pipelines_per_core=4,
    regs_per_pipeline=8,
    multipliers=4,
    addr_generators=2,
    ports=4,
    hash_engines=4,
    tag_comparators_per_engine=4,
    hashlines_per_mem=2048,
    accumulators_per_mem=256,
)

TILE64 = TileConfig(
    name="tile64",
    cores_per_tile=64,
    mems_per_tile=64,
    pipelines_per_core=8,
    regs_per_pipeline=16,
    multipliers=8,
    addr_generators=2,
    ports=4,
    hash_engines=8,
    tag_comparators_per_engine=8,
    hashlines_per_mem=2048,
    accumulators_per_mem=512,
)

# Grid-of-cores variant used for graph-network comparisons: 256 cores per
# tile against 16 mems, fewer comparators, same per-mem hashpad.
TILE16_GNN = TileConfig(
    name="tile16-gnn",
    cores_per_tile=256,
    mems_per_tile=16,
    pipelines_per_core=4,
    regs_per_pipeline=8,
    multipliers=4,
    addr_generators=2,
    ports=4,
    hash_engines=4,
    tag_comparators_per_engine=1,
    hashlines_per_mem=2048,
    accumulators_per_mem=256,
)

NAMED_TILES = {t.name: t for t in (TILE4, TILE16, TILE64, TILE16_GNN)}


@dataclass(frozen=True)
class ChipConfig:
    """Whole-chip shape plus stage latencies and memory-channel parameters.

    Defaults: 1 GHz nominal clock and eight 16 B/cycle channels, i.e. an
    aggregate 128 GB/s memory system.
    """

    tile: TileConfig = TILE4
    n_tiles: int = 8
    frequency_ghz: float = 1.0
    # stage latencies (cycles)
    decode_latency: int = 1
    regalloc_latency: int = 1
    mul_latency: int = 2
    accumulate_latency: int = 1
    hop_latency: int = 1
    # structural knobs
    regs_per_mmh4: int = 4
    core_buffer_depth: int = 8
    mem_buffer_depth: int = 0  # 0 -> 4 * hash_engines
    router_queue_depth: int = 4
    injection_depth: int = 8
    full_parallel_compare: bool = False
    eviction_path: str = "torus"  # or "direct"
    # memory channel (per tile)
    channel_bytes_per_cycle: int = 16
    channel_fixed_latency: int = 64
    channel_queue_depth: int = 16
    granule: int = 64
    coalesce_window: int = 16

    def __post_init__(self):
        if self.n_tiles < 1 or self.tile.cores_per_tile < 1 or self.tile.mems_per_tile < 1:
            raise ConfigError("chip needs at least one tile with cores and mems")
        if self.eviction_path not in ("torus", "direct"):
            raise ConfigError(f"unknown eviction path {self.eviction_path!r}")
        service = -(-self.granule // self.channel_bytes_per_cycle)
        if self.channel_fixed_latency < service:
            raise ConfigError("channel fixed latency must cover one granule service time")

    @property
    def n_cores(self) -> int:
        return self.n_tiles * self.tile.cores_per_tile

    @property
    def n_mems(self) -> int:
        return self.n_tiles * self.tile.mems_per_tile

    @property
    def n_routers(self) -> int:
        return self.n_tiles * self.tile.routers_per_tile

    @property
    def total_pipelines(self) -> int:
        return self.n_cores * self.tile.pipelines_per_core

    @property
    def total_hash_engines(self) -> int:
        return self.n_mems * self.tile.hash_engines

    @property
    def hashpad_bytes(self) -> int:
        return self.n_mems * self.tile.hashlines_per_mem * HASHLINE_BYTES

    @property
    def mem_inbox_depth(self) -> int:
        return self.mem_buffer_depth or 4 * self.tile.hash_engines


CHIP_TILE4 = ChipConfig(tile=TILE4)
CHIP_TILE16 = ChipConfig(tile=TILE16)
CHIP_TILE64 = ChipConfig(tile=TILE64)

NAMED_CHIPS = {
    "tile4": CHIP_TILE4,
    "tile16": CHIP_TILE16,
    "tile64": CHIP_TILE64,
    "tile16-gnn": ChipConfig(tile=TILE16_GNN, router_queue_depth=2),
}


def named_chip(name: str) -> ChipConfig:
    try:
        return NAMED_CHIPS[name]
    except KeyError:
        raise ConfigError(f"unknown chip config {name!r}; have {sorted(NAMED_CHIPS)}") from None


# ---------------------------------------------------------------------------
# Torus geometry
# ---------------------------------------------------------------------------


def torus_shape(cfg: ChipConfig) -> tuple[int, int]:
    """Grid width/height: tiles are horizontal slabs, so the width must
    divide the per-tile router count; pick the divisor closest to square."""
    per_tile = cfg.tile.routers_per_tile
    total = cfg.n_routers
    target = total ** 0.5
    best = None
    for w in range(1, per_tile + 1):
        if per_tile % w == 0:
            if best is None or abs(w - target) < abs(best - target):
                best = w
    return best, total // best


def torus_distance(a: int, b: int, w: int, h: int) -> int:
    ax, ay = a % w, a // w
    bx, by = b % w, b // w
    dx = abs(ax - bx)
    dy = abs(ay - by)
    return min(dx, w - dx) + min(dy, h - dy)


# ---------------------------------------------------------------------------
# Router
# ---------------------------------------------------------------------------


class Router:
    """Torus router node: bounded input queues per direction plus an
    injection queue (the attached component's four ports folded together).

    Flit movement itself happens in the engine's commit phase as direct
    queue-to-queue transfers (dimension-ordered X then Y, shortest wrap,
    adaptive shortest-queue tie-break, one flit per input per cycle, at
    most four injections/ejections). Ring deadlock is prevented with
    bubble flow control: a flit entering a ring needs two free slots in
    the target queue, a flit continuing along its ring needs one, so every
    ring always keeps a bubble.
    """

    __slots__ = ("rid", "x", "y", "in_q", "component", "memctrl")

    def __init__(self, rid, w, h):
        self.rid = rid
        self.x = rid % w
        self.y = rid // w
        self.in_q = [deque() for _ in range(5)]  # INJ, E, W, N, S
        self.component = None
        self.memctrl = None

    def pending_flits(self) -> int:
        return sum(len(q) for q in self.in_q)


# ---------------------------------------------------------------------------
# Memory channel
# ---------------------------------------------------------------------------


class MemChannelModel:
    """Analytic channel: bandwidth cap, fixed pipelined latency, bounded
    queue. A transaction submitted at cycle t on an idle channel completes
    at exactly t + fixed_latency; back-to-back transactions are spaced by
    their service time so sustained throughput equals the peak bandwidth.
    """

    __slots__ = (
        "peak_bandwidth", "fixed_latency", "queue_depth",
        "free_at", "completions", "bytes_served", "transactions",
    )

    def __init__(self, peak_bandwidth=16, fixed_latency=64, queue_depth=16):
        self.peak_bandwidth = peak_bandwidth
        self.fixed_latency = fixed_latency
        self.queue_depth = queue_depth
        self.free_at = 0
        self.completions = deque()  # completion cycles of in-flight txns (FIFO)
        self.bytes_served = 0
        self.transactions = 0

    def _reap(self, cycle):
        done = self.completions
        while done and done[0] <= cycle:
            done.popleft()

    def can_submit(self, cycle) -> bool:
        self._reap(cycle)
        return len(self.completions) < self.queue_depth

    def submit(self, cycle, nbytes) -> int:
        """Returns the completion cycle."""
        start = max(cycle, self.free_at)
        service = -(-nbytes // self.peak_bandwidth)
        self.free_at = start + service
        completion = start + self.fixed_latency
        self.completions.append(completion)
        self.bytes_served += nbytes
        self.transactions += 1
        return completion

    @property
    def busy(self) -> bool:
        return bool(self.completions)


# ---------------------------------------------------------------------------
# Core (multiplier unit)
# ---------------------------------------------------------------------------

S_DECODE = 0
S_REGALLOC = 1
S_WAIT = 2
S_EXEC = 3
S_DRAIN = 4

STAGE_NAMES = {S_DECODE: "decode", S_REGALLOC: "regalloc", S_WAIT: "wait", S_EXEC: "exec", S_DRAIN: "drain"}


class _InFlight:
    __slots__ = (
        "seq", "instr", "pipe", "stage", "ready_at", "outstanding",
        "accept_cycle", "haccs_pending", "stage_trace",
    )

    def __init__(self, seq, instr, pipe, cycle, trace=False):
        self.seq = seq
        self.instr = instr
        self.pipe = pipe
        self.stage = S_DECODE
        self.ready_at = cycle
        self.outstanding = 0
        self.accept_cycle = cycle
        self.haccs_pending = 0
        self.stage_trace = {"accept": cycle} if trace else None


class CoreModel:
    """In-order multi-pipeline multiplier core.

    Pipeline: accept -> decode -> register allocation -> operand fetch
    (addr generators issue read requests, the scoreboard collects
    responses) -> execute (multiplier latency plus lane serialization) ->
    drain the produced hash-accumulate packets through the ports.
    Registers gate the number of in-flight tiles per pipeline; a full
    instruction buffer refuses dispatch (backpressure, never overflow).
    """

    __slots__ = (
        "id", "rid", "cfg", "ctx", "dispatch_latch", "inflight", "pipes",
        "free_regs", "rr_pipe", "req_queue", "outbox", "inbox",
        "stalls_reg", "stalls_operand", "stalls_port", "lanes_executed",
        "cpi", "retired", "seq_gen", "activity", "trace_stages", "_engine_idx",
    )

    def __init__(self, core_id, rid, cfg: ChipConfig):
        self.id = core_id
        self.rid = rid
        self.cfg = cfg
        self.ctx = None  # set by the engine: shared run context
        self.dispatch_latch = None
        self.inflight = {}
        self.pipes = [deque() for _ in range(cfg.tile.pipelines_per_core)]
        self.free_regs = [cfg.tile.regs_per_pipeline] * cfg.tile.pipelines_per_core
        self.rr_pipe = 0
        self.req_queue = deque()
        self.outbox = deque()
        self.inbox = deque()
        self.stalls_reg = 0
        self.stalls_operand = 0
        self.stalls_port = 0
        self.lanes_executed = 0
        self.cpi = {}
        self.retired = 0
        self.seq_gen = 0
        self.activity = 0
        self.trace_stages = False
        self._engine_idx = -1

    def buffer_free(self) -> bool:
        return self.dispatch_latch is None

    def _mark(self, rec, stage_name, cycle):
        if rec.stage_trace is not None:
            rec.stage_trace[stage_name] = cycle

    def step(self, cycle):
        ctx = self.ctx
        cfg = self.cfg
        acted = 0

        # Responses retire into the scoreboard.
        while self.inbox:
            _, seq, _field = self.inbox.popleft().payload
            rec = self.inflight.get(seq)
            if rec is not None:
                rec.outstanding -= 1
                if rec.outstanding == 0:
                    self._mark(rec, "operands", cycle)
            acted += 1

        # Accept at most one dispatched instruction per cycle.
        if self.dispatch_latch is not None and len(self.inflight) < cfg.core_buffer_depth:
            instr = self.dispatch_latch
            self.dispatch_latch = None
            seq = self.seq_gen
            self.seq_gen += 1
            pipe = self.rr_pipe
            self.rr_pipe = (self.rr_pipe + 1) % len(self.pipes)
            rec = _InFlight(seq, instr, pipe, cycle, trace=self.trace_stages)
            rec.ready_at = cycle + cfg.decode_latency
            self.inflight[seq] = rec
            self.pipes[pipe].append(seq)
            acted += 1

        # Advance pipeline stages.
        for pipe_idx, fifo in enumerate(self.pipes):
            alloc_done = False
            for pos, seq in enumerate(fifo):
                rec = self.inflight[seq]
                if rec.stage == S_DECODE:
                    if cycle >= rec.ready_at:
                        rec.stage = S_REGALLOC
                        self._mark(rec, "decode", cycle)
                        acted += 1
                elif rec.stage == S_REGALLOC:
                    if alloc_done:
                        continue
                    alloc_done = True
                    if cycle < rec.ready_at + cfg.regalloc_latency - 1:
                        continue
                    if self.free_regs[pipe_idx] >= cfg.regs_per_mmh4:
                        self.free_regs[pipe_idx] -= cfg.regs_per_mmh4
                        rec.stage = S_WAIT
                        self._mark(rec, "regalloc", cycle)
                        self._issue_requests(rec, cycle)
                        acted += 1
                    else:
                        self.stalls_reg += 1
                elif rec.stage == S_WAIT:
                    if rec.outstanding == 0 and pos == 0:
                        rec.stage = S_EXEC
                        lanes = rec.instr.lanes
                        dur = cfg.mul_latency + -(-lanes // cfg.tile.multipliers) - 1
                        rec.ready_at = cycle + dur
                        self._mark(rec, "exec_start", cycle)
                        acted += 1
                    elif rec.outstanding > 0 and pos == 0:
                        self.stalls_operand += 1
                elif rec.stage == S_EXEC:
                    if cycle >= rec.ready_at and pos == 0:
                        haccs = ctx.expand(rec.instr)
                        self.lanes_executed += len(haccs)
                        for h in haccs:
                            self.outbox.append(
                                Packet(None, K_HACC, (h.tag, h.data, h.counter, self.id, seq))
                            )
                        rec.haccs_pending = len(haccs)
                        rec.stage = S_DRAIN
                        self._mark(rec, "exec_done", cycle)
                        acted += 1
                elif rec.stage == S_DRAIN:
                    if rec.haccs_pending == 0 and pos == 0:
                        self._retire(rec, pipe_idx, cycle)
                        acted += 1
                        break  # fifo mutated

        # Address generators drain the request queue.
        for _ in range(cfg.tile.addr_generators):
            if not self.req_queue:
                break
            self.outbox.append(self.req_queue.popleft())
            acted += 1

        self.activity += acted
        busy = bool(
            self.inflight or self.dispatch_latch is not None or self.req_queue or self.outbox or self.inbox
        )
        return busy

    def _issue_requests(self, rec, cycle):
        ins = rec.instr
        reqs = (
            (0, ins.base_addr + ins.a_data_addr, ins.n_a * 8),
            (1, ins.base_addr + ins.b_col_ind_addr, ins.n_b * 4),
            (2, ins.base_addr + ins.b_data_addr, ins.n_b * 8),
            (3, ins.base_addr + ins.roll_counter_addr, 16 * 4),
        )
        rec.outstanding = len(reqs)
        for field, addr, nbytes in reqs:
            dst = self.ctx.memctrl_rid_for(addr)
            self.req_queue.append(Packet(dst, K_REQ, (self.id, rec.seq, field, addr, nbytes)))
        if rec.stage_trace is not None:
            rec.stage_trace["requests_queued"] = cycle

    def _retire(self, rec, pipe_idx, cycle):
        fifo = self.pipes[pipe_idx]
        assert fifo[0] == rec.seq, "in-order retirement violated"
        fifo.popleft()
        self.free_regs[pipe_idx] += self.cfg.regs_per_mmh4
        del self.inflight[rec.seq]
        cycles = cycle - rec.accept_cycle
        self.cpi[cycles] = self.cpi.get(cycles, 0) + 1
        self.retired += 1
        self._mark(rec, "retire", cycle)
        if rec.stage_trace is not None:
            self.ctx.stage_traces.append(rec.stage_trace)
        self.ctx.on_mmh4_retired(rec.instr)


# ---------------------------------------------------------------------------
# Mem (hash-accumulate unit)
# ---------------------------------------------------------------------------


_EMPTY = -1
_TOMBSTONE = -2


class _HashRegion:
    """One hash engine's slice of the HashPad: prime capacity, quadratic
    probing, remaining-contribution counters.

    Rolling eviction frees lines mid-stream, so freed slots become
    tombstones that probes walk through (otherwise a colliding tag's later
    products would stop early and claim a duplicate line). Tombstones are
    reclaimed by inserts and wiped wholesale at window boundaries."""

    __slots__ = ("capacity", "tags", "vals", "counters", "occupancy", "tombstones")

    def __init__(self, capacity):
        self.capacity = capacity
        self.tags = [_EMPTY] * capacity
        self.vals = [0.0] * capacity
        self.counters = [0] * capacity
        self.occupancy = 0
        self.tombstones = 0

    def probe(self, tag):
        """Returns (slot, probes_examined, is_insert)."""
        cap = self.capacity
        home = tag % cap
        slot = home
        reuse = -1
        for k in range(cap + 1):
            if k:
                slot = (home + k * k) % cap
            cur = self.tags[slot]
            if cur == _EMPTY:
                return (reuse if reuse >= 0 else slot), k + 1, True
            if cur == tag:
                return slot, k + 1, False
            if cur == _TOMBSTONE and reuse < 0:
                reuse = slot
        if reuse >= 0:
            return reuse, cap + 1, True
        return None, cap + 1, False

    def reset(self):
        if self.occupancy:
            raise SimulationError("hashpad reset with live lines")
        if self.tombstones:
            self.tags = [_EMPTY] * self.capacity
            self.tombstones = 0


class MemModel:
    """Hash engines over a partitioned HashPad with rolling eviction.

    Each engine owns a prime-capacity region; an incoming packet's tag
    picks the engine, the region index comes from prime-modulo hashing
    with quadratic probing. A matching tag accumulates and decrements the
    counter; a miss claims a line. When the counter hits zero the line is
    evicted in the same commit and a write-back packet leaves for the
    memory controller (rolling mode) or the line is held until the window
    flush (barrier mode).
    """

    __slots__ = (
        "id", "rid", "cfg", "ctx", "inbox", "outbox", "engines_pending",
        "regions", "n_engines", "occupancy", "occupancy_max", "haccs_committed",
        "evictions", "cpi", "grid_row", "evicted_values", "activity", "probes_total",
        "stalls_port", "_engine_idx",
    )

    def __init__(self, mem_id, rid, cfg: ChipConfig):
        self.id = mem_id
        self.rid = rid
        self.cfg = cfg
        self.ctx = None
        self.inbox = deque()
        self.outbox = deque()
        self.n_engines = cfg.tile.hash_engines
        per_engine = cfg.tile.hashlines_per_mem // self.n_engines
        cap = prev_prime_at_most(max(per_engine, 2))
        self.regions = [_HashRegion(cap) for _ in range(self.n_engines)]
        self.engines_pending = [None] * self.n_engines
        self.occupancy = 0
        self.occupancy_max = 0
        self.haccs_committed = 0
        self.evictions = 0
        self.cpi = {}
        self.grid_row = None  # per-core tallies, sized lazily
        self.evicted_values = []
        self.activity = 0
        self.probes_total = 0
        self.stalls_port = 0
        self._engine_idx = -1

    def step(self, cycle):
        ctx = self.ctx
        cfg = self.cfg
        acted = 0
        rolling = ctx.rolling_evictions
        for e in range(self.n_engines):
            pending = self.engines_pending[e]
            if pending is not None:
                if cycle < pending[0]:
                    continue
                self._complete(pending, cycle)
                self.engines_pending[e] = None
                acted += 1
            # pick the next packet belonging to this engine
            picked = None
            for idx, pkt in enumerate(self.inbox):
                tag = pkt.payload[0]
                if tag % self.n_engines == e:
                    picked = idx
                    break
            if picked is None:
                continue
            pkt = self.inbox[picked]
            del self.inbox[picked]
            tag, data, counter, src_core, _seq = pkt.payload
            birth = pkt.moved_at  # acceptance into this unit's buffer
            region = self.regions[e]
            slot, probes, is_insert = region.probe(tag)
            if slot is None:
                raise SimulationError(
                    f"hashpad overflow at mem {self.id} engine {e} (tag {tag:#x}); "
                    "window sizing bug"
                )
            self.probes_total += probes
            if is_insert:
                if region.tags[slot] == _TOMBSTONE:
                    region.tombstones -= 1
                region.tags[slot] = tag
                region.vals[slot] = data
                region.counters[slot] = counter
                region.occupancy += 1
                self.occupancy += 1
                if self.occupancy > self.occupancy_max:
                    self.occupancy_max = self.occupancy
            else:
                region.vals[slot] += data
                region.counters[slot] -= 1
            evict = rolling and region.counters[slot] == 0
            if cfg.full_parallel_compare:
                compare_cycles = 1
            else:
                compare_cycles = -(-probes // cfg.tile.tag_comparators_per_engine)
            done = cycle + compare_cycles + cfg.accumulate_latency - 1
            self.engines_pending[e] = (done, e, slot, evict, tag, src_core, birth)
            acted += 1
        self.activity += acted
        busy = bool(self.inbox or any(p is not None for p in self.engines_pending) or self.outbox)
        return busy

    def _complete(self, pending, cycle):
        done, e, slot, evict, tag, src_core, birth = pending
        ctx = self.ctx
        self.haccs_committed += 1
        cycles = cycle - birth
        self.cpi[cycles] = self.cpi.get(cycles, 0) + 1
        if self.grid_row is None:
            self.grid_row = [0] * ctx.n_cores
        self.grid_row[src_core] += 1
        if evict:
            region = self.regions[e]
            value = region.vals[slot]
            self._evict_line(region, slot, tag, value)
        ctx.on_hacc_committed(tag)

    def _evict_line(self, region, slot, tag, value):
        region.tags[slot] = _TOMBSTONE
        region.tombstones += 1
        region.occupancy -= 1
        self.occupancy -= 1
        self.evictions += 1
        self.evicted_values.append((tag, value))
        i, j, addr, nbytes = self.ctx.eviction_target(tag)
        # dst is the owning controller; on the dedicated-path config the
        # engine delivers it directly instead of injecting into the torus.
        self.outbox.append(
            Packet(self.ctx.memctrl_rid_for(addr), K_EVICT, (i, j, value, addr, nbytes))
        )

    def flush_all(self):
        """Barrier eviction: drain every occupied line (window boundary)."""
        for region in self.regions:
            if not region.occupancy:
                continue
            for slot, tag in enumerate(region.tags):
                if tag >= 0:
                    self._evict_line(region, slot, tag, region.vals[slot])

    def reset_pads(self):
        """Clear tombstones between windows (pad must hold no live lines)."""
        for region in self.regions:
            region.reset()


# ---------------------------------------------------------------------------
# Memory controller
# ---------------------------------------------------------------------------


class MemCtrlModel:
    """Coalescing, reordering memory controller over one channel.

    Read requests are split into granule touches; within a bounded reorder
    window all touches of one granule merge into a single transaction.
    Evictions write-combine per granule the same way. Reads have priority;
    one transaction issues per cycle at most.
    """

    __slots__ = (
        "id", "rid", "cfg", "ctx", "channel", "inbox", "outbox",
        "read_pending", "write_pending", "inflight", "bytes_read", "bytes_written",
        "reads_merged", "transactions_read", "transactions_write", "activity",
        "writes_outstanding", "touch_remaining", "stalls_port", "_engine_idx",
    )

    def __init__(self, mc_id, rid, cfg: ChipConfig, channel: MemChannelModel):
        self.id = mc_id
        self.rid = rid
        self.cfg = cfg
        self.ctx = None
        self.channel = channel
        self.inbox = deque()
        self.outbox = deque()
        self.read_pending = deque()  # (granule, core_id, seq, field, touches)
        self.write_pending = deque()  # granule ids
        self.inflight = []  # (completion, responses, is_write), sorted by completion
        self.bytes_read = 0
        self.bytes_written = 0
        self.reads_merged = 0
        self.transactions_read = 0
        self.transactions_write = 0
        self.writes_outstanding = 0
        self.touch_remaining = {}  # request key -> granule touches still in flight
        self.activity = 0
        self.stalls_port = 0
        self._engine_idx = -1

    def step(self, cycle):
        cfg = self.cfg
        acted = 0
        granule = cfg.granule

        while self.inbox:
            pkt = self.inbox.popleft()
            if pkt.kind == K_REQ:
                core_id, seq, field, addr, nbytes = pkt.payload
                first = addr // granule
                last = (addr + nbytes - 1) // granule
                touches = last - first + 1
                for g in range(first, last + 1):
                    self.read_pending.append((g, core_id, seq, field, touches))
            else:  # eviction write-back
                _i, _j, _value, addr, nbytes = pkt.payload
                self.write_pending.append(addr // granule)
                self.ctx.on_eviction_arrived()
            acted += 1

        # completions
        while self.inflight and self.inflight[0][0] <= cycle:
            _, responses, is_write = self.inflight.pop(0)
            if is_write:
                self.writes_outstanding -= 1
            for core_id, seq, field in responses:
                self.outbox.append(
                    Packet(self.ctx.core_rid(core_id), K_RESP, (core_id, seq, field))
                )
            acted += 1

        # issue at most one transaction, reads first
        if self.read_pending and self.channel.can_submit(cycle):
            g0 = self.read_pending[0][0]
            merged = []
            kept = deque()
            window = cfg.coalesce_window
            for idx, item in enumerate(self.read_pending):
                if item[0] == g0 and idx < window:
                    merged.append(item)
                else:
                    kept.append(item)
            self.read_pending = kept
            completion = self.channel.submit(cycle, granule)
            self.bytes_read += granule
            self.transactions_read += 1
            self.reads_merged += len(merged) - 1
            responses = []
            for _, core_id, seq, field, touches in merged:
                key = (core_id, seq, field)
                remaining = self.touch_remaining.get(key, touches) - 1
                if remaining == 0:
                    self.touch_remaining.pop(key, None)
                    responses.append(key)
                else:
                    self.touch_remaining[key] = remaining
            self._push_inflight(completion, responses, False)
            acted += 1
        elif self.write_pending and self.channel.can_submit(cycle):
            g0 = self.write_pending[0]
            kept = deque()
            merged = 0
            window = cfg.coalesce_window
            for idx, g in enumerate(self.write_pending):
                if g == g0 and idx < window:
                    merged += 1
                else:
                    kept.append(g)
            self.write_pending = kept
            completion = self.channel.submit(cycle, granule)
            self.bytes_written += granule
            self.transactions_write += 1
            self.writes_outstanding += 1
            self._push_inflight(completion, [], True)
            acted += 1

        self.activity += acted
        busy = bool(
            self.inbox or self.read_pending or self.write_pending or self.inflight or self.outbox
        )
        return busy

    def _push_inflight(self, completion, responses, is_write):
        # keep sorted by completion; depths are small so linear insert is fine
        pos = len(self.inflight)
        while pos > 0 and self.inflight[pos - 1][0] > completion:
            pos -= 1
        self.inflight.insert(pos, (completion, responses, is_write))


# ---------------------------------------------------------------------------
# Chip assembly
# ---------------------------------------------------------------------------


@dataclass
class Chip:
    cfg: ChipConfig
    width: int
    height: int
    routers: list
    cores: list
    mems: list
    memctrls: list
    core_rids: list
    mem_rids: list
    memctrl_rids: list

    @property
    def n_cores(self):
        return len(self.cores)

    @property
    def n_mems(self):
        return len(self.mems)

    @property
    def n_routers(self):
        return len(self.routers)

    @property
    def total_pipelines(self):
        return self.cfg.total_pipelines

    @property
    def hashpad_bytes(self):
        return self.cfg.hashpad_bytes


def _interleave_kinds(n_cores, n_mems, width):
    """Evenly interleave core/mem placements for one tile slab."""
    total = n_cores + n_mems
    if n_cores == n_mems:
        # checkerboard when balanced (width even keeps rows balanced)
        rows = total // width
        kinds = []
        for y in range(rows):
            for x in range(width):
                kinds.append("core" if (x + y) % 2 == 0 else "mem")
        return kinds
    kinds = []
    placed_mems = 0
    for idx in range(total):
        want = ((idx + 1) * n_mems) // total
        if want > placed_mems:
            kinds.append("mem")
            placed_mems += 1
        else:
            kinds.append("core")
    return kinds


def build_chip(cfg: ChipConfig) -> Chip:
    """Instantiate routers, cores, mems, and one memory controller per tile
    on the global torus. Component totals follow the configuration exactly.
    """
    width, height = torus_shape(cfg)
    n_routers = cfg.n_routers
    routers = [Router(rid, width, height) for rid in range(n_routers)]
    cores = []
    mems = []
    memctrls = []
    core_rids = []
    mem_rids = []
    memctrl_rids = []

    tile = cfg.tile
    per_tile = tile.routers_per_tile
    kinds = _interleave_kinds(tile.cores_per_tile, tile.mems_per_tile, width)
    for t in range(cfg.n_tiles):
        base_rid = t * per_tile
        for local, kind in enumerate(kinds):
            rid = base_rid + local
            if kind == "core":
                core = CoreModel(len(cores), rid, cfg)
                routers[rid].component = core
                cores.append(core)
                core_rids.append(rid)
            else:
                mem = MemModel(len(mems), rid, cfg)
                routers[rid].component = mem
                mems.append(mem)
                mem_rids.append(rid)
        channel = MemChannelModel(
            peak_bandwidth=cfg.channel_bytes_per_cycle,
            fixed_latency=cfg.channel_fixed_latency,
            queue_depth=cfg.channel_queue_depth,
        )
        mc = MemCtrlModel(t, base_rid, cfg, channel)
        routers[base_rid].memctrl = mc
        memctrls.append(mc)
        memctrl_rids.append(base_rid)

    if len(cores) != cfg.n_cores or len(mems) != cfg.n_mems:
        raise ConfigError(
            f"placement mismatch: built {len(cores)} cores / {len(mems)} mems, "
            f"expected {cfg.n_cores} / {cfg.n_mems}"
        )
    return Chip(
        cfg=cfg,
        width=width,
        height=height,
        routers=routers,
        cores=cores,
        mems=mems,
        memctrls=memctrls,
        core_rids=core_rids,
        mem_rids=mem_rids,
        memctrl_rids=memctrl_rids,
    )
