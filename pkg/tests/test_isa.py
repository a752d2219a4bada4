"""Tag packing, tile expansion, lowering conservation, replay, trace I/O."""

import io

import numpy as np
import pytest

from sparsim import isa, matio, oracle
from sparsim.errors import LoweringError, MemoryFaultError, TraceError


def rmat_csr(scale, ef, seed):
    coo = matio.generate_rmat(matio.RmatParams(scale=scale, edge_factor=ef, seed=seed))
    coo = matio.with_integer_values(coo, seed=seed + 1)
    return matio.to_csr(coo)


def lower(a_csr, b_csr, windows=None):
    plan = oracle.symbolic_pass(a_csr, b_csr)
    a_csc = matio.to_csc(matio.csr_to_coo(a_csr))
    return plan, isa.lower_spgemm(a_csc, b_csr, plan, windows=windows)


# ---------------------------------------------------------------------------
# Tags
# ---------------------------------------------------------------------------


def test_tag_bit_concatenation():
    assert isa.encode_tag(0xABCD, 0x1234) == 0xABCD1234
    assert isa.encode_tag(0, 0) == 0


def test_tag_round_trip_property():
    rng = np.random.Generator(np.random.PCG64(1))
    for layout in (isa.LAYOUT_16_16, isa.LAYOUT_12_20):
        i = rng.integers(0, layout.max_rows, size=100_000)
        j = rng.integers(0, layout.max_cols, size=100_000)
        tags = (i << layout.col_bits) | j
        # vectorized equivalent of encode, then scalar-decode a sample
        back_i = tags >> layout.col_bits
        back_j = tags & (layout.max_cols - 1)
        assert np.array_equal(back_i, i) and np.array_equal(back_j, j)
        for idx in range(0, 100_000, 9973):
            t = isa.encode_tag(int(i[idx]), int(j[idx]), layout)
            assert isa.decode_tag(t, layout) == (int(i[idx]), int(j[idx]))


def test_tag_overflow_suggests_wider_layout():
    with pytest.raises(LoweringError) as err:
        isa.encode_tag(1 << 16, 0, isa.LAYOUT_16_16)
    assert "wider" in str(err.value)


def test_default_layout_selection():
    assert isa.default_layout(100, 100) == isa.LAYOUT_16_16
    assert isa.default_layout(1 << 10, 1 << 18) == isa.LAYOUT_12_20
    with pytest.raises(LoweringError):
        isa.default_layout(1 << 20, 1 << 20)


# ---------------------------------------------------------------------------
# Expansion
# ---------------------------------------------------------------------------


def make_tile_program(a_vals, b_cols, b_vals, counters, a_rows):
    image = isa.MemoryImage()
    a_base = image.add("a_data", np.asarray(a_vals, dtype=np.float64))
    c_base = image.add("b_col_ind", np.asarray(b_cols, dtype=np.int32))
    d_base = image.add("b_data", np.asarray(b_vals, dtype=np.float64))
    r_base = image.add("roll_counters", np.asarray(counters, dtype=np.int32))
    ins = isa.Mmh4Instr(
        base_addr=0,
        a_data_addr=a_base,
        b_col_ind_addr=c_base,
        b_data_addr=d_base,
        roll_counter_addr=r_base,
        a_rows=tuple(a_rows),
        n_a=len(a_rows),
        n_b=len(b_cols),
    )
    return ins, image


def test_expand_full_tile():
    ins, image = make_tile_program(
        [1, 2, 3, 4], [0, 1, 2, 3], [1, 1, 1, 1], list(range(16)), [0, 1, 2, 3]
    )
    haccs = isa.expand_mmh4(ins, image)
    assert len(haccs) == 16
    assert [h.data for h in haccs] == [1.0] * 4 + [2.0] * 4 + [3.0] * 4 + [4.0] * 4
    assert [h.counter for h in haccs] == list(range(16))
    assert haccs[5].tag == isa.encode_tag(1, 1)


def test_expand_ragged_tile():
    ins, image = make_tile_program([1, 2], [5, 6, 7], [1, 1, 1], [0] * 16, [3, 9])
    haccs = isa.expand_mmh4(ins, image)
    assert len(haccs) == 6
    assert haccs[0].tag == isa.encode_tag(3, 5)
    assert haccs[-1].tag == isa.encode_tag(9, 7)


def test_expand_unmapped_address_faults():
    ins, image = make_tile_program([1], [0], [1], [0] * 16, [0])
    bad = isa.Mmh4Instr(
        base_addr=0,
        a_data_addr=0xDEADBEEF,
        b_col_ind_addr=ins.b_col_ind_addr,
        b_data_addr=ins.b_data_addr,
        roll_counter_addr=ins.roll_counter_addr,
        a_rows=(0,),
        n_a=1,
        n_b=1,
    )
    with pytest.raises(MemoryFaultError):
        isa.expand_mmh4(bad, image)


# ---------------------------------------------------------------------------
# Lowering
# ---------------------------------------------------------------------------


def test_lower_identity_replays_to_identity():
    eye = matio.to_csr(matio.coo_from_entries(4, 4, range(4), range(4), [1.0] * 4))
    _, prog = lower(eye, eye)
    assert len(prog.instrs) == 4  # one tile per diagonal element group pair
    out = isa.replay(prog)
    assert np.array_equal(matio.csr_to_dense(out), np.eye(4))


def test_lower_dense_two_by_two_counts():
    ones = matio.to_csr(matio.coo_from_entries(2, 2, [0, 0, 1, 1], [0, 1, 0, 1], [1.0] * 4))
    plan, prog = lower(ones, ones)
    haccs = [h for ins in prog.instrs for h in isa.expand_mmh4(ins, prog.image, prog.layout)]
    assert len(haccs) == 8  # 8 FMAs covered
    per_elem = {}
    for h in haccs:
        per_elem[h.tag] = per_elem.get(h.tag, 0) + 1
    assert all(c == 2 for c in per_elem.values())
    assert len(per_elem) == 4


def test_hacc_conservation_matches_plan():
    for seed in range(4):
        a = rmat_csr(5, 3, seed=seed)
        plan, prog = lower(a, a)
        counts = {}
        for ins in prog.instrs:
            for h in isa.expand_mmh4(ins, prog.image, prog.layout):
                counts[isa.decode_tag(h.tag, prog.layout)] = (
                    counts.get(isa.decode_tag(h.tag, prog.layout), 0) + 1
                )
        assert sum(counts.values()) == plan.total_fma
        assert counts == plan.contrib_counter
        assert all(ins.lanes <= 16 for ins in prog.instrs)


def test_replay_equals_gustavson_exact_integer():
    for seed in range(6):
        a = rmat_csr(6, 4, seed=seed + 10)
        b = rmat_csr(6, 4, seed=seed + 40)
        _, prog = lower(a, b)
        got = isa.replay(prog)
        want = oracle.spgemm_gustavson(a, b)
        assert np.array_equal(got.row_offsets, want.row_offsets)
        assert np.array_equal(got.col_indices, want.col_indices)
        assert np.array_equal(got.values, want.values)


def test_lower_with_windows_orders_by_window():
    a = rmat_csr(5, 3, seed=77)
    plan = oracle.symbolic_pass(a, a)
    wp = oracle.plan_windows(plan, spad_budget=256)
    a_csc = matio.to_csc(matio.csr_to_coo(a))
    prog = isa.lower_spgemm(a_csc, a, plan, windows=wp)
    assert prog.n_windows == len(wp.windows)
    assert prog.window_starts[0] == 0
    windows_seen = [ins.window for ins in prog.instrs]
    assert windows_seen == sorted(windows_seen)
    out = isa.replay(prog)
    want = oracle.spgemm_gustavson(a, a)
    assert np.array_equal(out.values, want.values)


# ---------------------------------------------------------------------------
# Trace I/O
# ---------------------------------------------------------------------------


def test_trace_text_round_trip():
    a = rmat_csr(5, 3, seed=3)
    _, prog = lower(a, a)
    buf = io.StringIO()
    isa.write_trace(prog, buf)
    buf.seek(0)
    back = isa.read_trace(buf, image=prog.image)
    assert back.instrs == prog.instrs
    assert back.window_starts == prog.window_starts
    assert back.layout == prog.layout
    got = isa.replay(back)
    assert np.array_equal(got.values, isa.replay(prog).values)


def test_trace_empty_stream_header_only():
    prog = isa.Program(
        instrs=[], image=isa.MemoryImage(), layout=isa.LAYOUT_16_16,
        n_rows=0, n_cols=0, window_starts=[0], total_fma=0, total_out_nnz=0,
    )
    buf = io.StringIO()
    isa.write_trace(prog, buf)
    buf.seek(0)
    back = isa.read_trace(buf)
    assert back.instrs == []


def test_trace_corrupted_record_names_index():
    a = rmat_csr(4, 2, seed=5)
    _, prog = lower(a, a)
    buf = io.StringIO()
    isa.write_trace(prog, buf)
    lines = buf.getvalue().splitlines()
    lines[5 + 2] = "0x14 garbage"
    with pytest.raises(TraceError) as err:
        isa.read_trace(io.StringIO("\n".join(lines)))
    assert "record 2" in str(err.value)


def test_trace_version_mismatch():
    with pytest.raises(TraceError):
        isa.read_trace(io.StringIO("# sparsim-mmh4-trace v9\nlayout 16 16\n"))


def test_trace_binary_round_trip_and_truncation():
    a = rmat_csr(5, 3, seed=9)
    _, prog = lower(a, a)
    buf = io.BytesIO()
    isa.write_trace_binary(prog, buf)
    buf.seek(0)
    back = isa.read_trace_binary(buf, image=prog.image)
    assert back.instrs == prog.instrs
    truncated = io.BytesIO(buf.getvalue()[:-7])
    with pytest.raises(TraceError):
        isa.read_trace_binary(truncated)
