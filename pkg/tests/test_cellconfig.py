import random
import struct

import pytest
from hypothesis import given, strategies as st

from cellsim import (
    CellConfig,
    CommDecl,
    Hypervisor,
    IoPortRange,
    MemRegion,
    MmioDevice,
    PciDevice,
    PermFlags,
    ViolationKind,
    Workload,
    WorkloadKind,
    emit_binary,
    full_platform_config,
    load_binary,
    parse_config,
    validate_against,
)
from cellsim.cellconfig import MAGIC, VERSION
from cellsim.errors import (
    BadMagic,
    ConfigSemanticError,
    ConfigSyntaxError,
    InvariantViolation,
    TruncatedRecord,
    UnsupportedVersion,
)

from gen import random_config


FULL_TEXT = """
# non-root cell owning a little of everything
cell "rtos"
cpu 1,2
mem 0x10020000 0x10000 rwx
mem 0x10010000 0x10000 rw
mmio uart 0x70006000 0x1000
pci 0x0010
ioport 0x3f8 0x8
irq 33,40-41
comm peer=other size=0x1000 vectors=4
run latency-responder
"""


class TestDsl:
    def test_full_config(self):
        cfg = parse_config(FULL_TEXT)
        assert cfg.name == "rtos"
        assert cfg.cpus == frozenset({1, 2})
        assert [r.base for r in cfg.mem] == [0x1001_0000, 0x1002_0000]
        assert cfg.mem[1].flags == (PermFlags.READ | PermFlags.WRITE | PermFlags.EXECUTE)
        assert [type(d).__name__ for d in cfg.devices] == [
            "MmioDevice", "PciDevice", "IoPortRange"]
        assert cfg.irqs == frozenset({33, 40, 41})
        assert cfg.comm == (CommDecl("other", 0x1000, 4),)
        assert cfg.workload.kind is WorkloadKind.LATENCY_RESPONDER

    def test_script_workload_keeps_path(self):
        cfg = parse_config(
            'cell "s"\ncpu 0\nmem 0x10000000 0x1000 rw\nrun script ops.txt\n')
        assert cfg.workload == Workload(WorkloadKind.SCRIPT, "ops.txt")

    def test_default_workload_is_idle(self):
        cfg = parse_config('cell "s"\ncpu 0\nmem 0x10000000 0x1000 rw\n')
        assert cfg.workload.kind is WorkloadKind.IDLE

    def test_missing_name(self):
        with pytest.raises(ConfigSemanticError):
            parse_config("cpu 0\nmem 0x10000000 0x1000 rw\n")

    def test_missing_cpus(self):
        with pytest.raises(ConfigSemanticError):
            parse_config('cell "s"\nmem 0x10000000 0x1000 rw\n')

    def test_missing_mem(self):
        with pytest.raises(ConfigSemanticError):
            parse_config('cell "s"\ncpu 0\n')

    def test_bad_perm_letter_reports_position(self):
        with pytest.raises(ConfigSyntaxError) as excinfo:
            parse_config('cell "s"\ncpu 0\nmem 0x10000000 0x1000 rq\n')
        assert excinfo.value.line == 3
        assert excinfo.value.col > 1

    def test_unknown_directive_reports_line(self):
        with pytest.raises(ConfigSyntaxError) as excinfo:
            parse_config('cell "s"\nwhatever 3\n')
        assert excinfo.value.line == 2

    def test_duplicate_cpu_rejected(self):
        with pytest.raises(ConfigSemanticError):
            parse_config('cell "s"\ncpu 0,0\nmem 0x10000000 0x1000 rw\n')

    def test_duplicate_run_rejected(self):
        with pytest.raises(ConfigSemanticError):
            parse_config('cell "s"\ncpu 0\nmem 0x10000000 0x1000 rw\n'
                         "run idle\nrun stress\n")

    def test_comm_missing_key(self):
        with pytest.raises(ConfigSyntaxError):
            parse_config('cell "s"\ncpu 0\nmem 0x10000000 0x1000 rw\n'
                         "comm peer=x size=0x1000\n")

    def test_unknown_workload(self):
        with pytest.raises(ConfigSyntaxError):
            parse_config('cell "s"\ncpu 0\nmem 0x10000000 0x1000 rw\nrun spin\n')

    def test_script_needs_path(self):
        with pytest.raises(ConfigSyntaxError):
            parse_config('cell "s"\ncpu 0\nmem 0x10000000 0x1000 rw\nrun script\n')

    def test_unquoted_name_rejected(self):
        with pytest.raises(ConfigSyntaxError):
            parse_config("cell s\ncpu 0\nmem 0x10000000 0x1000 rw\n")

    def test_overlong_name_rejected(self):
        with pytest.raises(ConfigSemanticError):
            parse_config('cell "%s"\ncpu 0\nmem 0x10000000 0x1000 rw\n' % ("x" * 32))

    def test_comments_and_blank_lines_ignored(self):
        cfg = parse_config(
            "\n# leading comment\n\ncell \"s\"  # trailing\ncpu 0\n"
            "mem 0x10000000 0x1000 rw\n\n")
        assert cfg.name == "s"


class TestCellConfigInvariants:
    def test_field_order_is_canonical(self):
        shuffled = CellConfig(
            name="c", cpus=[3, 1], irqs=[40, 33],
            mem=[MemRegion(0x2000, 0x1000), MemRegion(0x1000, 0x1000)],
            devices=[IoPortRange(0x60, 4), PciDevice(8), MmioDevice("u", 0x9000, 0x1000)],
            comm=[CommDecl("b", 0x1000, 1), CommDecl("a", 0x1000, 1)])
        assert [r.base for r in shuffled.mem] == [0x1000, 0x2000]
        assert [type(d) for d in shuffled.devices] == [MmioDevice, PciDevice, IoPortRange]
        assert [c.peer for c in shuffled.comm] == ["a", "b"]

    def test_equality_ignores_input_order(self):
        a = CellConfig(name="c", cpus=[0, 1],
                       mem=[MemRegion(0x1000, 0x1000), MemRegion(0x3000, 0x1000)])
        b = CellConfig(name="c", cpus=[1, 0],
                       mem=[MemRegion(0x3000, 0x1000), MemRegion(0x1000, 0x1000)])
        assert a == b

    def test_internal_overlap_rejected(self):
        with pytest.raises(InvariantViolation):
            CellConfig(name="c", cpus=[0],
                       mem=[MemRegion(0x1000, 0x2000), MemRegion(0x2000, 0x2000)])

    def test_mem_mmio_overlap_rejected(self):
        with pytest.raises(InvariantViolation):
            CellConfig(name="c", cpus=[0], mem=[MemRegion(0x1000, 0x2000)],
                       devices=[MmioDevice("u", 0x2000, 0x1000)])

    def test_bad_name_rejected(self):
        with pytest.raises(InvariantViolation):
            CellConfig(name="has space", cpus=[0], mem=[MemRegion(0x1000, 0x1000)])

    def test_needs_cpu_and_mem(self):
        with pytest.raises(InvariantViolation):
            CellConfig(name="c", cpus=[], mem=[MemRegion(0x1000, 0x1000)])
        with pytest.raises(InvariantViolation):
            CellConfig(name="c", cpus=[0], mem=[])

    def test_comm_decl_bounds(self):
        with pytest.raises(InvariantViolation):
            CommDecl("p", 0x800, 1)  # not page-aligned
        with pytest.raises(InvariantViolation):
            CommDecl("p", 0x1000, 0)
        with pytest.raises(InvariantViolation):
            CommDecl("p", 0x1000, 0x10000)
        with pytest.raises(InvariantViolation):
            CommDecl("bad name", 0x1000, 1)

    def test_workload_path_rules(self):
        with pytest.raises(InvariantViolation):
            Workload(WorkloadKind.SCRIPT)
        with pytest.raises(InvariantViolation):
            Workload(WorkloadKind.IDLE, script_path="x")


def _enabled_tiny_hv(tiny):
    return Hypervisor(tiny, seed=1).enable(full_platform_config(tiny))


class TestValidateAgainst:
    def test_clean_config_has_no_violations(self, tiny):
        hv = _enabled_tiny_hv(tiny)
        cfg = CellConfig(name="c", cpus=[1],
                         mem=[MemRegion(0x1008_0000, 0x1000)], irqs=[33])
        assert validate_against(cfg, tiny, hv.ledger) == []

    def test_unknown_resources(self, tiny):
        hv = _enabled_tiny_hv(tiny)
        cfg = CellConfig(
            name="c", cpus=[7], mem=[MemRegion(0xDEAD_0000, 0x1000)],
            devices=[MmioDevice("nope", 0x9000_0000, 0x1000), PciDevice(0x99),
                     IoPortRange(0x1000, 0x10)],
            irqs=[999])
        violations = validate_against(cfg, tiny, hv.ledger)
        kinds = {v.kind for v in violations}
        assert kinds == {ViolationKind.NO_SUCH_RESOURCE}
        assert len(violations) == 6

    def test_permission_exceeded(self, tiny):
        # the tiny platform RAM band allows rw only
        hv = _enabled_tiny_hv(tiny)
        cfg = CellConfig(name="c", cpus=[1],
                         mem=[MemRegion(0x1008_0000, 0x1000,
                                        PermFlags.READ | PermFlags.EXECUTE)])
        violations = validate_against(cfg, tiny, hv.ledger)
        assert [v.kind for v in violations] == [ViolationKind.PERMISSION_EXCEEDED]

    def test_not_owned_by_root(self, tiny):
        hv = _enabled_tiny_hv(tiny)
        taken = CellConfig(name="first", cpus=[1],
                           mem=[MemRegion(0x1008_0000, 0x2000)], irqs=[33])
        first = hv.create_cell(taken)
        wanting = CellConfig(name="second", cpus=[1],
                             mem=[MemRegion(0x1008_1000, 0x1000)], irqs=[33])
        violations = validate_against(wanting, tiny, hv.ledger)
        assert {v.kind for v in violations} == {ViolationKind.NOT_OWNED_BY_ROOT}
        assert len(violations) == 3
        assert any("cell %d" % first in str(v) for v in violations)

    def test_partially_owned_range_flagged(self, tiny):
        hv = _enabled_tiny_hv(tiny)
        hv.create_cell(CellConfig(name="first", cpus=[1],
                                  mem=[MemRegion(0x1008_0000, 0x1000)]))
        straddling = CellConfig(name="second", cpus=[0],
                                mem=[MemRegion(0x1007_F000, 0x2000)])
        violations = validate_against(straddling, tiny, hv.ledger)
        assert [v.kind for v in violations] == [ViolationKind.NOT_OWNED_BY_ROOT]

    def test_violation_str_is_descriptive(self, tiny):
        hv = _enabled_tiny_hv(tiny)
        cfg = CellConfig(name="c", cpus=[9], mem=[MemRegion(0x1008_0000, 0x1000)])
        (violation,) = validate_against(cfg, tiny, hv.ledger)
        assert str(violation) == "NoSuchResource(cpu 9)"


MINIMAL = CellConfig(name="a", cpus=[0], mem=[MemRegion(0x1000, 0x1000)])


def _minimal_bytes():
    # independent byte-level oracle for the frozen layout
    out = struct.pack("<IHHHHHH32s", MAGIC, VERSION, 1, 1, 0, 0, 0, b"a")
    out += struct.pack("<I", 0)
    out += struct.pack("<QQI", 0x1000, 0x1000, int(PermFlags.READ | PermFlags.WRITE))
    out += struct.pack("<BH", 0, 0)
    return out


class TestCodec:
    def test_minimal_layout_is_frozen(self):
        assert emit_binary(MINIMAL) == _minimal_bytes()

    def test_minimal_layout_loads(self):
        assert load_binary(_minimal_bytes()) == MINIMAL

    def test_round_trip_full(self):
        cfg = parse_config(FULL_TEXT)
        blob = emit_binary(cfg)
        assert load_binary(blob) == cfg
        assert emit_binary(load_binary(blob)) == blob

    def test_bad_magic(self):
        blob = bytearray(_minimal_bytes())
        blob[0] ^= 0xFF
        with pytest.raises(BadMagic):
            load_binary(bytes(blob))

    def test_unsupported_version(self):
        blob = bytearray(_minimal_bytes())
        struct.pack_into("<H", blob, 4, 2)
        with pytest.raises(UnsupportedVersion):
            load_binary(bytes(blob))

    def test_truncation_detected_everywhere(self):
        blob = emit_binary(parse_config(FULL_TEXT))
        for cut in range(len(blob)):
            with pytest.raises(TruncatedRecord):
                load_binary(blob[:cut])

    def test_trailing_bytes_rejected(self):
        with pytest.raises(InvariantViolation):
            load_binary(_minimal_bytes() + b"\0")

    def test_nonzero_name_padding_rejected(self):
        blob = bytearray(_minimal_bytes())
        blob[16 + 31] = 0x41  # last byte of the name field
        with pytest.raises(InvariantViolation):
            load_binary(bytes(blob))

    def test_unknown_permission_bits_rejected(self):
        blob = bytearray(_minimal_bytes())
        flags_off = struct.calcsize("<IHHHHHH32s") + 4 + 16
        struct.pack_into("<I", blob, flags_off, 0x10)
        with pytest.raises(InvariantViolation):
            load_binary(bytes(blob))

    def test_unknown_device_kind_rejected(self):
        cfg = CellConfig(name="a", cpus=[0], mem=[MemRegion(0x1000, 0x1000)],
                         devices=[PciDevice(8)])
        blob = bytearray(emit_binary(cfg))
        dev_off = struct.calcsize("<IHHHHHH32s") + 4 + 20
        blob[dev_off] = 9
        with pytest.raises(InvariantViolation):
            load_binary(bytes(blob))

    def test_unknown_workload_code_rejected(self):
        blob = bytearray(_minimal_bytes())
        blob[-3] = 7
        with pytest.raises(InvariantViolation):
            load_binary(bytes(blob))

    def test_duplicate_cpu_in_stream_rejected(self):
        cfg = CellConfig(name="a", cpus=[0, 1], mem=[MemRegion(0x1000, 0x1000)])
        blob = bytearray(emit_binary(cfg))
        head = struct.calcsize("<IHHHHHH32s")
        blob[head:head + 4] = blob[head + 4:head + 8]
        with pytest.raises(InvariantViolation):
            load_binary(bytes(blob))

    def test_seeded_round_trips(self):
        rnd = random.Random(0xC0FFEE)
        for _ in range(300):
            cfg = random_config(rnd)
            blob = emit_binary(cfg)
            again = load_binary(blob)
            assert again == cfg
            assert emit_binary(again) == blob

    @given(st.data())
    def test_property_round_trip(self, data):
        name = data.draw(st.from_regex(r"[A-Za-z0-9_-]{1,31}", fullmatch=True))
        cpus = data.draw(st.sets(st.integers(0, 0xFFFFFFFF), min_size=1, max_size=4))
        starts = data.draw(st.sets(st.integers(0, 500), min_size=1, max_size=4))
        mem = [MemRegion(s * 0x10000, 0x1000, PermFlags(data.draw(st.integers(1, 15))))
               for s in sorted(starts)]
        irqs = data.draw(st.sets(st.integers(0, 0xFFFFFFFF), max_size=4))
        cfg = CellConfig(name=name, cpus=cpus, mem=mem, irqs=irqs)
        assert load_binary(emit_binary(cfg)) == cfg
