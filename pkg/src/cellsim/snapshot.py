"""Versioned binary session snapshots.

Persists a platform plus optional hypervisor state between CLI
invocations, with the same little-endian framing style as the config
codec. The load path rebuilds the platform through its validator and
audits the restored ledger, so a corrupt snapshot cannot produce an
inconsistent session.
"""

from __future__ import annotations

import struct
from typing import Optional

from .cellconfig import _Reader, emit_binary, load_binary
from .errors import BadMagic, InvariantViolation, UnsupportedVersion
from .hvcore import Cell, CellState, Hypervisor, HvState, OwnershipLedger, TrapEvent, TrapKind
from .machine import (
    BusModel,
    Cpu,
    DistParams,
    GicVersion,
    IoPortRange,
    IrqLine,
    MachinePlatform,
    MemRegion,
    MmioDevice,
    PciDevice,
    PermFlags,
    PlatformSpec,
    build_platform,
)

MAGIC = 0x4A485353
VERSION = 1

_HEADER = struct.Struct("<IH")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_BUS = struct.Struct("<8d2B")
_RESOURCE = struct.Struct("<BQQQ")
_SEGMENT = struct.Struct("<QQI")
_EVENT = struct.Struct("<QIB")

_RES_CPU, _RES_MEM, _RES_MMIO, _RES_PCI, _RES_IOPORT, _RES_IRQ = range(6)
_STATE_CODES = {state: code for code, state in enumerate(CellState)}
_STATES_BY_CODE = {code: state for state, code in _STATE_CODES.items()}
_TRAP_CODES = {kind: code for code, kind in enumerate(TrapKind)}
_TRAPS_BY_CODE = {code: kind for kind, code in _TRAP_CODES.items()}
_GIC_CODES = {GicVersion.V2: 2, GicVersion.V3: 3}
_GIC_BY_CODE = {code: gic for gic, code in _GIC_CODES.items()}


def _put_str(out: bytearray, text: str) -> None:
    raw = text.encode("utf-8")
    out += _U16.pack(len(raw))
    out += raw


def _get_str(reader: _Reader) -> str:
    (length,) = reader.take(_U16)
    return reader.take_raw(length).decode("utf-8")


def _put_bytes(out: bytearray, raw: bytes) -> None:
    out += _U32.pack(len(raw))
    out += raw


def _get_bytes(reader: _Reader) -> bytes:
    (length,) = reader.take(_U32)
    return reader.take_raw(length)


def _put_resource(out: bytearray, resource) -> None:
    if isinstance(resource, Cpu):
        out += _RESOURCE.pack(_RES_CPU, resource.index, 0, 0)
        _put_str(out, "")
    elif isinstance(resource, MemRegion):
        out += _RESOURCE.pack(_RES_MEM, resource.base, resource.size,
                              int(resource.flags))
        _put_str(out, "")
    elif isinstance(resource, MmioDevice):
        out += _RESOURCE.pack(_RES_MMIO, resource.base, resource.size, 0)
        _put_str(out, resource.name)
    elif isinstance(resource, PciDevice):
        out += _RESOURCE.pack(_RES_PCI, resource.bdf, 0, 0)
        _put_str(out, "")
    elif isinstance(resource, IoPortRange):
        out += _RESOURCE.pack(_RES_IOPORT, resource.base, resource.length, 0)
        _put_str(out, "")
    elif isinstance(resource, IrqLine):
        out += _RESOURCE.pack(_RES_IRQ, resource.number, 0, 0)
        _put_str(out, "")
    else:
        raise InvariantViolation("cannot snapshot resource %r" % (resource,))


def _get_resource(reader: _Reader):
    kind, a, b, c = reader.take(_RESOURCE)
    name = _get_str(reader)
    if kind == _RES_CPU:
        return Cpu(a)
    if kind == _RES_MEM:
        return MemRegion(a, b, PermFlags(c))
    if kind == _RES_MMIO:
        return MmioDevice(name, a, b)
    if kind == _RES_PCI:
        return PciDevice(a)
    if kind == _RES_IOPORT:
        return IoPortRange(a, b)
    if kind == _RES_IRQ:
        return IrqLine(a)
    raise InvariantViolation("unknown resource kind %d in snapshot" % kind)


def save_session(platform: MachinePlatform, hv: Optional[Hypervisor]) -> bytes:
    out = bytearray()
    out += _HEADER.pack(MAGIC, VERSION)

    _put_str(out, platform.name)
    out += _U8.pack(_GIC_CODES[platform.gic_version])
    out += _U8.pack(1 if platform.has_pci else 0)
    bus = platform.bus
    out += _BUS.pack(
        bus.base_latency_us, bus.hv_overhead.shift_us, bus.hv_overhead.log_mu,
        bus.hv_overhead.log_sigma, bus.contention.shift_us, bus.contention.log_mu,
        bus.contention.log_sigma, bus.contention_prob,
        1 if bus.quantize_enabled else 0, 1 if bus.phase_jitter_enabled else 0)
    out += _U32.pack(len(platform.resources))
    for resource in platform.resources:
        _put_resource(out, resource)

    if hv is None:
        out += _U8.pack(0)
        return bytes(out)
    out += _U8.pack(1)
    out += _U64.pack(hv.clock)
    out += _U64.pack(hv.seed)
    out += _U32.pack(len(hv.events))
    for event in hv.events:
        out += _EVENT.pack(event.time_ns, event.cell, _TRAP_CODES[event.kind])
        _put_str(out, event.detail)

    out += _U8.pack(1 if hv.enabled else 0)
    if not hv.enabled:
        return bytes(out)

    out += _U32.pack(hv._next_cell_id)
    out += _U32.pack(len(hv.cells))
    for cell_id in sorted(hv.cells):
        cell = hv.cells[cell_id]
        out += _U32.pack(cell_id)
        out += _U8.pack(_STATE_CODES[cell.state])
        out += _U64.pack(cell.dist_emulations)
        out += _U64.pack(cell.tick)
        _put_bytes(out, emit_binary(cell.config))
        out += _U32.pack(len(cell.memory_image))
        for addr in sorted(cell.memory_image):
            out += _U64.pack(addr)
            _put_bytes(out, cell.memory_image[addr])

    ledger = hv.ledger
    out += _U32.pack(len(ledger._units))
    for resource in sorted(ledger._units, key=repr):
        _put_resource(out, resource)
        out += _U32.pack(ledger._units[resource])
    out += _U32.pack(len(ledger._mem))
    for base in sorted(ledger._mem):
        _, segments = ledger._mem[base]
        out += _U64.pack(base)
        out += _U32.pack(len(segments))
        for lo, hi, owner in segments:
            out += _SEGMENT.pack(lo, hi, owner)
    return bytes(out)


def load_session(data: bytes) -> tuple[MachinePlatform, Optional[Hypervisor]]:
    reader = _Reader(data)
    magic, version = reader.take(_HEADER)
    if magic != MAGIC:
        raise BadMagic("snapshot magic 0x%08x, expected 0x%08x" % (magic, MAGIC))
    if version != VERSION:
        raise UnsupportedVersion("snapshot version %d, expected %d"
                                 % (version, VERSION))

    name = _get_str(reader)
    (gic_code,) = reader.take(_U8)
    gic = _GIC_BY_CODE.get(gic_code)
    if gic is None:
        raise InvariantViolation("unknown gic code %d" % gic_code)
    (has_pci,) = reader.take(_U8)
    (base_us, hv_shift, hv_mu, hv_sigma, c_shift, c_mu, c_sigma, prob,
     quantize, jitter) = reader.take(_BUS)
    bus = BusModel(
        base_latency_us=base_us,
        hv_overhead=DistParams(hv_shift, hv_mu, hv_sigma),
        contention=DistParams(c_shift, c_mu, c_sigma),
        contention_prob=prob,
        quantize_enabled=bool(quantize), phase_jitter_enabled=bool(jitter))
    (n_resources,) = reader.take(_U32)
    resources = [_get_resource(reader) for _ in range(n_resources)]
    platform = build_platform(PlatformSpec(
        name=name, resources=resources, gic_version=gic, bus=bus,
        has_pci=bool(has_pci)))

    (have_hv,) = reader.take(_U8)
    if not have_hv:
        _expect_end(reader)
        return platform, None

    clock = reader.take(_U64)[0]
    seed = reader.take(_U64)[0]
    events = []
    (n_events,) = reader.take(_U32)
    for _ in range(n_events):
        time_ns, cell, kind_code = reader.take(_EVENT)
        kind = _TRAPS_BY_CODE.get(kind_code)
        if kind is None:
            raise InvariantViolation("unknown trap code %d" % kind_code)
        events.append(TrapEvent(time_ns, cell, kind, _get_str(reader)))

    hv = Hypervisor(platform, seed=seed)
    hv.clock = clock
    hv.events = events
    (enabled,) = reader.take(_U8)
    if not enabled:
        _expect_end(reader)
        return platform, hv

    hv.state = HvState.ENABLED
    (hv._next_cell_id,) = reader.take(_U32)
    (n_cells,) = reader.take(_U32)
    for _ in range(n_cells):
        (cell_id,) = reader.take(_U32)
        (state_code,) = reader.take(_U8)
        state = _STATES_BY_CODE.get(state_code)
        if state is None:
            raise InvariantViolation("unknown cell state %d" % state_code)
        (dist_emu,) = reader.take(_U64)
        (tick,) = reader.take(_U64)
        config = load_binary(_get_bytes(reader))
        cell = Cell(cell_id, config, state)
        cell.dist_emulations = dist_emu
        cell.tick = tick
        (n_chunks,) = reader.take(_U32)
        for _ in range(n_chunks):
            (addr,) = reader.take(_U64)
            cell.memory_image[addr] = _get_bytes(reader)
        hv.cells[cell_id] = cell

    ledger = OwnershipLedger(platform)
    (n_units,) = reader.take(_U32)
    units: dict = {}
    for _ in range(n_units):
        resource = _get_resource(reader)
        (owner,) = reader.take(_U32)
        units[resource] = owner
    if set(units) != set(ledger._units):
        raise InvariantViolation("snapshot unit resources diverge from platform")
    ledger._units = units
    (n_regions,) = reader.take(_U32)
    for _ in range(n_regions):
        (base,) = reader.take(_U64)
        if base not in ledger._mem:
            raise InvariantViolation("snapshot region 0x%x not in platform" % base)
        region, _ = ledger._mem[base]
        (n_segments,) = reader.take(_U32)
        segments = []
        for _ in range(n_segments):
            lo, hi, owner = reader.take(_SEGMENT)
            segments.append([lo, hi, owner])
        ledger._mem[base] = (region, segments)
    hv.ledger = ledger
    _expect_end(reader)
    hv.audit()
    return platform, hv


def _expect_end(reader: _Reader) -> None:
    if reader.offset != len(reader.data):
        raise InvariantViolation(
            "%d trailing bytes in snapshot" % (len(reader.data) - reader.offset))
