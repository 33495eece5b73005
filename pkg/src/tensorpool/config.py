"""Cluster geometry, address-to-bank mapping, and inter-tile latencies.

The cluster is a Pool of Groups, each Group holds SubGroups, each SubGroup
holds Tiles.  A Tile bundles 4 PEs and 32 x 2 KiB scratchpad banks; one Tile
per SubGroup additionally hosts a tensor engine.  All other modules read
their topology facts from :class:`ClusterConfig`.

Address map: 32-bit words interleave across the 32 banks of a tile, tiles
interleave at 128 B granularity (one full bank row), walking tiles in
(group, subgroup, tile) order.  This guarantees that any 64 B-aligned 64 B
span lands on 16 distinct banks of a single tile, which the burst
distributor relies on, while consecutive 64 B accesses rotate tiles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np


class ConfigError(ValueError):
    """Raised for malformed or inconsistent cluster configurations."""


class AddressFault(ValueError):
    """Raised for out-of-range or misaligned L1 addresses."""


@dataclass(frozen=True)
class BankCoordinate:
    """Position of one 32-bit word in the banked L1 scratchpad."""

    group: int
    subgroup: int
    tile: int
    bank: int
    word_offset: int


@dataclass(frozen=True)
class ClusterConfig:
    """Parametric description of the cluster topology and timing.

    Immutable after construction; safe to share across concurrent
    simulations.  Defaults describe the full-size cluster: 64 tiles,
    2048 banks, 4 MiB of L1, 16 tensor engines, 256 PEs.
    """

    tiles_per_subgroup: int = 4
    subgroups_per_group: int = 4
    groups: int = 4
    pes_per_tile: int = 4
    banks_per_tile: int = 32
    bank_bytes: int = 2048
    te_tiles_per_subgroup: int = 1
    te_rows: int = 32
    te_cols: int = 8
    te_pipeline: int = 3
    wide_port_bits: int = 512
    response_group_k: int = 4
    request_widen_j: int = 2
    rob_depth: int = 16
    z_fifo_depth: int = 32
    latency_local: int = 1
    latency_subgroup: int = 3
    latency_group: int = 5
    latency_remote_group: int = 9
    arbiter_subgroup_ports: int = 4
    arbiter_group_ports: int = 3
    l2_bw_bytes_per_cycle_per_subgroup: int = 64
    l2_latency: int = 20
    element_bytes: int = 2
    watchdog_idle_cycles: int = 10000
    kernels: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        counts = (
            "tiles_per_subgroup", "subgroups_per_group", "groups",
            "pes_per_tile", "banks_per_tile", "bank_bytes",
            "te_tiles_per_subgroup", "te_rows", "te_cols", "te_pipeline",
            "wide_port_bits", "response_group_k", "request_widen_j",
            "rob_depth", "z_fifo_depth", "latency_local", "latency_subgroup",
            "latency_group", "latency_remote_group", "arbiter_subgroup_ports",
            "arbiter_group_ports", "l2_bw_bytes_per_cycle_per_subgroup",
            "l2_latency", "element_bytes", "watchdog_idle_cycles",
        )
        for name in counts:
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not (self.latency_local <= self.latency_subgroup
                <= self.latency_group <= self.latency_remote_group):
            raise ConfigError("latencies must satisfy local <= subgroup <= group <= remote")
        if self.wide_port_bits != self.te_cols * (self.te_pipeline + 1) * 16:
            raise ConfigError(
                f"wide_port_bits ({self.wide_port_bits}) must equal "
                f"te_cols*(te_pipeline+1)*16 = {self.te_cols * (self.te_pipeline + 1) * 16}")
        if self.response_group_k not in (1, 2, 4, 8, 16):
            raise ConfigError(f"response_group_k must divide 16, got {self.response_group_k}")
        if self.request_widen_j not in (1, 2, 4):
            raise ConfigError(f"request_widen_j must be in {{1,2,4}}, got {self.request_widen_j}")
        if self.te_tiles_per_subgroup > self.tiles_per_subgroup:
            raise ConfigError("te_tiles_per_subgroup exceeds tiles_per_subgroup")
        if self.banks_per_tile * 4 % 64 != 0 or self.banks_per_tile < 16:
            raise ConfigError("banks_per_tile must cover at least one 64 B burst span")

    # --- derived geometry -------------------------------------------------

    @property
    def tiles_per_group(self) -> int:
        return self.tiles_per_subgroup * self.subgroups_per_group

    @property
    def total_tiles(self) -> int:
        return self.tiles_per_group * self.groups

    @property
    def total_subgroups(self) -> int:
        return self.subgroups_per_group * self.groups

    @property
    def total_banks(self) -> int:
        return self.total_tiles * self.banks_per_tile

    @property
    def banks_per_group(self) -> int:
        return self.tiles_per_group * self.banks_per_tile

    @property
    def l1_bytes(self) -> int:
        return self.total_banks * self.bank_bytes

    @property
    def tile_row_bytes(self) -> int:
        """Bytes of one tile per interleave period (all banks, one word each)."""
        return self.banks_per_tile * 4

    @property
    def interleave_period(self) -> int:
        """Byte span after which the tile walk wraps around."""
        return self.tile_row_bytes * self.total_tiles

    @property
    def total_pes(self) -> int:
        return self.total_tiles * self.pes_per_tile

    @property
    def total_tes(self) -> int:
        return self.total_subgroups * self.te_tiles_per_subgroup

    @property
    def te_macs_per_cycle(self) -> int:
        return self.te_rows * self.te_cols

    @property
    def wide_word_bytes(self) -> int:
        return self.wide_port_bits // 8

    @property
    def wide_word_beats(self) -> int:
        return self.wide_port_bits // 32

    def te_tile_ids(self) -> list[int]:
        """Global tile ids hosting a tensor engine (first tiles of each subgroup)."""
        ids = []
        for g in range(self.groups):
            for sg in range(self.subgroups_per_group):
                for t in range(self.te_tiles_per_subgroup):
                    ids.append((g * self.subgroups_per_group + sg) * self.tiles_per_subgroup + t)
        return ids

    # --- address mapping --------------------------------------------------

    def address_to_bank(self, addr: int) -> BankCoordinate:
        """Decode a byte address into its bank coordinate.

        Bijective over [0, l1_bytes) at word granularity; raises
        :class:`AddressFault` outside that range or for unaligned addresses.
        """
        if not 0 <= addr < self.l1_bytes:
            raise AddressFault(f"address {addr:#x} outside L1 range")
        if addr % 4 != 0:
            raise AddressFault(f"address {addr:#x} not word aligned")
        row = self.tile_row_bytes
        tile = (addr // row) % self.total_tiles
        bank = (addr % row) // 4
        word_offset = addr // (row * self.total_tiles)
        g, rem = divmod(tile, self.tiles_per_group)
        sg, t = divmod(rem, self.tiles_per_subgroup)
        return BankCoordinate(g, sg, t, bank, word_offset)

    def bank_to_address(self, coord: BankCoordinate) -> int:
        """Inverse of :meth:`address_to_bank`."""
        if not (0 <= coord.group < self.groups
                and 0 <= coord.subgroup < self.subgroups_per_group
                and 0 <= coord.tile < self.tiles_per_subgroup
                and 0 <= coord.bank < self.banks_per_tile
                and 0 <= coord.word_offset < self.bank_bytes // 4):
            raise AddressFault(f"coordinate {coord} out of range")
        tile = (coord.group * self.subgroups_per_group + coord.subgroup) \
            * self.tiles_per_subgroup + coord.tile
        return (coord.word_offset * self.total_tiles + tile) * self.tile_row_bytes \
            + coord.bank * 4

    def tile_of_addr(self, addr: int) -> int:
        return (addr // self.tile_row_bytes) % self.total_tiles

    def tiles_of_addrs(self, addrs: np.ndarray) -> np.ndarray:
        return (addrs // self.tile_row_bytes) % self.total_tiles

    def global_bank_of_addr(self, addr: int) -> int:
        """Flat bank index in [0, total_banks)."""
        return self.tile_of_addr(addr) * self.banks_per_tile \
            + (addr % self.tile_row_bytes) // 4

    # --- latency ----------------------------------------------------------

    def tile_group(self, tile: int) -> int:
        return tile // self.tiles_per_group

    def tile_subgroup(self, tile: int) -> int:
        return tile // self.tiles_per_subgroup

    def access_latency(self, src_tile: int, dst_tile: int) -> int:
        """One-way pipeline depth between two tiles."""
        if not (0 <= src_tile < self.total_tiles and 0 <= dst_tile < self.total_tiles):
            raise ConfigError(f"invalid tile ids ({src_tile}, {dst_tile})")
        if src_tile == dst_tile:
            return self.latency_local
        if src_tile // self.tiles_per_subgroup == dst_tile // self.tiles_per_subgroup:
            return self.latency_subgroup
        if src_tile // self.tiles_per_group == dst_tile // self.tiles_per_group:
            return self.latency_group
        return self.latency_remote_group

    def latency_matrix(self) -> np.ndarray:
        """total_tiles x total_tiles one-way latency table."""
        n = self.total_tiles
        t = np.arange(n)
        sg = t // self.tiles_per_subgroup
        g = t // self.tiles_per_group
        m = np.full((n, n), self.latency_remote_group, dtype=np.int64)
        m[g[:, None] == g[None, :]] = self.latency_group
        m[sg[:, None] == sg[None, :]] = self.latency_subgroup
        np.fill_diagonal(m, self.latency_local)
        return m

    # --- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "kernels"}
        if self.kernels:
            d["kernels"] = self.kernels
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterConfig":
        if not isinstance(data, dict):
            raise ConfigError("config document must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ClusterConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def dump_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


DEFAULT_CONFIG = ClusterConfig()
