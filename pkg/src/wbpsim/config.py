"""Sectioned key=value experiment configuration.

Five sections — [system], [link], [tdd], [cost], [run] — hold every knob
that affects a run. Unknown keys are rejected with their line number, and
the fully resolved configuration (defaults included) is echoed into the
run output so an experiment record is always reproducible from its log.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field

from .costmodel import CostParams, DmaTiming
from .kernels import OfdmConfig, PolarCode
from .machine import MachineConfig
from .workload import LinkConfig, TddPattern


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_snr(text: str) -> float | None:
    low = text.strip().lower()
    if low in ("inf", "none", "noiseless"):
        return None
    return float(text)


# (section, key) -> (converter, default)
_SCHEMA: dict[tuple[str, str], tuple] = {
    ("system", "clusters"): (int, 1),
    ("system", "tiles_per_cluster"): (int, 4),
    ("system", "tile_mix"): (str, "L,L,S,S"),
    ("system", "tspm_bytes"): (int, 131072),
    ("system", "code_pool_bytes"): (int, 393216),
    ("system", "fifo_bytes"): (int, 65536),
    ("system", "load_indication_bytes"): (int, 16384),
    ("system", "compute_bytes"): (int, 1048576),
    ("system", "max_threads"): (int, 2),
    ("system", "clock_mhz"): (float, 500.0),
    ("link", "polar_n"): (int, 512),
    ("link", "polar_k"): (int, 256),
    ("link", "rate_match_e"): (int, 512),
    ("link", "c_init"): (int, 1),
    ("link", "subcarriers"): (int, 128),
    ("link", "cp_len"): (int, 32),
    ("link", "bp_iters"): (int, 30),
    ("link", "users_per_slot"): (int, 5),
    ("link", "snr_db"): (_parse_snr, None),
    ("tdd", "pattern"): (str, "DU"),
    ("tdd", "slot_cycles"): (int, 20000),
    ("cost", "anchors_file"): (str, ""),
    ("cost", "serial_fraction"): (float, 0.2),
    ("cost", "ref_lanes"): (int, 64),
    ("cost", "dma_setup_cycles"): (int, 20),
    ("cost", "dma_bytes_per_cycle"): (int, 16),
    ("cost", "csr_write_cycles"): (int, 4),
    ("cost", "thread_eval_cycles"): (int, 50),
    ("cost", "scan_visit_cycles"): (int, 10),
    ("cost", "sched_tick_cycles"): (int, 1000),
    ("run", "n_slots"): (int, 20),
    ("run", "seed"): (int, 1),
    ("run", "multithreading"): (_parse_bool, True),
    ("run", "lazy_deletion"): (_parse_bool, True),
    ("run", "strict"): (_parse_bool, True),
}

_SECTIONS = ("system", "link", "tdd", "cost", "run")


@dataclass
class RunSetup:
    """Everything required to execute one experiment."""

    machine: MachineConfig
    link: LinkConfig
    pattern: TddPattern
    n_slots: int
    seed: int
    multithreading: bool
    lazy_deletion: bool
    anchors_file: str
    cost_params: CostParams
    values: dict[tuple[str, str], object] = field(default_factory=dict)

    def config_id(self) -> str:
        return hashlib.sha256(render_config(self).encode()).hexdigest()[:12]


def _build_setup(values: dict[tuple[str, str], object]) -> RunSetup:
    def get(section, key):
        return values[(section, key)]

    def invariant(cond: bool, key: str, message: str) -> None:
        if not cond:
            raise ConfigError(f"{key}: {message}")

    clusters = get("system", "clusters")
    invariant(clusters >= 1, "clusters", "must be >= 1")
    tiles = get("system", "tiles_per_cluster")
    invariant(tiles >= 1, "tiles_per_cluster", "must be >= 1")
    mix = tuple(p.strip().upper() for p in str(get("system", "tile_mix")).split(",")
                if p.strip())
    invariant(len(mix) == tiles, "tile_mix",
              f"must list exactly {tiles} tile classes")
    invariant(all(c in ("L", "S") for c in mix), "tile_mix",
              "entries must be L or S")
    for key in ("tspm_bytes", "code_pool_bytes", "fifo_bytes",
                "load_indication_bytes", "compute_bytes"):
        invariant(get("system", key) > 0, key, "must be positive")
    invariant(get("system", "max_threads") >= 1, "max_threads", "must be >= 1")
    invariant(get("system", "clock_mhz") > 0, "clock_mhz", "must be positive")

    n = get("link", "polar_n")
    k = get("link", "polar_k")
    invariant(n >= 2 and n & (n - 1) == 0, "polar_n", "must be a power of two")
    invariant(0 < k <= n, "polar_k", "must be in 1..polar_n")
    try:
        polar = PolarCode.design(n, k)
        ofdm = OfdmConfig(n_subcarriers=get("link", "subcarriers"),
                          cp_len=get("link", "cp_len"))
        link = LinkConfig(polar=polar, rate_match_e=get("link", "rate_match_e"),
                          c_init=get("link", "c_init"), ofdm=ofdm,
                          bp_iters=get("link", "bp_iters"),
                          users_per_slot=get("link", "users_per_slot"),
                          snr_db=get("link", "snr_db"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        pattern = TddPattern.parse(get("tdd", "pattern"), get("tdd", "slot_cycles"))
    except ValueError as exc:
        raise ConfigError(f"pattern: {exc}") from None

    invariant(get("run", "n_slots") >= 1, "n_slots", "must be >= 1")
    for key in ("dma_setup_cycles", "dma_bytes_per_cycle", "csr_write_cycles",
                "thread_eval_cycles", "scan_visit_cycles", "sched_tick_cycles"):
        invariant(get("cost", key) > 0, key, "must be positive")
    sf = get("cost", "serial_fraction")
    invariant(0.0 <= sf <= 1.0, "serial_fraction", "must lie in [0, 1]")
    invariant(get("cost", "ref_lanes") >= 1, "ref_lanes", "must be >= 1")

    machine = MachineConfig(
        clusters=clusters,
        tile_mix=mix,
        tspm_bytes=get("system", "tspm_bytes"),
        section_bytes={
            "TASK_CODE_POOL": get("system", "code_pool_bytes"),
            "FIFO_LISTS": get("system", "fifo_bytes"),
            "LOAD_INDICATION": get("system", "load_indication_bytes"),
            "COMPUTE_DATA": get("system", "compute_bytes"),
        },
        dma=DmaTiming(setup_cycles=get("cost", "dma_setup_cycles"),
                      bytes_per_cycle=get("cost", "dma_bytes_per_cycle"),
                      csr_write_cycles=get("cost", "csr_write_cycles")),
        max_threads=get("system", "max_threads"),
        clock_hz=get("system", "clock_mhz") * 1e6,
        thread_eval_cycles=get("cost", "thread_eval_cycles"),
        scan_visit_cycles=get("cost", "scan_visit_cycles"),
        sched_tick_cycles=get("cost", "sched_tick_cycles"),
        strict=get("run", "strict"),
    )
    cost_params = CostParams(serial_fraction=sf, ref_lanes=get("cost", "ref_lanes"))
    return RunSetup(
        machine=machine, link=link, pattern=pattern,
        n_slots=get("run", "n_slots"), seed=get("run", "seed"),
        multithreading=get("run", "multithreading"),
        lazy_deletion=get("run", "lazy_deletion"),
        anchors_file=get("cost", "anchors_file"),
        cost_params=cost_params, values=values,
    )


def parse_config(text: str) -> RunSetup:
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, _, value = line.partition("=")
        key = key.strip().lower()
        if (section, key) not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        converter, _ = _SCHEMA[(section, key)]
        try:
            values[(section, key)] = converter(value.strip())
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {key}: {exc}") from None
    try:
        return _build_setup(values)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunSetup:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def render_config(setup: RunSetup) -> str:
    """Render the fully resolved configuration, defaults included."""
    lines = []
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        for (sec, key), _ in sorted(_SCHEMA.items()):
            if sec != section:
                continue
            value = setup.values[(sec, key)]
            if value is None:
                value = "inf" if key == "snr_db" else ""
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def apply_overrides(setup: RunSetup, *, seed: int | None = None,
                    multithreading: bool | None = None,
                    lazy_deletion: bool | None = None,
                    strict: bool | None = None) -> RunSetup:
    values = dict(setup.values)
    if seed is not None:
        values[("run", "seed")] = seed
    if multithreading is not None:
        values[("run", "multithreading")] = multithreading
    if lazy_deletion is not None:
        values[("run", "lazy_deletion")] = lazy_deletion
    if strict is not None:
        values[("run", "strict")] = strict
    return _build_setup(values)


def with_system(setup: RunSetup, clusters: int, tile_mix: tuple[str, ...]) -> RunSetup:
    """Derived setup with a different cluster count and per-cluster mix."""
    values = dict(setup.values)
    values[("system", "clusters")] = clusters
    values[("system", "tiles_per_cluster")] = len(tile_mix)
    values[("system", "tile_mix")] = ",".join(tile_mix)
    return _build_setup(values)
