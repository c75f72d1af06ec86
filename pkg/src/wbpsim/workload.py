"""Link-chain workload: transmit/receive dags, TDD arrivals, experiments.

The transmit chain per user is encode -> rate-match -> scramble -> QPSK ->
OFDM, merged into one slot-assembly sink. The receive chain is a single
worst-case dag: OFDM demod -> channel estimation -> equalization -> soft
demod -> descramble -> rate recovery -> blind detection, fanning out to the
maximum of 20 channel decoders whose unused tail is dismissed at runtime
once the detected user count is known.

Thread payloads are synthesized up front from a seeded generator (uplink
slots reuse the preceding downlink slot's info bits, passed through the
modeled channel), so simulation order cannot perturb the data.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .costmodel import CostModel
from .dag import Dag, TaskSpec, Token
from .machine import Machine, MachineConfig
from .scheduler import BodyResult, System, ThreadDescriptor

MAX_USERS = kernels.MAX_USERS_PER_SLOT
PILOT_C_INIT = 7

BYTES_PER_BIT = 1
BYTES_PER_LLR = 4
BYTES_PER_SAMPLE = 8
BUNDLE_OVERHEAD = 16

CODE_BYTES = {
    "fft": 4096,
    "bp": 8192,
    "polar_encode": 2048,
    "rate_match": 1024,
    "rate_recover": 1024,
    "scramble": 1024,
    "descramble": 1024,
    "qpsk_mod": 1024,
    "qpsk_demod": 2048,
    "ls_estimate": 2048,
    "zf_equalize": 2048,
    "blind_detect": 1024,
    "assemble": 1024,
}


@dataclass(frozen=True)
class LinkConfig:
    polar: kernels.PolarCode
    rate_match_e: int
    c_init: int = 1
    ofdm: kernels.OfdmConfig = field(default_factory=kernels.OfdmConfig)
    bp_iters: int = 30
    users_per_slot: int = 5
    snr_db: float | None = None  # None means a noiseless channel

    def __post_init__(self):
        if not 0 <= self.users_per_slot <= MAX_USERS:
            raise ValueError(f"users_per_slot must be in 0..{MAX_USERS}")
        if self.rate_match_e < 2 or self.rate_match_e % 2:
            raise ValueError("rate_match_e must be even and positive")
        if (self.rate_match_e // 2) % self.ofdm.n_subcarriers:
            raise ValueError("rate_match_e/2 must fill whole OFDM symbols")

    @property
    def data_symbols_per_user(self) -> int:
        return self.rate_match_e // 2 // self.ofdm.n_subcarriers

    @property
    def symbols_per_user(self) -> int:
        return self.data_symbols_per_user + 1  # leading pilot symbol

    def signature(self) -> list:
        snr = "inf" if self.snr_db is None else self.snr_db
        return [self.polar.N, self.polar.K, self.rate_match_e, self.c_init,
                self.ofdm.n_subcarriers, self.ofdm.cp_len, self.bp_iters,
                self.users_per_slot, snr]


@dataclass(frozen=True)
class TddPattern:
    slots: tuple[str, ...] = ("D", "U")
    slot_duration_cycles: int = 20000

    def __post_init__(self):
        if not self.slots or any(s not in ("D", "U") for s in self.slots):
            raise ValueError("pattern must be a non-empty string of D/U slots")
        if self.slot_duration_cycles <= 0:
            raise ValueError("slot duration must be positive")

    @classmethod
    def parse(cls, text: str, slot_duration_cycles: int) -> "TddPattern":
        return cls(tuple(text.upper()), slot_duration_cycles)


@dataclass(frozen=True)
class RxBundle:
    """Per-user payload plus slot-level context flowing down the receive chain."""

    per_user: tuple
    user_count: int
    noise_var: float


def payload_bytes(payload) -> int:
    """Modeled scratchpad footprint of a token payload."""
    if isinstance(payload, np.ndarray):
        if payload.dtype == np.complex128:
            return max(1, BYTES_PER_SAMPLE * payload.size)
        if payload.dtype == np.float64:
            return max(1, BYTES_PER_LLR * payload.size)
        return max(1, BYTES_PER_BIT * payload.size)
    if isinstance(payload, RxBundle):
        return BUNDLE_OVERHEAD + sum(payload_bytes(p) for p in payload.per_user)
    if isinstance(payload, (tuple, list)):
        return BUNDLE_OVERHEAD + sum(payload_bytes(p) for p in payload)
    return 4  # scalar


def make_token(payload) -> Token:
    return Token(payload=payload, byte_size=payload_bytes(payload))


def pilot_symbol_freq(link: LinkConfig) -> np.ndarray:
    bits = kernels.gold_sequence(PILOT_C_INIT, 2 * link.ofdm.n_subcarriers)
    return kernels.qpsk_mod(bits)


def user_c_init(link: LinkConfig, user: int) -> int:
    return (link.c_init + user) % (2**31)


# ---------------------------------------------------------------------------
# functional reference chain (also used to synthesize receive-side inputs)


def tx_user_symbols(link: LinkConfig, user: int, bits: np.ndarray) -> tuple:
    """Transmit one user's frame; returns the per-symbol sample arrays."""
    coded = kernels.polar_encode(bits, link.polar)
    matched = kernels.rate_match_rv0(coded, link.rate_match_e)
    scrambled = kernels.scramble(matched, user_c_init(link, user))
    syms = kernels.qpsk_mod(scrambled)
    blocks = syms.reshape(link.data_symbols_per_user, link.ofdm.n_subcarriers)
    out = [kernels.ofdm_modulate(pilot_symbol_freq(link), link.ofdm)]
    out.extend(kernels.ofdm_modulate(block, link.ofdm) for block in blocks)
    return tuple(out)


def tx_slot_samples(link: LinkConfig, bits: np.ndarray) -> np.ndarray:
    """Expected slot-assembly output: all users' samples concatenated."""
    parts = []
    for user in range(bits.shape[0]):
        parts.extend(tx_user_symbols(link, user, bits[user]))
    if not parts:
        return np.zeros(0, dtype=np.complex128)
    return np.concatenate(parts)


def rx_slot_input(link: LinkConfig, bits: np.ndarray,
                  rng: np.random.Generator) -> RxBundle:
    """Channel output for a slot carrying ``bits`` (one row per user)."""
    users = bits.shape[0]
    frames = [tx_user_symbols(link, u, bits[u]) for u in range(users)]
    flat = np.concatenate([s for frame in frames for s in frame]) if users \
        else np.zeros(0, dtype=np.complex128)
    received = kernels.awgn_channel(flat, math.inf if link.snr_db is None
                                    else link.snr_db, rng)
    if link.snr_db is None:
        noise_var = 1.0
    else:
        power = float(np.mean(np.abs(flat) ** 2)) if flat.size else 1.0
        noise_var = max(power / (10.0 ** (link.snr_db / 10.0)), 1e-12)
    sym_len = link.ofdm.symbol_len
    per_user = []
    cursor = 0
    for _ in range(users):
        syms = []
        for _ in range(link.symbols_per_user):
            syms.append(received[cursor:cursor + sym_len])
            cursor += sym_len
        per_user.append(tuple(syms))
    return RxBundle(per_user=tuple(per_user), user_count=users,
                    noise_var=noise_var)


# ---------------------------------------------------------------------------
# dag construction


def _task(dag: Dag, task_id: str, kernel: str, attribute: str,
          link: LinkConfig, **params) -> str:
    params["cfg"] = link.signature()
    return dag.add_task(TaskSpec(task_id=task_id, kernel=kernel,
                                 attribute=attribute,
                                 code_bytes=CODE_BYTES[kernel], params=params))


def build_tx_dag(link: LinkConfig) -> Dag:
    if link.users_per_slot < 1:
        raise ValueError("transmit dag needs at least one user per slot")
    dag = Dag()
    _task(dag, "tx_sink", "assemble", "ANY", link, role="tx_assemble")
    for user in range(link.users_per_slot):
        enc = _task(dag, f"enc_u{user:02d}", "polar_encode", "SMALL", link,
                    role="tx_encode", user=user)
        rm = _task(dag, f"rm_u{user:02d}", "rate_match", "SMALL", link,
                   role="tx_rate_match", user=user)
        scr = _task(dag, f"scr_u{user:02d}", "scramble", "SMALL", link,
                    role="tx_scramble", user=user)
        mod = _task(dag, f"mod_u{user:02d}", "qpsk_mod", "SMALL", link,
                    role="tx_qpsk", user=user)
        ofdm = _task(dag, f"ofdm_u{user:02d}", "fft", "LARGE", link,
                     role="tx_ofdm", user=user)
        dag.add_edge("EXTERNAL", enc)
        dag.add_edge(enc, rm)
        dag.add_edge(rm, scr)
        dag.add_edge(scr, mod)
        dag.add_edge(mod, ofdm)
        dag.add_edge(ofdm, "tx_sink")
    return dag.freeze()


def build_rx_dag(link: LinkConfig) -> Dag:
    dag = Dag()
    ofdm = _task(dag, "rx_ofdm", "fft", "LARGE", link, role="rx_ofdm")
    ls = _task(dag, "rx_ls", "ls_estimate", "ANY", link, role="rx_ls")
    zf = _task(dag, "rx_zf", "zf_equalize", "ANY", link, role="rx_zf")
    demod = _task(dag, "rx_demod", "qpsk_demod", "SMALL", link, role="rx_demod")
    descr = _task(dag, "rx_descr", "descramble", "SMALL", link,
                  role="rx_descramble")
    recover = _task(dag, "rx_recover", "rate_recover", "SMALL", link,
                    role="rx_rate_recover")
    blind = _task(dag, "rx_blind", "blind_detect", "ANY", link, role="rx_blind")
    sink = _task(dag, "rx_sink", "assemble", "ANY", link, role="rx_assemble")
    dag.add_edge("EXTERNAL", ofdm)
    for src, dst in ((ofdm, ls), (ls, zf), (zf, demod), (demod, descr),
                     (descr, recover), (recover, blind)):
        dag.add_edge(src, dst)
    decoders = []
    for user in range(MAX_USERS):
        dec = _task(dag, f"dec_u{user:02d}", "bp", "LARGE", link,
                    role="rx_decode", user=user)
        dag.add_edge(blind, dec)
        dag.add_edge(dec, sink)
        decoders.append(dec)
    dag.add_dismissal(blind, decoders)
    return dag.freeze()


# ---------------------------------------------------------------------------
# task bodies


def make_link_body(link: LinkConfig):
    """Returns the body function executing one task's kernel work."""
    n_sub = link.ofdm.n_subcarriers
    pilot_freq = pilot_symbol_freq(link)

    def body(spec: TaskSpec, payloads: list, thread: ThreadDescriptor) -> BodyResult:
        role = spec.params["role"]
        if role == "tx_encode":
            coded = kernels.polar_encode(payloads[0], link.polar)
            return BodyResult([make_token(coded)],
                              [("polar_encode", link.polar.N, 1)])
        if role == "tx_rate_match":
            out = kernels.rate_match_rv0(payloads[0], link.rate_match_e)
            return BodyResult([make_token(out)],
                              [("rate_match", link.rate_match_e, 1)])
        if role == "tx_scramble":
            out = kernels.scramble(payloads[0],
                                   user_c_init(link, spec.params["user"]))
            return BodyResult([make_token(out)],
                              [("scramble", link.rate_match_e, 1)])
        if role == "tx_qpsk":
            out = kernels.qpsk_mod(payloads[0])
            return BodyResult([make_token(out)],
                              [("qpsk_mod", link.rate_match_e, 1)])
        if role == "tx_ofdm":
            syms = payloads[0].reshape(link.data_symbols_per_user, n_sub)
            parts = [kernels.ofdm_modulate(pilot_freq, link.ofdm)]
            parts.extend(kernels.ofdm_modulate(block, link.ofdm)
                         for block in syms)
            out = np.concatenate(parts)
            return BodyResult([make_token(out)],
                              [("fft", n_sub, link.symbols_per_user)])
        if role == "tx_assemble":
            slot = np.concatenate(payloads) if payloads else \
                np.zeros(0, dtype=np.complex128)
            return BodyResult([], [("assemble", max(1, slot.size), 1)],
                              thread_output=make_token(slot))
        if role == "rx_ofdm":
            bundle: RxBundle = payloads[0]
            per_user = tuple(
                tuple(kernels.ofdm_demodulate(sym, link.ofdm) for sym in syms)
                for syms in bundle.per_user)
            count = sum(len(s) for s in bundle.per_user)
            return BodyResult(
                [make_token(dataclasses.replace(bundle, per_user=per_user))],
                [("fft", n_sub, count)])
        if role == "rx_ls":
            bundle = payloads[0]
            per_user = tuple(
                (kernels.ls_estimate(freqs[0], pilot_freq), tuple(freqs[1:]))
                for freqs in bundle.per_user)
            return BodyResult(
                [make_token(dataclasses.replace(bundle, per_user=per_user))],
                [("ls_estimate", n_sub, bundle.user_count)])
        if role == "rx_zf":
            bundle = payloads[0]
            per_user = []
            for channel, data in bundle.per_user:
                per_user.append(tuple(kernels.zf_equalize(sym, channel)[0]
                                      for sym in data))
            return BodyResult(
                [make_token(dataclasses.replace(bundle,
                                                per_user=tuple(per_user)))],
                [("zf_equalize", n_sub,
                  bundle.user_count * link.data_symbols_per_user)])
        if role == "rx_demod":
            bundle = payloads[0]
            per_user = tuple(
                kernels.qpsk_soft_demod(np.concatenate(syms), bundle.noise_var)
                for syms in bundle.per_user)
            return BodyResult(
                [make_token(dataclasses.replace(bundle, per_user=per_user))],
                [("qpsk_demod", link.rate_match_e, bundle.user_count)])
        if role == "rx_descramble":
            bundle = payloads[0]
            per_user = tuple(
                kernels.descramble_llr(llr, user_c_init(link, user))
                for user, llr in enumerate(bundle.per_user))
            return BodyResult(
                [make_token(dataclasses.replace(bundle, per_user=per_user))],
                [("descramble", link.rate_match_e, bundle.user_count)])
        if role == "rx_rate_recover":
            bundle = payloads[0]
            per_user = tuple(kernels.rate_recover_rv0(llr, link.polar.N)
                             for llr in bundle.per_user)
            return BodyResult(
                [make_token(dataclasses.replace(bundle, per_user=per_user))],
                [("rate_recover", link.rate_match_e, bundle.user_count)])
        if role == "rx_blind":
            bundle = payloads[0]
            detected = kernels.blind_detect(bundle.user_count)
            outputs: list[Token | None] = []
            for user in range(MAX_USERS):
                if user < detected:
                    outputs.append(make_token(bundle.per_user[user]))
                else:
                    outputs.append(None)
            return BodyResult(outputs, [("blind_detect", MAX_USERS, 1)],
                              scalar_return=detected)
        if role == "rx_decode":
            bits = kernels.bp_decode(payloads[0], link.polar, link.bp_iters)
            return BodyResult([make_token(bits)], [("bp", link.polar.N, 1)])
        if role == "rx_assemble":
            decoded = tuple(payloads)
            size = max(1, sum(p.size for p in decoded))
            return BodyResult([], [("assemble", size, 1)],
                              thread_output=make_token(decoded))
        raise ValueError(f"unknown task role {role!r}")

    return body


# ---------------------------------------------------------------------------
# thread spawning


def _slot_rng(seed: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(slot,)))


def spawn_threads(pattern: TddPattern, n_slots: int, link: LinkConfig,
                  seed: int, tx_dag: Dag | None, rx_dag: Dag) -> list[ThreadDescriptor]:
    """One thread per slot: downlink slots transmit, uplink slots receive.

    An uplink slot reuses the info bits of the closest preceding downlink
    slot (its paired transmitter) when one exists; the receive payload is
    those frames passed through the modeled channel.
    """
    if n_slots < 1:
        raise ValueError("need at least one slot")
    threads = []
    last_downlink_bits: np.ndarray | None = None
    for slot in range(n_slots):
        kind = pattern.slots[slot % len(pattern.slots)]
        rng = _slot_rng(seed, slot)
        arrival = slot * pattern.slot_duration_cycles
        if kind == "D":
            if tx_dag is None:
                raise ValueError("pattern has downlink slots but no transmit dag")
            bits = rng.integers(0, 2, size=(link.users_per_slot, link.polar.K),
                                dtype=np.int8)
            last_downlink_bits = bits
            inputs = [make_token(bits[u]) for u in range(link.users_per_slot)]
            meta = {"kind": "tx", "slot": slot, "truth_bits": bits,
                    "expected": tx_slot_samples(link, bits)}
        else:
            if last_downlink_bits is not None:
                bits = last_downlink_bits
            else:
                bits = rng.integers(0, 2, size=(link.users_per_slot, link.polar.K),
                                    dtype=np.int8)
            bundle = rx_slot_input(link, bits, rng)
            inputs = [make_token(bundle)]
            meta = {"kind": "rx", "slot": slot, "truth_bits": bits}
        threads.append(ThreadDescriptor(
            tid=slot, dag=tx_dag if kind == "D" else rx_dag, inputs=inputs,
            arrival_time=arrival, meta=meta))
    return threads


# ---------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class ThroughputReport:
    info_bits: int
    simulated_cycles: int
    clock_hz: float
    throughput_mbps: float
    tile_utilization: tuple[float, ...]
    metrics: dict[str, int]
    digest: str
    fidelity_failures: int
    threads_completed: int
    decisions: tuple


def throughput_mbps(info_bits: int, simulated_cycles: int, clock_hz: float) -> float:
    if simulated_cycles <= 0:
        raise ValueError("simulated cycle count must be positive")
    return info_bits * (clock_hz / simulated_cycles) / 1e6


def _verify_thread(thread: ThreadDescriptor, outputs: list[Token],
                   link: LinkConfig) -> int:
    """Returns the number of delivered payloads that mismatch ground truth."""
    failures = 0
    if thread.meta["kind"] == "tx":
        slot = outputs[0].payload if outputs else None
        if slot is None or not np.array_equal(slot, thread.meta["expected"]):
            failures += 1
    else:
        decoded = outputs[0].payload if outputs else ()
        truth = thread.meta["truth_bits"]
        if len(decoded) != min(link.users_per_slot, truth.shape[0]):
            failures += 1
        else:
            for user, bits in enumerate(decoded):
                if not np.array_equal(bits, truth[user]):
                    failures += 1
    return failures


def run_experiment(machine_cfg: MachineConfig, link: LinkConfig,
                   pattern: TddPattern, n_slots: int, seed: int, *,
                   multithreading: bool = True, lazy_deletion: bool = True,
                   strict_algorithm: bool = False,
                   cost_model: CostModel | None = None,
                   trace_path: str | None = None,
                   fault_hook=None) -> ThroughputReport:
    """Wire the machine, schedulers and workload together and run to completion."""
    effective = dataclasses.replace(
        machine_cfg, max_threads=machine_cfg.max_threads if multithreading else 1)
    machine = Machine(effective, trace_path=trace_path,
                      digest_salt=f"seed:{seed}")
    model = cost_model or CostModel.default()
    system = System(machine, model, make_link_body(link),
                    lazy_deletion=lazy_deletion,
                    strict_algorithm=strict_algorithm)
    if fault_hook is not None:
        fault_hook(machine)
    needs_tx = any(pattern.slots[s % len(pattern.slots)] == "D"
                   for s in range(n_slots))
    tx_dag = build_tx_dag(link) if needs_tx else None
    rx_dag = build_rx_dag(link)
    for thread in spawn_threads(pattern, n_slots, link, seed, tx_dag, rx_dag):
        system.submit(thread)
    system.run()

    failures = 0
    for tid, run in system.finished_runs.items():
        outputs = []
        for tokens in run.instance.outputs.values():
            outputs.extend(tokens)
        failures += _verify_thread(run.thread, outputs, link)
    simulated = max(1, system.last_completion)
    info_bits = sum(link.polar.K * link.users_per_slot
                    for _ in range(len(system.finished_runs)))
    utilization = tuple(
        min(1.0, tile.busy_cycles / simulated)
        for tile in sorted(machine.tiles.values(), key=lambda t: t.tile_id))
    metrics = system.metrics.snapshot()
    metrics["protocol_violations"] = machine.violations
    return ThroughputReport(
        info_bits=info_bits,
        simulated_cycles=simulated,
        clock_hz=effective.clock_hz,
        throughput_mbps=throughput_mbps(info_bits, simulated, effective.clock_hz),
        tile_utilization=utilization,
        metrics=metrics,
        digest=machine.engine.digest(),
        fidelity_failures=failures,
        threads_completed=len(system.finished_runs),
        decisions=tuple(system.main.decisions),
    )
