"""Theoretical inference energy of the spiking image encoder.

A spiking layer costs ``E_AC * T * gamma * MACs`` where gamma is the firing
rate of its input spikes; the dense equivalent costs ``E_MAC * MACs``.
Real-valued readout projections are reported as a separate MAC line item
and excluded from synaptic operations.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoders import DualEncoder, ProbeLog
from .errors import ConfigError, ContractError, DomainError, SpikeAlignError
from .tensor import no_grad

E_MAC_PJ = 4.6
E_AC_PJ = 0.9
PJ_PER_MJ = 1e9

KINDS = ("fc", "conv", "attention-matmul", "readout")


def count_flops(kind: str, **dims: int) -> int:
    """MAC count for one item and one time step.

    fc: ``n_in, n_out[, tokens]``; conv: ``k, c_in, c_out, h_out, w_out``;
    attention-matmul: ``heads, tokens, head_dim[, products=2]`` covering
    ``Q K^T`` and ``A V``.
    """
    def need(*names):
        for name in names:
            if name not in dims:
                raise ConfigError(f"count_flops({kind}): missing {name}")
            if dims[name] <= 0:
                raise ConfigError(f"count_flops({kind}): {name} must be positive, got {dims[name]}")
        return [int(dims[name]) for name in names]

    if kind in ("fc", "readout"):
        n_in, n_out = need("n_in", "n_out")
        tokens = need("tokens")[0] if "tokens" in dims else 1
        return tokens * n_in * n_out
    if kind == "conv":
        k, c_in, c_out, h, w = need("k", "c_in", "c_out", "h_out", "w_out")
        return k * k * c_in * c_out * h * w
    if kind == "attention-matmul":
        heads, tokens, head_dim = need("heads", "tokens", "head_dim")
        products = need("products")[0] if "products" in dims else 2
        return products * heads * tokens * tokens * head_dim
    raise ConfigError(f"unknown layer kind {kind!r}")


def sops(flops: float, time_steps: int, gamma: float) -> float:
    if not 0 <= gamma <= 1:
        raise DomainError(f"firing rate must lie in [0, 1], got {gamma}")
    if time_steps < 1:
        raise ContractError(f"time steps must be >= 1, got {time_steps}")
    return time_steps * gamma * flops


def ecr(time_steps: int, gamma_bar: float) -> float:
    """Fraction of dense MAC energy saved: ``1 - E_AC * T * gamma / E_MAC``."""
    if time_steps < 1:
        raise ContractError(f"time steps must be >= 1, got {time_steps}")
    if not 0 <= gamma_bar <= 1:
        raise DomainError(f"mean firing rate must lie in [0, 1], got {gamma_bar}")
    return 1.0 - (E_AC_PJ * time_steps * gamma_bar) / E_MAC_PJ


@dataclass
class LayerCost:
    name: str
    kind: str
    flops: int
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.flops < 0:
            raise ConfigError(f"{self.name}: flops must be >= 0")
        if not 0 <= self.gamma <= 1:
            raise DomainError(f"{self.name}: firing rate {self.gamma} outside [0, 1]")


@dataclass
class EnergyRow:
    layer: str
    kind: str
    flops: int
    gamma: float
    sops: float
    energy_pJ: float
    spiking: bool = True


@dataclass
class EnergyReport:
    time_steps: int
    items: int
    rows: list[EnergyRow] = field(default_factory=list)
    gamma_bar: float = 0.0

    @property
    def total_sops(self) -> float:
        return sum(r.sops for r in self.rows if r.spiking)

    @property
    def snn_energy_pJ(self) -> float:
        return sum(r.energy_pJ for r in self.rows if r.spiking)

    @property
    def readout_energy_pJ(self) -> float:
        return sum(r.energy_pJ for r in self.rows if not r.spiking)

    @property
    def energy_mJ(self) -> float:
        return self.snn_energy_pJ / PJ_PER_MJ

    @property
    def dense_energy_pJ(self) -> float:
        return E_MAC_PJ * sum(r.flops for r in self.rows if r.spiking)

    @property
    def ecr(self) -> float:
        return ecr(self.time_steps, self.gamma_bar)

    def summary(self) -> dict:
        return {"layer": "TOTAL", "items": self.items, "time_steps": self.time_steps,
                "sops": self.total_sops, "energy_pJ": self.snn_energy_pJ,
                "energy_mJ_per_item": self.energy_mJ, "readout_energy_pJ": self.readout_energy_pJ,
                "gamma_bar": self.gamma_bar, "ecr": self.ecr}

    def to_records(self) -> list[dict]:
        return [asdict(r) for r in self.rows] + [self.summary()]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def to_table(self) -> str:
        lines = [f"{'layer':<28} {'kind':<17} {'MACs':>12} {'gamma':>8} {'SOPs':>14} {'energy pJ':>14}"]
        for r in self.rows:
            gamma = f"{r.gamma:8.4f}" if r.spiking else f"{'-':>8}"
            sop = f"{r.sops:14.1f}" if r.spiking else f"{'-':>14}"
            lines.append(f"{r.layer:<28} {r.kind:<17} {r.flops:>12d} {gamma} {sop} {r.energy_pJ:14.1f}")
        lines.append(f"mean firing rate  {100 * self.gamma_bar:.2f}%")
        lines.append(f"energy per item   {self.energy_mJ:.6g} mJ (+ readout {self.readout_energy_pJ / PJ_PER_MJ:.6g} mJ)")
        lines.append(f"energy reduction  {100 * self.ecr:.2f}%")
        return "\n".join(lines)


def report_from_costs(costs: list[LayerCost], time_steps: int, gamma_bar: float | None = None,
                      items: int = 1) -> EnergyReport:
    report = EnergyReport(time_steps, items)
    for c in costs:
        if c.kind == "readout":
            report.rows.append(EnergyRow(c.name, c.kind, c.flops, 0.0, 0.0, E_MAC_PJ * c.flops, False))
        else:
            s = sops(c.flops, time_steps, c.gamma)
            report.rows.append(EnergyRow(c.name, c.kind, c.flops, c.gamma, s, E_AC_PJ * s))
    spiking = [c for c in costs if c.kind != "readout"]
    if gamma_bar is None:
        gamma_bar = float(np.mean([c.gamma for c in spiking])) if spiking else 0.0
    report.gamma_bar = gamma_bar
    return report


def report_from_probes(probes: ProbeLog, time_steps: int, per_layer_mean: bool = False) -> EnergyReport:
    """Per-item energy from recorded firing statistics.

    gamma_bar is total input spikes over total input spike slots across all
    spiking layers, or the unweighted layer mean with ``per_layer_mean``.
    """
    if not probes.layers:
        raise SpikeAlignError("energy profile: no firing-rate probes were recorded")
    costs, spikes, slots = [], 0.0, 0
    items = max(p.items for p in probes.layers.values())
    for p in probes.layers.values():
        if p.spiking:
            if p.slots == 0:
                raise SpikeAlignError(f"energy profile: probe {p.name} saw no inputs")
            spikes += p.spikes
            slots += p.slots
        costs.append(LayerCost(p.name, p.kind, p.flops, p.gamma if p.spiking else 0.0))
    gamma_bar = None if per_layer_mean else (spikes / slots if slots else 0.0)
    return report_from_costs(costs, time_steps, gamma_bar, items)


def profile(model: DualEncoder, images, *, batch: int = 64, per_layer_mean: bool = False,
            normalized: bool = False) -> EnergyReport:
    """Run image inference over ``images`` with probes and report per-item energy."""
    if len(images) == 0:
        raise ContractError("energy profile needs a non-empty sample")
    pixels = np.asarray(images, dtype=np.float32) if normalized else model.prepare_images(images)
    probes = ProbeLog()
    with no_grad():
        for i in range(0, len(pixels), batch):
            model.encode_images(pixels[i:i + batch], probes, normalized=True)
    return report_from_probes(probes, model.time_steps, per_layer_mean)
