"""Parameter and FLOP accounting: original layers against DCL replacements.

An original layer with u x u kernels mapping K1 to K2 channels on a W2 x H2
grid costs u^2 K1 K2 weights and u^2 W2 H2 K1 K2 multiply-accumulates. A DCL
block with branch widths M costs u^2 K1 sum(M) + K2 sum(M) weights and
u^2 W2 H2 K1 sum(M) + W2 H2 K2 sum(M) multiply-accumulates. Biases are kept in
separate columns and stay out of the savings ratio.
"""

import csv
import io
import logging
import re
from dataclasses import dataclass
from typing import Optional, Sequence

from app.backend.core.arch import LayerKind, NetworkSpec
from app.backend.core.errors import CostOverflow, UnknownLayer

logger = logging.getLogger(__name__)

INT64_MAX = 2**63 - 1
CSV_HEADER = ["layer", "params_orig", "params_dcl", "flops_orig", "flops_dcl", "savings", "inequality"]

_PLAN_ENTRY = re.compile(r"([A-Za-z][A-Za-z0-9]*)=DCL(\d+)([DS]?)@(\d+)")


def _checked(value: int, what: str) -> int:
    if value > INT64_MAX:
        raise CostOverflow(f"{what} = {value} does not fit in 64 bits")
    return value


def _positive(**dims: int) -> None:
    for name, value in dims.items():
        if value < 1:
            raise ValueError(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class Cost:
    params: int
    flops: int
    bias: int


def layer_cost(u: int, K1: int, K2: int, W2: int, H2: int) -> Cost:
    _positive(u=u, K1=K1, K2=K2, W2=W2, H2=H2)
    params = _checked(u * u * K1 * K2, "params")
    flops = _checked(u * u * W2 * H2 * K1 * K2, "flops")
    return Cost(params, flops, K2)


def dcl_cost(u: int, K1: int, K2: int, M: Sequence[int], W2: int, H2: int) -> Cost:
    _positive(u=u, K1=K1, K2=K2, W2=W2, H2=H2)
    if not M or any(m < 1 for m in M):
        raise ValueError(f"branch widths must be positive, got {list(M)}")
    total = sum(M)
    params = _checked(u * u * K1 * total + K2 * total, "params")
    flops = _checked(u * u * W2 * H2 * K1 * total + W2 * H2 * K2 * total, "flops")
    # branch biases plus one fusion bias vector per branch
    return Cost(params, flops, total + len(M) * K2)


@dataclass(frozen=True)
class CostReport:
    layer: str
    params_original: int
    params_dcl: int
    flops_original: int
    flops_dcl: int
    bias_original: int = 0
    bias_dcl: int = 0
    replaced: bool = False

    @property
    def savings_fraction(self) -> float:
        return 1.0 - self.params_dcl / self.params_original if self.params_original else 0.0

    @property
    def inequality_holds(self) -> bool:
        return self.params_dcl <= self.params_original


@dataclass(frozen=True)
class Geometry:
    name: str
    kind: LayerKind
    u: int
    K1: int
    K2: int
    W2: int
    H2: int
    M: Optional[tuple[int, ...]] = None     # set for DCL layers already in the network


def layer_geometries(spec: NetworkSpec) -> list[Geometry]:
    """Trainable layers named by ordinal: conv1, conv2, ..., fc6, ... (dcl<i> for DCL blocks)."""
    out = []
    ordinal = 0
    for i, layer in enumerate(spec.layers):
        if layer.kind not in (LayerKind.CONV, LayerKind.FC, LayerKind.DCL):
            continue
        ordinal += 1
        c, h, w = spec.in_shape(i)
        k2, oh, ow = spec.out_shape(i)
        if layer.kind is LayerKind.CONV:
            out.append(Geometry(f"conv{ordinal}", layer.kind, layer.kernel, c, k2, ow, oh))
        elif layer.kind is LayerKind.FC:
            # a square input is read as one u x u convolution, otherwise as a flat vector
            u, k1 = (h, c) if h == w else (1, c * h * w)
            out.append(Geometry(f"fc{ordinal}", layer.kind, u, k1, k2, 1, 1))
        else:
            out.append(Geometry(f"dcl{ordinal}", layer.kind, layer.kernel, c, k2, ow, oh, layer.dcl.M))
    return out


def parse_plan(text: str) -> dict[str, tuple[int, ...]]:
    """``fc6=DCL2@1024,B=DCL3S@20`` -> {"fc6": (1024, 1024), "B": (20, 20, 20)}."""
    plan: dict[str, tuple[int, ...]] = {}
    for entry in filter(None, (e.strip() for e in text.split(","))):
        m = _PLAN_ENTRY.fullmatch(entry)
        if not m:
            raise ValueError(f"bad plan entry {entry!r}; expected <layer>=DCL<T>@<M>")
        name, T, _, M = m.group(1), int(m.group(2)), m.group(3), int(m.group(4))
        if T < 2 or M < 1:
            raise ValueError(f"plan entry {entry!r} needs T >= 2 and M >= 1")
        plan[name] = (M,) * T
    return plan


def _resolve_names(geoms: list[Geometry], plan: dict[str, tuple[int, ...]]) -> dict[str, tuple[int, ...]]:
    by_name = {g.name: g for g in geoms}
    fcs = [g.name for g in geoms if g.kind is LayerKind.FC]
    aliases = {"A": fcs[0] if fcs else None, "B": fcs[1] if len(fcs) > 1 else None}
    resolved = {}
    for name, M in plan.items():
        target = aliases.get(name, name)
        if target is None or target not in by_name:
            raise UnknownLayer(f"plan names unknown layer {name!r}; layers are {', '.join(by_name)}")
        if by_name[target].kind is LayerKind.DCL:
            raise ValueError(f"{target} is already a DCL block")
        resolved[target] = M
    return resolved


def _row(g: Geometry, replacement: Optional[tuple[int, ...]]) -> CostReport:
    if g.M is not None:
        cost = dcl_cost(g.u, g.K1, g.K2, g.M, g.W2, g.H2)
        return CostReport(g.name, cost.params, cost.params, cost.flops, cost.flops, cost.bias, cost.bias)
    original = layer_cost(g.u, g.K1, g.K2, g.W2, g.H2)
    if replacement is None:
        return CostReport(g.name, original.params, original.params, original.flops, original.flops,
                          original.bias, original.bias)
    dcl = dcl_cost(g.u, g.K1, g.K2, replacement, g.W2, g.H2)
    if 2 * sum(replacement) > g.K2:
        logger.warning("%s: sum of branch widths %d exceeds K2/2 = %g", g.name, sum(replacement), g.K2 / 2)
    return CostReport(g.name, original.params, dcl.params, original.flops, dcl.flops,
                      original.bias, dcl.bias, replaced=True)


@dataclass
class NetworkReport:
    rows: list[CostReport]
    total: CostReport

    @property
    def violations(self) -> list[str]:
        return [r.layer for r in self.rows if r.replaced and not r.inequality_holds]


def compare_network(spec: NetworkSpec, plan: dict[str, tuple[int, ...]] | str) -> NetworkReport:
    if isinstance(plan, str):
        plan = parse_plan(plan)
    geoms = layer_geometries(spec)
    resolved = _resolve_names(geoms, plan)
    rows = [_row(g, resolved.get(g.name)) for g in geoms]
    total = CostReport(
        "total",
        _checked(sum(r.params_original for r in rows), "params"),
        _checked(sum(r.params_dcl for r in rows), "params"),
        _checked(sum(r.flops_original for r in rows), "flops"),
        _checked(sum(r.flops_dcl for r in rows), "flops"),
        sum(r.bias_original for r in rows),
        sum(r.bias_dcl for r in rows),
        replaced=any(r.replaced for r in rows),
    )
    report = NetworkReport(rows, total)
    if report.violations:
        logger.warning("replacements without parameter savings: %s", ", ".join(report.violations))
    return report


# --- rendering ---

def report_csv(report: NetworkReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in [*report.rows, report.total]:
        inequality = r.inequality_holds if r.layer != "total" else not report.violations
        writer.writerow([r.layer, r.params_original, r.params_dcl, r.flops_original, r.flops_dcl,
                         f"{r.savings_fraction:.6f}", str(inequality).lower()])
    return buf.getvalue()


def format_report(report: NetworkReport) -> str:
    """Aligned text table; FLOPs are multiply-accumulates, savings exclude biases."""
    header = ("layer", "params_orig", "params_dcl", "bias_orig", "bias_dcl",
              "flops_orig (MAC)", "flops_dcl (MAC)", "savings", "ok")
    lines = [header]
    for r in [*report.rows, report.total]:
        ok = r.inequality_holds if r.layer != "total" else not report.violations
        lines.append((r.layer, f"{r.params_original:,}", f"{r.params_dcl:,}", f"{r.bias_original:,}",
                      f"{r.bias_dcl:,}", f"{r.flops_original:,}", f"{r.flops_dcl:,}",
                      f"{100 * r.savings_fraction:.2f}%", "yes" if ok else "NO"))
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join(
        "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
        for row in lines
    )
