"""Static accounting of trainable parameters and multiply-accumulate
operations, straight from a model config (no instantiation).

Conventions, chosen once and used everywhere:
- one MAC = one multiply-accumulate; a FLOPs column at 2x MACs is emitted
  for cross-paper comparison;
- conv MACs = output elements x kernel taps x (input channels / groups);
  matmul m,k,n = m*k*n; attention per head = 2*L^2*d_h on top of the three
  L*C*d_h projections and the output projection;
- softmax, normalization, activations, bias/residual adds and pooling are
  tallied per element in a separate non-MAC column, never folded into MACs.

Row names follow the runtime parameter registry (layer = parameter name
minus its last component), so the audit can match them one to one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import AuditError
from .model import ModelConfig, StamModel


@dataclass
class CostRow:
    name: str
    params: int
    macs: int          # per trial
    elementwise: int   # per trial, non-MAC ops


@dataclass
class CostReport:
    rows: list[CostRow]
    batch_size: int
    batch_count: int

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs_per_trial(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def elementwise_per_trial(self) -> int:
        return sum(r.elementwise for r in self.rows)

    @property
    def macs_per_batch(self) -> int:
        return self.macs_per_trial * self.batch_size

    @property
    def macs_per_dataset(self) -> int:
        return self.macs_per_batch * self.batch_count

    def to_dict(self) -> dict:
        return {
            "rows": [{"name": r.name, "params": r.params, "macs_per_trial": r.macs,
                      "elementwise_per_trial": r.elementwise} for r in self.rows],
            "batch_size": self.batch_size,
            "batch_count": self.batch_count,
            "total_params": self.total_params,
            "total_params_millions": self.total_params / 1e6,
            "macs_per_trial": self.macs_per_trial,
            "macs_per_batch": self.macs_per_batch,
            "macs_per_batch_mmac": self.macs_per_batch / 1e6,
            "macs_per_dataset": self.macs_per_dataset,
            "macs_per_dataset_bmac": self.macs_per_dataset / 1e9,
            "flops_per_batch_approx": 2 * self.macs_per_batch,
            "elementwise_per_trial": self.elementwise_per_trial,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def as_table(self) -> str:
        lines = [f"{'layer':<24}{'params':>12}{'MACs/trial':>16}{'elemwise':>12}"]
        for r in self.rows:
            lines.append(f"{r.name:<24}{r.params:>12}{r.macs:>16}{r.elementwise:>12}")
        lines.append("-" * 64)
        lines.append(f"{'total':<24}{self.total_params:>12}{self.macs_per_trial:>16}"
                     f"{self.elementwise_per_trial:>12}")
        lines.append(f"params (M):           {self.total_params / 1e6:.5f}")
        lines.append(f"MACs per batch (MMac): {self.macs_per_batch / 1e6:.3f}  "
                     f"[batch={self.batch_size}]")
        lines.append(f"MACs per dataset pass (BMac): {self.macs_per_dataset / 1e9:.5f}  "
                     f"[{self.batch_count} batches]")
        return "\n".join(lines)


def _conv_rows(prefix, c_in, c_out, k, t_out, n, project):
    rows = [
        CostRow(f"{prefix}.dw", c_in * k + c_in, c_in * t_out * n * k, c_in * t_out * n),
        CostRow(f"{prefix}.pw", c_in * c_out + c_out, c_out * t_out * n * c_in,
                c_out * t_out * n),
    ]
    if project:
        rows.append(CostRow(f"{prefix}.proj", c_in * c_out + c_out,
                            c_out * t_out * n * c_in, c_out * t_out * n))
    # residual add + relu + shape-preserving max-pool
    rows.append(CostRow(f"{prefix}.post", 0, 0, 3 * c_out * t_out * n))
    return rows


def _attention_rows(prefix, length, channels, heads, d_h, with_norm):
    width = heads * d_h
    params = 3 * channels * width + width * channels + channels  # = 4C^2 + C
    macs = 3 * length * channels * width \
        + heads * 2 * length * length * d_h \
        + length * width * channels
    elementwise = 2 * heads * length * length + 2 * length * channels
    rows = [CostRow(prefix, params, macs, elementwise)]
    if with_norm:
        rows.append(CostRow(f"{prefix}.ln", 2 * channels, 0, length * channels))
    return rows


def cost_rows(config: ModelConfig) -> list[CostRow]:
    """Per-layer closed-form parameter and per-trial MAC counts."""
    sc = config.septcn
    n = config.n_joints
    t1 = (config.t_frames + 2 * (sc.kernel1 // 2) - sc.kernel1) // sc.stride1 + 1
    t2 = (t1 + 2 * (sc.kernel2 // 2) - sc.kernel2) // sc.stride2 + 1
    rows = []
    rows += _conv_rows("septcn.block1", sc.in_channels, sc.mid_channels,
                       sc.kernel1, t1, n, sc.in_channels != sc.mid_channels)
    rows += _conv_rows("septcn.block2", sc.mid_channels, sc.out_channels,
                       sc.kernel2, t2, n, sc.mid_channels != sc.out_channels)

    c, heads, d_h = config.channels, config.heads, config.d_head
    length = t2 * n
    with_norm = config.attn_residual
    n_streams = 0
    if config.stream_spatial:
        rows.append(CostRow("stream1.embed", 0, 0, length * c))
        rows += _attention_rows("stream1.attn", length, c, heads, d_h, with_norm)
        n_streams += 1
    if config.stream_temporal:
        rows.append(CostRow("stream2.embed", 0, 0, length * c))
        rows += _attention_rows("stream2.attn", length, c, heads, d_h, with_norm)
        n_streams += 1
    if config.stream_cascade:
        rows.append(CostRow("stream3.embed", 0, 0, 2 * length * c))
        rows += _attention_rows("stream3.attn_s", length, c, heads, d_h, with_norm)
        rows += _attention_rows("stream3.attn_t", length, c, heads, d_h, with_norm)
        n_streams += 1
    if config.stream_residual:
        n_streams += 1

    l_cat = n_streams * length
    rows.append(CostRow("head.fc", c * c + c, l_cat * c * c, 3 * l_cat * c))
    rows.append(CostRow("head.ln", 2 * c, 0, l_cat * c))
    rows.append(CostRow("head.pool", 0, 0, l_cat * c))
    rows.append(CostRow("cls", c * config.n_classes + config.n_classes,
                        c * config.n_classes, config.n_classes))
    return rows


def count_params(config: ModelConfig) -> list[CostRow]:
    return cost_rows(config)


def count_macs(config: ModelConfig, batch_size: int = 8,
               batch_count: int = 1) -> CostReport:
    return CostReport(cost_rows(config), batch_size, batch_count)


def audit_against_runtime(model: StamModel) -> bool:
    """Closed-form parameter totals must equal the instantiated counts, layer
    by layer; raises AuditError naming every offending layer."""
    predicted = {r.name: r.params for r in cost_rows(model.config) if r.params}
    _, actual = model.count_trainable()
    offenders = []
    for name in sorted(set(predicted) | set(actual)):
        if predicted.get(name, 0) != actual.get(name, 0):
            offenders.append(f"{name}: closed-form {predicted.get(name, 0)} "
                             f"!= runtime {actual.get(name, 0)}")
    if offenders:
        raise AuditError("parameter audit failed:\n  " + "\n  ".join(offenders))
    return True
