"""Analytic parameter and multiply-accumulate accounting for a :class:`ModelConfig`.

Counts are derived from the configuration alone; nothing is instantiated. Convs
cost ``Cout*H'*W'*(Cin/groups)*Kh*Kw`` MACs, linears ``out*in*positions``,
attention ``N*N_reduced*C`` for the scores plus the same for the value mix.
Pooling, normalisation, activations and resampling are free. "Flops" in reports
are these MAC totals.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .functional import conv_out_size
from .model import ModelConfig, cbam_hidden, msca_groups

# (params M, GMACs) as reported for the 256x256 setting, keyed by number of PTL stages
REPORTED_PTL_SWEEP = {4: (3.24, 1.23), 3: (3.26, 1.24), 2: (3.48, 1.25), 1: (3.61, 1.27), 0: (3.74, 1.28)}
REPORTED_ENCODER_ABLATION = {
    "TE (ETL)": (3.22, 1.09),
    "TE (ETL+PTL)": (3.09, 1.07),
    "CE (DW+MSCA)": (0.74, 0.82),
    "DW + TE (ETL+PTL)": (3.46, 1.23),
    "CE + TE (ETL)": (3.74, 1.28),
    "CE + TE (ETL+PTL)": (3.61, 1.27),
}


class ComplexityError(ValueError):
    pass


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    input_size: tuple
    rows: list = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def params_under(self, prefix: str) -> int:
        return sum(r.params for r in self.rows if _under(r.name, prefix))

    def macs_under(self, prefix: str) -> int:
        return sum(r.macs for r in self.rows if _under(r.name, prefix))

    def row(self, name: str) -> LayerCost:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def format_table(self, min_macs: int = 0) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        lines = [f"{'layer':<{width}}  {'params':>10}  {'MACs':>14}"]
        for r in self.rows:
            if r.params or r.macs >= min_macs:
                lines.append(f"{r.name:<{width}}  {r.params:>10,}  {r.macs:>14,}")
        h, w = self.input_size
        lines.append(f"{'total':<{width}}  {self.total_params:>10,}  {self.total_macs:>14,}")
        lines.append(f"Params {self.total_params / 1e6:.3f} M   MACs {self.total_macs / 1e9:.3f} G  @ {h}x{w}")
        return "\n".join(lines)


def _under(name: str, prefix: str) -> bool:
    prefix = prefix.rstrip("/")
    return not prefix or name == prefix or name.startswith(prefix + "/")


class _Counter:
    def __init__(self):
        self.rows: list[LayerCost] = []

    def conv(self, name, cin, cout, k, out_hw, groups=1, bias=True):
        per_out = (cin // groups) * k * k
        self.rows.append(LayerCost(name, cout * per_out + (cout if bias else 0), cout * out_hw[0] * out_hw[1] * per_out))

    def linear(self, name, fin, fout, positions, bias=True, calls=1):
        self.rows.append(LayerCost(name, fin * fout + (fout if bias else 0), calls * positions * fin * fout))

    def norm(self, name, dim):
        self.rows.append(LayerCost(name, 2 * dim, 0))

    def free(self, name, macs):
        self.rows.append(LayerCost(name, 0, macs))


def count_macs(cfg: ModelConfig, input_size=(256, 256)) -> ComplexityReport:
    if isinstance(input_size, int):
        input_size = (input_size, input_size)
    H, W = input_size
    if H % 32 or W % 32:
        raise ComplexityError(f"input size {H}x{W} is not divisible by 32")
    stages = cfg.resolved_stages()
    chans = [st.C for st in stages]
    sizes = []
    h, w = H, W
    for st in stages:
        h, w = conv_out_size(h, st.K, st.S, st.P), conv_out_size(w, st.K, st.S, st.P)
        sizes.append((h, w))
    c = _Counter()

    if cfg.use_ce:
        cin = cfg.in_channels
        for i, st in enumerate(stages):
            p = f"ce/stage{i + 1}"
            hw = sizes[i]
            c.conv(f"{p}/dw/depthwise", cin, cin, st.K, hw, groups=cin)
            c.conv(f"{p}/dw/pointwise", cin, st.C, 1, hw)
            if cfg.use_msca:
                g = msca_groups(st.C, cfg.msca_group_width)
                for d in (1, 2, 3, 4):
                    c.conv(f"{p}/msca/branch{d}", st.C, st.C, 3, hw, groups=g)
                wide = 4 * st.C
                hid = cbam_hidden(wide, cfg.cbam_reduction)
                # shared MLP runs on the avg- and max-pooled vectors
                c.linear(f"{p}/msca/cbam/mlp/fc1", wide, hid, 1, bias=False, calls=2)
                c.linear(f"{p}/msca/cbam/mlp/fc2", hid, wide, 1, bias=False, calls=2)
                c.conv(f"{p}/msca/cbam/spatial", 2, 1, 7, hw)
                c.conv(f"{p}/msca/proj", wide, st.C, 1, hw)
            cin = st.C

    if cfg.use_te:
        cin = cfg.in_channels
        for i, st in enumerate(stages):
            p = f"te/stage{i + 1}"
            hw = sizes[i]
            n = hw[0] * hw[1]
            c.conv(f"{p}/patch_embed", cin, st.C, st.K, hw)
            c.norm(f"{p}/embed_norm", st.C)
            for j in range(st.L):
                b = f"{p}/block{j}"
                c.norm(f"{b}/norm1", st.C)
                if cfg.block_kind(i) == "ETL":
                    if hw[0] % st.R or hw[1] % st.R:
                        raise ComplexityError(f"stage {i + 1} size {hw} not divisible by reduction {st.R}")
                    red = (hw[0] // st.R, hw[1] // st.R)
                    nr = red[0] * red[1]
                    c.linear(f"{b}/attn/q", st.C, st.C, n)
                    if st.R > 1:
                        c.conv(f"{b}/attn/sr", st.C, st.C, st.R, red)
                        c.norm(f"{b}/attn/sr_norm", st.C)
                    c.linear(f"{b}/attn/k", st.C, st.C, nr)
                    c.linear(f"{b}/attn/v", st.C, st.C, nr)
                    c.free(f"{b}/attn/scores", n * nr * st.C)
                    c.free(f"{b}/attn/value_mix", n * nr * st.C)
                    c.linear(f"{b}/attn/proj", st.C, st.C, n)
                c.norm(f"{b}/norm2", st.C)
                hid = st.C * cfg.mlp_ratio
                c.linear(f"{b}/ffn/fc1", st.C, hid, n)
                c.conv(f"{b}/ffn/dw", hid, hid, 3, hw, groups=hid)
                c.linear(f"{b}/ffn/fc2", hid, st.C, n)
            c.norm(f"{p}/norm", st.C)
            cin = st.C

    if cfg.use_ce and cfg.use_te:
        for i, ch in enumerate(chans):
            c.conv(f"cef/stage{i + 1}/fuse", 2 * ch, ch, 1, sizes[i])

    dim = cfg.decoder_width()
    for i, ch in enumerate(chans):
        c.conv(f"decoder/proj{i + 1}", ch, dim, 1, sizes[i])
    c.conv("decoder/fuse", len(chans) * dim, dim, 1, sizes[0])
    c.conv("decoder/classifier", dim, cfg.num_classes, 1, sizes[0])
    return ComplexityReport(input_size=(H, W), rows=c.rows)


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    params: int
    macs: int
    reported: tuple | None = None

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def macs_g(self) -> float:
        return self.macs / 1e9


def compare_configs(configs, input_size=(256, 256), reported=None) -> list:
    """One row per ``(label, ModelConfig)`` pair, in input order."""
    reported = reported or {}
    rows = []
    for label, cfg in configs:
        rep = count_macs(cfg, input_size)
        rows.append(ComparisonRow(label, rep.total_params, rep.total_macs, reported.get(label)))
    return rows


def ptl_sweep(base: ModelConfig | None = None) -> list:
    base = base or ModelConfig()
    return [(f"L={k}", base.with_(ptl_stages=k)) for k in (4, 3, 2, 1, 0)]


def ptl_sweep_reported() -> dict:
    return {f"L={k}": v for k, v in REPORTED_PTL_SWEEP.items()}


def encoder_ablations(base: ModelConfig | None = None) -> list:
    base = base or ModelConfig()
    return [
        ("TE (ETL)", base.with_(use_ce=False, ptl_stages=0)),
        ("TE (ETL+PTL)", base.with_(use_ce=False, ptl_stages=1)),
        ("CE (DW+MSCA)", base.with_(use_te=False)),
        ("DW + TE (ETL+PTL)", base.with_(use_msca=False, ptl_stages=1)),
        ("CE + TE (ETL)", base.with_(ptl_stages=0)),
        ("CE + TE (ETL+PTL)", base.with_(ptl_stages=1)),
    ]


def format_comparison(rows) -> str:
    width = max([len(r.name) for r in rows] + [6])
    out = [f"{'config':<{width}}  {'#P (M)':>8}  {'#F (G)':>8}  {'reported #P':>11}  {'reported #F':>11}"]
    for r in rows:
        rp, rf = r.reported if r.reported else ("", "")
        out.append(f"{r.name:<{width}}  {r.params_m:>8.3f}  {r.macs_g:>8.3f}  {rp!s:>11}  {rf!s:>11}")
    return "\n".join(out)


CSV_COLUMNS = ("name", "params", "macs_g", "oa", "f1_lake", "f1_mean", "miou")


def report_csv(records) -> str:
    """CSV text with the shared report columns; missing fields are left blank."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow({k: ("" if rec.get(k) is None else rec.get(k)) for k in CSV_COLUMNS})
    return buf.getvalue()


def comparison_records(rows) -> list:
    return [{"name": r.name, "params": r.params, "macs_g": f"{r.macs_g:.6f}"} for r in rows]
