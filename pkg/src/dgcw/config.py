"""Flat key=value run configuration shared by every command.

A config file holds one ``key = value`` per line (# comments allowed); the
command line may override any key with ``--key value``. Unknown keys are
rejected. Every key has a default, so an empty config is valid.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .data import SynthSpec
from .network import NetworkConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # run
    seed: int = 0
    precision: str = "f32"          # f32 | f64
    data_dir: str = "data"
    # synthetic dataset
    image_size: int = 64
    class_count: int = 4
    train_count: int = 256
    val_count: int = 64
    shapes_min: int = 3
    shapes_max: int = 6
    noise: float = 0.05
    ambiguous_frac: float = 0.6
    # network
    backbone_widths: str = "16,32,64,64"
    reduced_channels: int = 32
    head: str = "none"              # none | ppm | aspp
    context: str = "none"           # none | conv | gap | se | nlh | nld | dgcw
    norm: str = "batch"             # batch | none
    aspp_rates: str = "2,4,6"
    aspp_out_channels: int = 64
    # weighting module
    dgcw_norm: str = "dbs"          # dbs | softmax | tanh
    dgcw_ratio: int = 4
    dgcw_hidden: int = 0            # 0 -> reduced_channels
    dgcw_eps: float = 0.0           # 0 -> 1e-6 (f32) / 1e-12 (f64)
    dgcw_impl: str = "fused"        # fused | naive
    dgcw_block: int = 16
    # optimization
    aux_weight: float = 0.4
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iterations: int = 1500
    batch_size: int = 8
    crop: int = 64
    scale_min: float = 0.5
    scale_max: float = 2.0
    ohem: bool = False
    ohem_theta: float = 0.7
    ohem_min_kept: int = 4096
    eval_every: int = 0             # 0 -> one pass over the training set
    # evaluation
    scales: str = "1.0"
    flip: bool = False
    # benchmark
    bench_channels: int = 8
    bench_sizes: str = "32,48,64,80"
    bench_block: int = 16
    bench_naive_cap_mb: int = 1024
    # variance report
    var_bins: int = 8

    # -- typed views ---------------------------------------------------------

    def widths(self):
        return tuple(int(x) for x in self.backbone_widths.split(","))

    def rates(self):
        return tuple(int(x) for x in self.aspp_rates.split(","))

    def scale_list(self):
        return tuple(float(x) for x in self.scales.split(","))

    def size_list(self):
        return tuple(int(x) for x in self.bench_sizes.split(","))

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            class_count=self.class_count,
            backbone_widths=self.widths(),
            reduced_channels=self.reduced_channels,
            head=self.head,
            context=self.context,
            aux_weight=self.aux_weight,
            aspp_rates=self.rates(),
            aspp_out_channels=self.aspp_out_channels,
            norm=self.norm,
            dgcw_norm=self.dgcw_norm,
            dgcw_ratio=self.dgcw_ratio,
            dgcw_hidden=self.dgcw_hidden,
            dgcw_eps=self.dgcw_eps,
            dgcw_impl=self.dgcw_impl,
            dgcw_block=self.dgcw_block,
        ).validate()

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            image_size=self.image_size,
            class_count=self.class_count,
            shapes_min=self.shapes_min,
            shapes_max=self.shapes_max,
            noise=self.noise,
            ambiguous_frac=self.ambiguous_frac,
            seed=self.seed,
        ).validate()

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def resolved_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.as_dict().items()))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _parse_value(key: str, raw: str):
    default = getattr(RunConfig(), key)
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw.strip()


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                if "=" not in body:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, raw = (s.strip() for s in body.split("=", 1))
                _set(cfg, key, raw, f"{path}:{lineno}")
    for key, raw in (overrides or {}).items():
        _set(cfg, key, raw, "command line")
    return cfg


def _set(cfg: RunConfig, key: str, raw, where: str):
    if key not in _FIELDS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    setattr(cfg, key, _parse_value(key, str(raw)))
