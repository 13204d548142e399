"""Analytic FLOP counts for every network component.

A convolution costs 2*Cin*Cout*K*K*Hout*Wout (multiply and add per tap;
bias adds are not counted). Activations cost one FLOP per element, a linear
layer 2*in*out, global pooling one add per element, bilinear sampling
8 FLOPs per output element per channel plus 10 per location for the sample
coordinates, and the grey-frame MSE 3 per pixel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .autodiff import conv_out_size
from .detector import DetectorConfig
from .temporal import TemporalConfig


def conv_flops(cin: int, cout: int, k: int, hout: int, wout: int) -> int:
    return 2 * cin * cout * k * k * hout * wout


@dataclass
class FlopModel:
    det_cfg: DetectorConfig = field(default_factory=DetectorConfig)
    tcfg: TemporalConfig = field(default_factory=TemporalConfig)

    def __post_init__(self):
        d, t = self.det_cfg, self.tcfg
        size = d.image_size
        parts = {}

        total, cin, hw = 0, 1, size
        for cout, s in zip(d.widths, d.strides):
            hw = conv_out_size(hw, 3, s, 1)
            total += conv_flops(cin, cout, 3, hw, hw) + cout * hw * hw
            cin = cout
        parts["backbone"] = total
        fh = hw
        c = cin
        a = d.num_anchors
        parts["heads"] = conv_flops(c, a, 3, fh, fh) + conv_flops(c, 4 * a, 3, fh, fh)

        total, cin, hw = 0, 2, size
        for cout, s in zip(t.motion_widths, t.motion_strides):
            hw = conv_out_size(hw, 3, s, 1)
            total += conv_flops(cin, cout, 3, hw, hw) + cout * hw * hw
            cin = cout
        parts["motion"] = total
        m = cin

        parts["warp"] = conv_flops(c + m, c, 3, fh, fh) + c * fh * fh + conv_flops(c, c, 1, fh, fh)
        parts["decision"] = m * fh * fh + 2 * m * t.decision_hidden + t.decision_hidden + 2 * t.decision_hidden
        parts["flow"] = conv_flops(m, 2, 1, fh, fh) + 2 * 2 * fh * fh
        parts["bilinear"] = fh * fh * (8 * c + 10)
        parts["grey"] = 3 * size * size
        self.parts = parts

    def __getitem__(self, name: str) -> int:
        return self.parts[name]

    def total(self, *names) -> int:
        return int(sum(self.parts[n] for n in names))

    @property
    def framewise(self) -> int:
        return self.total("backbone", "heads")

    @property
    def key_path(self) -> int:
        return self.total("backbone", "heads", "motion", "decision")

    @property
    def nonkey_path(self) -> int:
        return self.total("motion", "decision", "warp", "heads")


def count_flops(det_cfg: DetectorConfig | None = None, path: str = "key", tcfg: TemporalConfig | None = None) -> int:
    """FLOPs of one decision-net scheduled frame on the ``key`` or ``nonkey`` path."""
    model = FlopModel(det_cfg or DetectorConfig(), tcfg or TemporalConfig())
    if path == "key":
        return model.key_path
    if path == "nonkey":
        return model.nonkey_path
    raise ValueError(f"path must be 'key' or 'nonkey', got {path!r}")
