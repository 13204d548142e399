"""Flat key=value run configuration.

One ``key=value`` per line, ``#`` starts a comment. Every key has a default,
so an empty file is a complete configuration. Tuples are comma-separated
(``lesion_radius=5,12``); optional values are left empty to mean "auto".
A single top-level ``seed`` feeds every module; each derives its own
sub-streams from it by purpose string.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

from .detector import DetectorConfig
from .synthgen import GenConfig
from .temporal import TemporalConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str | None, reason: str):
        self.key = key
        super().__init__(f"config key {key!r}: {reason}" if key else f"config: {reason}")


@dataclass(frozen=True)
class Key:
    name: str
    kind: str  # int, float, bool, str, ints, floats, optfloat, modes
    default: object
    unit: str
    doc: str
    target: tuple | None = None  # (sub-config, field)
    check: object = None  # callable(value) -> error message or None


def _between(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        ok_lo = v > lo if lo_open else v >= lo
        ok_hi = v < hi if hi_open else v <= hi
        if not (ok_lo and ok_hi):
            left = "(" if lo_open else "["
            right = ")" if hi_open else "]"
            return f"must lie in {left}{lo}, {hi}{right}, got {v}"
        return None

    return check


def _at_least(lo):
    def check(v):
        vals = v if isinstance(v, tuple) else (v,)
        if any(x < lo for x in vals):
            return f"must be >= {lo}, got {format_value(v)}"
        return None

    return check


def _range_pair(lo=0):
    def check(v):
        if len(v) != 2:
            return f"needs exactly two values 'lo,hi', got {format_value(v)}"
        if v[0] > v[1]:
            return f"range is empty: {format_value(v)}"
        if v[0] < lo:
            return f"lower bound must be >= {lo}"
        return None

    return check


def _one_of(*choices):
    def check(v):
        return None if v in choices else f"must be one of {', '.join(choices)}; got {v!r}"

    return check


_prob = _between(0.0, 1.0)

KEYS = [
    Key("seed", "int", 0, "-", "top-level seed; every random stream is derived from it", None, _at_least(0)),
    # synthetic data
    Key("image_size", "int", 64, "px", "frame width and height", ("gen", "image_size"), _at_least(16)),
    Key("lesion_count", "ints", (1, 1), "lesions", "lesions per frame (min,max)", ("gen", "lesion_count"), _range_pair(1)),
    Key("lesion_radius", "ints", (5, 12), "px", "ellipse semi-axis range", ("gen", "lesion_radius"), _range_pair(1)),
    Key("contrast", "floats", (30.0, 60.0), "gray levels", "lesion-to-background intensity offset range", ("gen", "contrast"), _range_pair(0)),
    Key("background_mean", "float", 110.0, "gray levels", "mean tissue intensity", ("gen", "background_mean"), _between(0, 255)),
    Key("band_amplitude", "float", 8.0, "gray levels", "amplitude of horizontal tissue layering", ("gen", "band_amplitude"), _at_least(0)),
    Key("speckle_amplitude", "float", 90.0, "gray levels", "width of the raw uniform speckle noise", ("gen", "speckle_amplitude"), _at_least(0)),
    Key("speckle_kernel", "int", 3, "px", "box-filter width smoothing the speckle", ("gen", "speckle_kernel"), _at_least(1)),
    Key("speckle_refresh", "float", 0.35, "fraction", "share of speckle redrawn each video frame", ("gen", "speckle_refresh"), _prob),
    Key("max_step", "int", 2, "px/frame", "largest lesion displacement per frame and axis", ("gen", "max_step"), _at_least(0)),
    Key("step_sigma", "float", 1.0, "px/frame", "std of the lesion random-walk step", ("gen", "step_sigma"), _at_least(0)),
    Key("pan_step", "int", 1, "px/frame", "largest background drift per frame", ("gen", "pan_step"), _at_least(0)),
    Key("p_blur", "float", 0.15, "probability", "per-frame probability of a blurred frame", ("gen", "p_blur"), _prob),
    Key("p_contrast_match", "float", 0.15, "probability", "per-frame probability of a contrast-matched frame", ("gen", "p_contrast_match"), _prob),
    Key("blur_sigma", "float", 2.5, "px", "gaussian sigma of blur corruption", ("gen", "blur_sigma"), _at_least(0)),
    Key("contrast_match_lambda", "float", 0.85, "fraction", "pull of lesion interior toward local background", ("gen", "contrast_match_lambda"), _prob),
    Key("seq_length", "ints", (40, 80), "frames", "video length range", ("gen", "seq_length"), _range_pair(2)),
    Key("n_stills", "int", 500, "images", "labeled training stills", None, _at_least(1)),
    Key("n_test_stills", "int", 200, "images", "held-out labeled stills", None, _at_least(1)),
    Key("n_unlabeled", "int", 80, "videos", "unlabeled training videos", None, _at_least(1)),
    Key("n_test_videos", "int", 10, "videos", "labeled test videos", None, _at_least(1)),
    Key("unlabeled_fraction", "float", 1.0, "fraction", "share of unlabeled videos used by train-stcd", None, _between(0, 1, lo_open=True)),
    # detector
    Key("backbone_widths", "ints", (16, 32, 64, 64), "channels", "backbone conv output channels", ("det", "widths"), _at_least(1)),
    Key("backbone_strides", "ints", (1, 2, 2, 2), "-", "backbone conv strides", ("det", "strides"), _at_least(1)),
    Key("anchor_sizes", "ints", (12, 24, 40), "px", "square anchor side lengths", ("det", "anchor_sizes"), _at_least(1)),
    Key("pos_iou", "float", 0.5, "IoU", "anchor positive threshold", ("det", "pos_thr"), _prob),
    Key("neg_iou", "float", 0.4, "IoU", "anchor negative threshold", ("det", "neg_thr"), _prob),
    Key("score_thr", "float", 0.05, "probability", "minimum detection score kept", ("det", "score_thr"), _prob),
    Key("nms_iou", "float", 0.5, "IoU", "greedy NMS suppression threshold", ("det", "nms_iou"), _prob),
    Key("max_dets", "int", 10, "boxes", "detections kept per frame", ("det", "max_dets"), _at_least(1)),
    Key("focal_alpha", "float", 0.25, "-", "focal loss positive weight", ("det", "focal_alpha"), _prob),
    Key("focal_gamma", "float", 2.0, "-", "focal loss focusing exponent", ("det", "focal_gamma"), _at_least(0)),
    Key("smooth_l1_beta", "float", 1 / 9, "-", "smooth-L1 transition point", ("det", "smooth_l1_beta"), _between(0, math.inf, lo_open=True)),
    Key("det_lr", "float", 1e-3, "-", "detector Adam learning rate", ("det", "lr"), _at_least(0)),
    Key("det_batch_size", "int", 16, "images", "detector minibatch", ("det", "batch_size"), _at_least(1)),
    Key("det_epochs", "int", 20, "epochs", "detector training epochs", ("det", "epochs"), _at_least(1)),
    Key("flip_augment", "bool", True, "-", "random horizontal flips during detector training", ("det", "flip_augment")),
    # temporal networks
    Key("motion_widths", "ints", (8, 12, 16), "channels", "motion net conv output channels", ("tmp", "motion_widths"), _at_least(1)),
    Key("motion_strides", "ints", (2, 2, 2), "-", "motion net conv strides", ("tmp", "motion_strides"), _at_least(1)),
    Key("motion_alpha", "float", 0.1, "-", "leaky-relu slope in the motion net", ("tmp", "motion_alpha"), _between(0, 1, True, True)),
    Key("decision_hidden", "int", 32, "units", "decision net hidden width", ("tmp", "decision_hidden"), _at_least(1)),
    # semi-supervised training
    Key("key_fraction", "float", 1 / 3, "fraction", "share of video frames used as pair keys", ("train", "key_fraction"), _between(0, 1, lo_open=True)),
    Key("max_offset", "int", 20, "frames", "largest key-to-partner distance", ("train", "max_offset"), _at_least(1)),
    Key("warmup_epochs", "int", 10, "epochs", "epochs before the decision net trains", ("train", "warmup_epochs"), _at_least(0)),
    Key("total_epochs", "int", 30, "epochs", "temporal training epochs", ("train", "total_epochs"), _at_least(1)),
    Key("batch_size", "int", 16, "pairs", "temporal training minibatch", ("train", "batch_size"), _at_least(1)),
    Key("lr_decision", "float", 1e-3, "-", "decision net base learning rate", ("train", "lr_decision"), _at_least(0)),
    Key("lr_motion", "float", 1e-3, "-", "motion net base learning rate", ("train", "lr_motion"), _at_least(0)),
    Key("lr_warp", "float", 1e-3, "-", "warp net base learning rate", ("train", "lr_warp"), _at_least(0)),
    Key("lr_decay", "float", 0.9, "factor/epoch", "multiplicative learning-rate decay", ("train", "lr_decay"), _between(0, 1, lo_open=True)),
    Key("adam_beta1", "float", 0.9, "-", "Adam first-moment decay", ("train", "beta1"), _between(0, 1, hi_open=True)),
    Key("adam_beta2", "float", 0.999, "-", "Adam second-moment decay", ("train", "beta2"), _between(0, 1, hi_open=True)),
    Key("adam_eps", "float", 1e-8, "-", "Adam denominator offset", ("train", "eps"), _between(0, math.inf, lo_open=True)),
    Key("warp_kind", "str", "warpnet", "-", "non-key feature synthesis: warpnet or bilinear", ("train", "warp_kind"), _one_of("warpnet", "bilinear")),
    Key("flow_epochs", "int", 2, "epochs", "epochs fitting the flow head for the bilinear baseline", ("train", "flow_epochs"), _at_least(0)),
    Key("lr_flow", "float", 1e-3, "-", "flow head learning rate", ("train", "lr_flow"), _at_least(0)),
    # evaluation
    Key("tau", "optfloat", None, "Q units", "decision threshold; empty = calibrate to target_key_fraction", None),
    Key("target_key_fraction", "float", 1 / 3, "fraction", "key-frame rate used for tau and baseline calibration", None, _between(0, 1, lo_open=True)),
    Key("mode", "str", "decision_net", "-", "scheduler policy, e.g. decision_net, fixed(3), grey_corr(0.01), all_key", None),
    Key("sweep_taus", "floats", (), "Q units", "tau values for sweep-tau; empty = quantiles of observed scores", None),
    Key("sweep_points", "int", 7, "values", "number of automatic sweep values", None, _at_least(2)),
    Key("ablation_modes", "strs", ("fixed", "grey_corr", "flow_corr"), "-", "baseline policies compared by ablate-scheduler", None),
    Key("ablation_tol", "float", 0.05, "fraction", "allowed key-rate mismatch in ablations", None, _between(0, 1, lo_open=True)),
    Key("bench_repeats", "int", 3, "passes", "timed passes in bench (after one warm-up)", None, _at_least(3)),
]
KEY_INDEX = {k.name: k for k in KEYS}


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(kind: str, text: str):
    if kind == "int":
        return int(text)
    if kind == "float":
        v = float(text)
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v
    if kind == "bool":
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    return text


def parse_value(key: Key, text: str):
    text = text.strip()
    try:
        if key.kind == "optfloat":
            return None if text in ("", "auto") else _parse_scalar("float", text)
        if key.kind in ("ints", "floats", "strs"):
            if not text:
                return ()
            scalar = {"ints": "int", "floats": "float", "strs": "str"}[key.kind]
            return tuple(_parse_scalar(scalar, p.strip()) for p in _split_list(text))
        if key.kind == "str" and not text:
            raise ValueError("must not be empty")
        return _parse_scalar(key.kind, text)
    except ValueError as exc:
        raise ConfigError(key.name, f"cannot parse {text!r} as {key.kind}: {exc}") from None


def _split_list(text: str) -> list:
    # commas inside parentheses belong to a mode argument
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    parts.append(cur)
    return parts


class Config:
    """Validated flat configuration with typed attribute access."""

    def __init__(self, values: dict | None = None):
        vals = {k.name: k.default for k in KEYS}
        for name, v in (values or {}).items():
            if name not in KEY_INDEX:
                raise ConfigError(name, "unknown key")
            vals[name] = v
        object.__setattr__(self, "_values", vals)
        self.validate()

    def __getattr__(self, name):
        try:
            return self._values[name]
        except KeyError:
            raise AttributeError(name) from None

    def __setattr__(self, name, value):
        raise AttributeError("Config is immutable; use replace()")

    def replace(self, **changes) -> "Config":
        vals = dict(self._values)
        vals.update(changes)
        return Config(vals)

    def as_dict(self) -> dict:
        return dict(self._values)

    def validate(self):
        for key in KEYS:
            v = self._values[key.name]
            if key.check is not None and v is not None:
                msg = key.check(v)
                if msg:
                    raise ConfigError(key.name, msg)
        if self.neg_iou > self.pos_iou:
            raise ConfigError("neg_iou", f"must not exceed pos_iou ({self.pos_iou})")
        if self.warmup_epochs > self.total_epochs:
            raise ConfigError("warmup_epochs", f"must not exceed total_epochs ({self.total_epochs})")
        if self.p_blur + self.p_contrast_match > 1:
            raise ConfigError("p_contrast_match", "p_blur + p_contrast_match must not exceed 1")
        if len(self.backbone_widths) != len(self.backbone_strides):
            raise ConfigError("backbone_strides", "needs one stride per backbone width")
        if len(self.motion_widths) != len(self.motion_strides):
            raise ConfigError("motion_strides", "needs one stride per motion width")
        if self.backbone_widths and self.backbone_widths[-1] <= 0:
            raise ConfigError("backbone_widths", "must be positive")
        stride = math.prod(self.backbone_strides)
        if self.image_size % stride:
            raise ConfigError("image_size", f"must be divisible by the total backbone stride {stride}")
        if math.prod(self.motion_strides) != stride:
            raise ConfigError("motion_strides", f"total motion stride must equal the backbone stride {stride}")
        if 2 * self.lesion_radius[1] + 2 >= self.image_size:
            raise ConfigError("lesion_radius", f"too large for {self.image_size}px frames")
        if self.seq_length[0] < self.max_offset + 1:
            raise ConfigError("seq_length", f"shortest video must exceed max_offset ({self.max_offset}) frames")
        if len(self.sweep_taus) == 1:
            raise ConfigError("sweep_taus", "needs at least two values (or none for automatic)")
        from .scheduler import parse_mode

        for name, modes in (("mode", (self.mode,)), ("ablation_modes", self.ablation_modes)):
            for m in modes:
                try:
                    if name == "ablation_modes":
                        if m not in ("fixed", "grey_corr", "flow_corr", "all_key"):
                            raise ValueError(f"unknown baseline {m!r}")
                    else:
                        parse_mode(m)
                except ValueError as exc:
                    raise ConfigError(name, str(exc)) from None
        return self

    # sub-configs -----------------------------------------------------------

    def _fields(self, target: str) -> dict:
        return {k.target[1]: self._values[k.name] for k in KEYS if k.target and k.target[0] == target}

    def gen_config(self) -> GenConfig:
        return GenConfig(seed=self.seed, **self._fields("gen")).validate()

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(image_size=self.image_size, seed=self.seed, **self._fields("det")).validate()

    def temporal_config(self) -> TemporalConfig:
        return TemporalConfig(feat_channels=self.backbone_widths[-1], **self._fields("tmp"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self._fields("train")).validate()

    # serialisation ----------------------------------------------------------

    def echo(self, docs: bool = False) -> str:
        """Canonical text form; byte-identical for equal configurations."""
        lines = []
        for key in KEYS:
            if docs:
                lines.append(f"# {key.doc} [{key.unit}]")
            lines.append(f"{key.name}={format_value(self._values[key.name])}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.echo().encode("utf-8")).hexdigest()[:12]


def parse_config_text(text: str, source: str = "<text>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(None, f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        name, _, val = line.partition("=")
        name = name.strip()
        if name not in KEY_INDEX:
            raise ConfigError(name, f"unknown key ({source}:{lineno})")
        if name in values:
            raise ConfigError(name, f"given twice ({source}:{lineno})")
        values[name] = parse_value(KEY_INDEX[name], val)
    return values


def parse_config(path=None, overrides=()) -> Config:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    values = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(None, f"cannot read {p}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(p)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(None, f"override must be key=value, got {item!r}")
        name, _, val = item.partition("=")
        name = name.strip()
        if name not in KEY_INDEX:
            raise ConfigError(name, "unknown key")
        values[name] = parse_value(KEY_INDEX[name], val)
    return Config(values)
