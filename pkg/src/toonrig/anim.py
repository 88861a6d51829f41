"""Expression-driven animation: 52 named channels mapped onto per-layer deformations."""
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import MappingError
from .raster import render_geometry
from .rig import compose_geometry

CHANNELS = (
    "browDownLeft", "browDownRight", "browInnerUp", "browOuterUpLeft", "browOuterUpRight",
    "cheekPuff", "cheekSquintLeft", "cheekSquintRight",
    "eyeBlinkLeft", "eyeBlinkRight", "eyeLookDownLeft", "eyeLookDownRight", "eyeLookInLeft", "eyeLookInRight",
    "eyeLookOutLeft", "eyeLookOutRight", "eyeLookUpLeft", "eyeLookUpRight", "eyeSquintLeft", "eyeSquintRight",
    "eyeWideLeft", "eyeWideRight",
    "jawForward", "jawLeft", "jawOpen", "jawRight",
    "mouthClose", "mouthDimpleLeft", "mouthDimpleRight", "mouthFrownLeft", "mouthFrownRight", "mouthFunnel",
    "mouthLeft", "mouthLowerDownLeft", "mouthLowerDownRight", "mouthPressLeft", "mouthPressRight", "mouthPucker",
    "mouthRight", "mouthRollLower", "mouthRollUpper", "mouthShrugLower", "mouthShrugUpper", "mouthSmileLeft",
    "mouthSmileRight", "mouthStretchLeft", "mouthStretchRight", "mouthUpperUpLeft", "mouthUpperUpRight",
    "noseSneerLeft", "noseSneerRight", "tongueOut",
)
_CHANNEL_SET = frozenset(CHANNELS)
MODES = ("translate_x", "translate_y", "scale_x", "scale_y", "uniform_scale")
PIVOTS = ("anchor", "top_edge", "bottom_edge")


@dataclass
class ExpressionFrame:
    channels: dict = field(default_factory=dict)
    time: float = 0.0

    def __post_init__(self):
        unknown = [k for k in self.channels if k not in _CHANNEL_SET]
        if unknown:
            raise MappingError(f"unknown expression channels: {unknown}")
        self.channels = {k: float(np.clip(v, 0.0, 1.0)) for k, v in self.channels.items()}

    def value(self, name):
        return self.channels.get(name, 0.0)

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d.get("channels", {})), float(d.get("time", 0.0)))


class Rule(NamedTuple):
    channel: str
    layer: str
    mode: str
    gain: float
    pivot: str = "anchor"


@dataclass
class ExpressionMapping:
    """Translate gains are fractions of the canvas size; scale gains are unitless."""

    rules: list = field(default_factory=list)

    def check(self, rig):
        layers = rig.layers
        for k, r in enumerate(self.rules):
            if r.layer not in layers:
                raise MappingError(f"rules[{k}]: unknown layer '{r.layer}'")


def _rule_from_dict(d, where):
    try:
        rule = Rule(d["channel"], d["layer"], d["mode"], float(d["gain"]), d.get("pivot", "anchor"))
    except KeyError as exc:
        raise MappingError(f"{where}: missing field {exc}") from None
    except (TypeError, ValueError):
        raise MappingError(f"{where}: gain must be a number") from None
    if rule.channel not in _CHANNEL_SET:
        raise MappingError(f"{where}: unknown channel '{rule.channel}'")
    if rule.mode not in MODES:
        raise MappingError(f"{where}: unknown mode '{rule.mode}'")
    if rule.pivot not in PIVOTS:
        raise MappingError(f"{where}: unknown pivot '{rule.pivot}'")
    if not np.isfinite(rule.gain):
        raise MappingError(f"{where}: gain must be finite")
    return rule


def mapping_from_json(data, source="<mapping>", rig=None):
    rules_in = data["rules"] if isinstance(data, dict) else data
    rules = [_rule_from_dict(d, f"{source}: rules[{k}]") for k, d in enumerate(rules_in)]
    mapping = ExpressionMapping(rules)
    if rig is not None:
        layers = rig.layers
        for k, r in enumerate(rules):
            if r.layer not in layers:
                raise MappingError(f"{source}: rules[{k}]: unknown layer '{r.layer}'")
    return mapping


def load_mapping(path=None, rig=None):
    """Read a rule list; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("toonrig").joinpath("data/default_mapping.json").read_text(encoding="utf-8")
        source = "default_mapping.json"
    else:
        text = Path(path).read_text(encoding="utf-8")
        source = str(path)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MappingError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return mapping_from_json(data, source, rig)


def load_timeline(path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    frames = [ExpressionFrame.from_dict(d) for d in data]
    times = [f.time for f in frames]
    if times != sorted(times):
        raise MappingError("timeline frames must be sorted by time")
    return frames


def _pivot(points, anchor, kind):
    if kind == "anchor":
        return anchor
    cx = (points[:, 0].min() + points[:, 0].max()) / 2
    y = points[:, 1].min() if kind == "top_edge" else points[:, 1].max()
    return np.array([cx, y])


def rule_displacement(rule, value, points, anchor, canvas_size):
    """Displacement one rule adds at channel ``value`` to ``points`` (fitted positions)."""
    amount = value * rule.gain
    d = np.zeros_like(points)
    if rule.mode == "translate_x":
        d[:, 0] = amount * canvas_size
    elif rule.mode == "translate_y":
        d[:, 1] = amount * canvas_size
    else:
        rel = points - _pivot(points, anchor, rule.pivot)
        if rule.mode in ("scale_x", "uniform_scale"):
            d[:, 0] = amount * rel[:, 0]
        if rule.mode in ("scale_y", "uniform_scale"):
            d[:, 1] = amount * rel[:, 1]
    return d


def apply_expression(rig, fitted, frame, mapping):
    """Fitted geometry plus the additive overlay of every active rule."""
    geo = compose_geometry(rig, fitted)
    layers = rig.layers
    overlay = {}
    for k, rule in enumerate(mapping.rules):
        if rule.layer not in layers:
            raise MappingError(f"rules[{k}]: unknown layer '{rule.layer}'")
        v = frame.value(rule.channel)
        if v == 0.0:
            continue
        layer = layers[rule.layer]
        base = geo[rule.layer]
        if hasattr(layer, "anchor") and layer.anchor is not None:
            c = layer
            wx, wy, ws = (fitted.get((c.id, a), 0.0) for a in ("x", "y", "scale"))
            anchor = c.anchor + c.displacement(wx, wy, ws, c.anchor[None, :])[0]
        else:
            anchor = base.mean(axis=0)
        d = rule_displacement(rule, v, base, anchor, rig.canvas_size)
        overlay[rule.layer] = overlay.get(rule.layer, 0.0) + d
    for lid, d in overlay.items():
        geo[lid] = geo[lid] + d
    return geo


def render_frame(package, frame, mapping):
    geo = apply_expression(package.rig, package.fitted_params, frame, mapping)
    return render_geometry(package.rig, package.atlas, geo)


def render_timeline(package, frames, mapping):
    times = [f.time for f in frames]
    if times != sorted(times):
        raise MappingError("frames must be sorted by time")
    return [render_frame(package, f, mapping) for f in frames]
