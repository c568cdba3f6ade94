"""Run configuration, output headers, and the on-disk document formats.

Every artifact embeds a header {tool_version, config_hash, seed} and a
schema version. Documents are written as compact JSON with a trailing
newline; reruns with identical config and seed are byte-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional

from . import __version__ as TOOL_VERSION
from .denoiser import BiasConfig, DenoiserConfig, TrainConfig
from .errors import SchemaError, ValidationError
from .evaluate import MatchCriterion
from .geom import Box3D
from .imcv import ImcvConfig, Proposal
from .scene import SceneConfig, SeekerNoiseConfig, get_category

MANIFEST_VERSION = 1
PROPOSALS_VERSION = 1


# ---------------------------------------------------------------------------
# json plumbing


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:12]


def make_header(resolved_config: Any, seed: int) -> dict:
    return {
        "tool_version": TOOL_VERSION,
        "config_hash": config_hash(resolved_config),
        "seed": int(seed),
    }


def write_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, allow_nan=False, separators=(",", ":"))
        f.write("\n")


def read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}") from e
    except FileNotFoundError:
        raise SchemaError(f"{path}: file not found") from None


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RefineConfig:
    """Refinement-stage settings; None falls back to the checkpoint's values."""

    s_steps: Optional[int] = None
    eta: Optional[float] = None
    t_start: Optional[int] = None
    w_iou: float = 0.6
    w_seeker: float = 0.4


@dataclass
class EvalConfig:
    criterion: str = "iou"
    threshold: float = 0.25

    def to_criterion(self) -> MatchCriterion:
        return MatchCriterion(kind=self.criterion, threshold=self.threshold)


@dataclass
class RunConfig:
    """One config document with per-stage blocks plus the global seed."""

    seed: int = 0
    out_dir: Optional[str] = None
    scene: SceneConfig = field(default_factory=SceneConfig)
    seeker: SeekerNoiseConfig = field(default_factory=SeekerNoiseConfig)
    imcv: ImcvConfig = field(default_factory=ImcvConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_OPTIONAL_INT_FIELDS = {"s_steps", "t_start"}
_OPTIONAL_FLOAT_FIELDS = {"eta"}


def _coerce_scalar(value, target, path: str):
    if target is bool:
        if not isinstance(value, bool):
            raise ValidationError(f"{path}: expected a boolean")
        return value
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{path}: expected an integer")
        return value
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{path}: expected a number")
        return float(value)
    if target is str:
        if not isinstance(value, str):
            raise ValidationError(f"{path}: expected a string")
        return value
    return value


def _build_dataclass(cls, data, path: str):
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ValidationError(f"{path}.{key}: unknown key")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        value = data[name]
        fpath = f"{path}.{name}"
        if name == "counts":
            if not isinstance(value, dict):
                raise ValidationError(f"{fpath}: expected an object of category counts")
            kwargs[name] = {
                k: _coerce_scalar(v, int, f"{fpath}.{k}") for k, v in value.items()
            }
        elif value is None and (name in _OPTIONAL_INT_FIELDS or name in _OPTIONAL_FLOAT_FIELDS or name == "out_dir"):
            kwargs[name] = None
        elif name in _OPTIONAL_INT_FIELDS:
            kwargs[name] = _coerce_scalar(value, int, fpath)
        elif name in _OPTIONAL_FLOAT_FIELDS:
            kwargs[name] = _coerce_scalar(value, float, fpath)
        elif isinstance(f.default, bool) or (f.default is dataclasses.MISSING and f.type == "bool"):
            kwargs[name] = _coerce_scalar(value, bool, fpath)
        elif isinstance(f.default, int) and not isinstance(f.default, bool):
            kwargs[name] = _coerce_scalar(value, int, fpath)
        elif isinstance(f.default, float):
            kwargs[name] = _coerce_scalar(value, float, fpath)
        elif isinstance(f.default, str):
            kwargs[name] = _coerce_scalar(value, str, fpath)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"{path}: {e}") from e


_BLOCK_TYPES = {
    "scene": SceneConfig,
    "seeker": SeekerNoiseConfig,
    "imcv": ImcvConfig,
    "model": DenoiserConfig,
    "train": TrainConfig,
    "refine": RefineConfig,
    "eval": EvalConfig,
}


def run_config_from_dict(doc: dict, path: str = "config") -> RunConfig:
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: expected an object")
    known = {"seed", "out_dir"} | set(_BLOCK_TYPES)
    for key in doc:
        if key not in known:
            raise ValidationError(f"{path}.{key}: unknown key")
    cfg = RunConfig()
    if "seed" in doc:
        cfg.seed = _coerce_scalar(doc["seed"], int, f"{path}.seed")
    if "out_dir" in doc and doc["out_dir"] is not None:
        cfg.out_dir = _coerce_scalar(doc["out_dir"], str, f"{path}.out_dir")
    for name, cls in _BLOCK_TYPES.items():
        if name in doc:
            setattr(cfg, name, _build_dataclass(cls, doc[name], f"{path}.{name}"))
    return cfg


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply `a.b.c=value` assignments to a raw config dict; values are
    parsed as JSON, falling back to the literal string."""
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ValidationError(f"--set {key}: {p} is not an object")
            node = nxt
        node[parts[-1]] = value
    return doc


def resolved_config_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out.pop("out_dir", None)
    return out


# ---------------------------------------------------------------------------
# box / proposal documents


def box3d_to_dict(box: Box3D) -> dict:
    return {"center": list(box.center), "size": list(box.size), "yaw": box.yaw}


def box3d_from_dict(d: dict, path: str) -> Box3D:
    for key in ("center", "size", "yaw"):
        if key not in d:
            raise SchemaError(f"{path}.{key}: missing")
    return Box3D(tuple(d["center"]), tuple(d["size"]), float(d["yaw"]))


def proposal_to_dict(p: Proposal) -> dict:
    return {
        "box": box3d_to_dict(p.box),
        "category": p.category.name,
        "scores": {"geo": p.s_geo, "iou": p.s_iou, "pts": p.s_pts, "total": p.s_total},
        "seeker_score": p.seeker_score,
        "source": {"view": p.view, "det_index": p.det_index},
    }


def proposal_from_dict(d: dict, path: str) -> Proposal:
    for key in ("box", "category", "scores", "seeker_score", "source"):
        if key not in d:
            raise SchemaError(f"{path}.{key}: missing")
    scores = d["scores"]
    src = d["source"]
    return Proposal(
        box=box3d_from_dict(d["box"], f"{path}.box"),
        category=get_category(d["category"]),
        s_geo=float(scores.get("geo", 0.0)),
        s_iou=float(scores["iou"]),
        s_pts=float(scores["pts"]),
        s_total=float(scores["total"]),
        seeker_score=float(d["seeker_score"]),
        view=int(src["view"]),
        det_index=int(src["det_index"]),
    )


def write_proposals_file(
    path, scene_file: str, proposals: list[Proposal], diagnostics: list[dict], header: dict
) -> None:
    write_json(
        path,
        {
            "version": PROPOSALS_VERSION,
            "kind": "proposals",
            "header": header,
            "scene_file": scene_file,
            "proposals": [proposal_to_dict(p) for p in proposals],
            "diagnostics": diagnostics,
        },
    )


def read_proposals_file(path) -> tuple[str, list[Proposal], list[dict], list[Optional[dict]]]:
    """Load a proposals or refined-proposals file.

    Returns (scene_file, proposals, diagnostics, refinements) where each
    refinement is None for a plain proposals file, or a dict with
    refined_box / iou_conf / fused_score for a refined one.
    """
    doc = read_json(path)
    if doc.get("kind") not in ("proposals", "refined"):
        raise SchemaError(f"{path}: not a proposals document")
    if doc.get("version") != PROPOSALS_VERSION:
        raise SchemaError(f"{path}: unsupported proposals version {doc.get('version')}")
    scene_file = doc.get("scene_file")
    if scene_file is None:
        raise SchemaError(f"{path}.scene_file: missing")
    proposals = []
    refinements: list[Optional[dict]] = []
    for i, pd in enumerate(doc.get("proposals", [])):
        p = f"{path}.proposals[{i}]"
        proposals.append(proposal_from_dict(pd, p))
        if "refined_box" in pd:
            refinements.append(
                {
                    "refined_box": box3d_from_dict(pd["refined_box"], f"{p}.refined_box"),
                    "iou_conf": float(pd["iou_conf"]),
                    "fused_score": float(pd["fused_score"]),
                }
            )
        else:
            refinements.append(None)
    return scene_file, proposals, doc.get("diagnostics", []), refinements


def write_refined_file(
    path,
    scene_file: str,
    proposals: list[Proposal],
    refinements: list[dict],
    header: dict,
) -> None:
    entries = []
    for p, r in zip(proposals, refinements):
        entry = proposal_to_dict(p)
        entry["refined_box"] = box3d_to_dict(r["refined_box"])
        entry["iou_conf"] = r["iou_conf"]
        entry["fused_score"] = r["fused_score"]
        if r.get("out_of_extent"):
            entry["out_of_extent"] = True
        entries.append(entry)
    write_json(
        path,
        {
            "version": PROPOSALS_VERSION,
            "kind": "refined",
            "header": header,
            "scene_file": scene_file,
            "proposals": entries,
        },
    )


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, kind: str, header: dict, body: dict) -> None:
    doc = {"version": MANIFEST_VERSION, "kind": kind, "header": header}
    doc.update(body)
    write_json(path, doc)


def read_manifest(path, kind: str) -> dict:
    doc = read_json(path)
    if doc.get("kind") != kind:
        raise SchemaError(f"{path}: expected a {kind} document, got {doc.get('kind')!r}")
    if doc.get("version") != MANIFEST_VERSION:
        raise SchemaError(f"{path}: unsupported manifest version {doc.get('version')}")
    return doc
