"""Pipeline configuration: YAML file + dotted-path overrides.

The config file is optional (everything has a default). Unknown keys are
rejected with their dotted location so typos surface immediately instead of
silently falling back to defaults. The environment variable APCAP_CONFIG
supplies the default config path; explicit paths and per-flag overrides win
over it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import yaml

from .backend import BackendDescriptor, BackendKind
from .conditioning import (
    DEFAULT_DESCRIPTOR_POOLS,
    DEFAULT_QUESTION_VARIANTS,
    DEFAULT_TEMPLATE,
    MapStyle,
)
from .dataset import CrossDomainSpec
from .perturb import PerturbConfig
from .schema import KeypointSchema, load_schema
from .screening import FilterConfig

ENV_CONFIG_PATH = "APCAP_CONFIG"

REDETECTORS = ("mock_markers", "none")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PromptDefaults:
    """Prompt settings shared by every category; the category itself comes
    from each sample at synthesis time."""

    template: str = DEFAULT_TEMPLATE
    descriptor_pools: dict = field(default_factory=lambda: dict(DEFAULT_DESCRIPTOR_POOLS))
    question_variants: tuple = DEFAULT_QUESTION_VARIANTS


@dataclass(frozen=True)
class ScreeningConfig:
    filter: FilterConfig = field(default_factory=FilterConfig)
    redetector: str = "mock_markers"
    ce_use_pose_map: bool = True

    def __post_init__(self):
        if self.redetector not in REDETECTORS:
            raise ConfigError(
                f"screening.redetector must be one of {REDETECTORS}, "
                f"got {self.redetector!r}"
            )


@dataclass(frozen=True)
class PipelineConfig:
    schema_selector: str = "ap10k17"
    seed: int = 0
    resolution: tuple[int, int] = (256, 256)
    out_dir: str = "out"
    images_dir: str | None = None
    pose_map_style: MapStyle = MapStyle.SKELETON_LINES
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    prompt: PromptDefaults = field(default_factory=PromptDefaults)
    backend: BackendDescriptor = field(
        default_factory=lambda: BackendDescriptor(kind=BackendKind.MOCK)
    )
    screening: ScreeningConfig = field(default_factory=ScreeningConfig)
    cross_domain: CrossDomainSpec | None = None

    def load_keypoint_schema(self, search_dir: str | None = None) -> KeypointSchema:
        return load_schema(self.schema_selector, search_dir)


def _take(table: dict, key: str, default, where: str):
    return table.pop(key, default)


def _no_extra_keys(table: dict, where: str) -> None:
    if table:
        key = sorted(table)[0]
        dotted = f"{where}.{key}" if where else key
        raise ConfigError(f"unknown config key {dotted!r}")


def _parse_perturb(table: dict, where: str) -> PerturbConfig:
    cfg = PerturbConfig(
        face_move_max=_take(table, "face_move_max", None, where),
        joint_flex_max_deg=float(_take(table, "joint_flex_max_deg", 15.0, where)),
        back_rotate_max_deg=float(_take(table, "back_rotate_max_deg", 10.0, where)),
        close_limb_threshold=float(_take(table, "close_limb_threshold", 0.05, where)),
        rng_seed=int(_take(table, "rng_seed", 0, where)),
    )
    _no_extra_keys(table, where)
    return cfg


def _parse_prompt(table: dict, where: str) -> PromptDefaults:
    pools = _take(table, "descriptor_pools", None, where)
    if pools is not None:
        if not isinstance(pools, dict):
            raise ConfigError(f"{where}.descriptor_pools must be a mapping")
        pools = {str(k): tuple(str(d) for d in v) for k, v in pools.items()}
    variants = _take(table, "question_variants", None, where)
    if variants is not None:
        variants = tuple(str(v) for v in variants)
    cfg = PromptDefaults(
        template=str(_take(table, "template", DEFAULT_TEMPLATE, where)),
        descriptor_pools=pools if pools is not None else dict(DEFAULT_DESCRIPTOR_POOLS),
        question_variants=variants if variants is not None else DEFAULT_QUESTION_VARIANTS,
    )
    _no_extra_keys(table, where)
    return cfg


def _parse_backend(table: dict, where: str) -> BackendDescriptor:
    kind_raw = str(_take(table, "kind", "mock", where))
    try:
        kind = BackendKind(kind_raw)
    except ValueError:
        raise ConfigError(f"{where}.kind must be 'mock' or 'remote', got {kind_raw!r}")
    cfg = BackendDescriptor(
        kind=kind,
        endpoint=_take(table, "endpoint", None, where),
        max_in_flight=int(_take(table, "max_in_flight", 4, where)),
        timeout_ms=float(_take(table, "timeout_ms", 10_000.0, where)),
        retries=int(_take(table, "retries", 2, where)),
    )
    _no_extra_keys(table, where)
    return cfg


def _parse_screening(table: dict, where: str) -> ScreeningConfig:
    cfg = ScreeningConfig(
        filter=FilterConfig(
            epsilon=float(_take(table, "epsilon", 0.1, where)),
            oks_accept=float(_take(table, "oks_accept", 0.7, where)),
        ),
        redetector=str(_take(table, "redetector", "mock_markers", where)),
        ce_use_pose_map=bool(_take(table, "ce_use_pose_map", True, where)),
    )
    _no_extra_keys(table, where)
    return cfg


def _parse_cross_domain(table: dict, where: str) -> CrossDomainSpec:
    source = _take(table, "source_categories", None, where)
    target = _take(table, "target_categories", None, where)
    if not source or not target:
        raise ConfigError(f"{where} needs source_categories and target_categories")
    ratio_raw = _take(table, "source_ratio", "1/3", where)
    if isinstance(ratio_raw, str):
        ratio = Fraction(ratio_raw)
    else:
        ratio = Fraction(ratio_raw).limit_denominator(1000)
    spec = CrossDomainSpec(
        source_categories=frozenset(str(c) for c in source),
        target_categories=frozenset(str(c) for c in target),
        source_ratio=ratio,
    )
    _no_extra_keys(table, where)
    return spec


def parse_config_dict(doc: dict, config_dir: Path | None = None) -> PipelineConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    doc = dict(doc)

    resolution_raw = _take(doc, "resolution", [256, 256], "")
    if not (isinstance(resolution_raw, (list, tuple)) and len(resolution_raw) == 2):
        raise ConfigError("resolution must be a [width, height] pair")
    style_raw = str(_take(doc, "pose_map_style", "skeleton_lines", ""))
    try:
        style = MapStyle(style_raw)
    except ValueError:
        raise ConfigError(
            f"pose_map_style must be 'skeleton_lines' or 'heatmap', got {style_raw!r}"
        )

    cross_raw = _take(doc, "cross_domain", None, "")
    cfg = PipelineConfig(
        schema_selector=str(_take(doc, "schema", "ap10k17", "")),
        seed=int(_take(doc, "seed", 0, "")),
        resolution=(int(resolution_raw[0]), int(resolution_raw[1])),
        out_dir=str(_take(doc, "out_dir", "out", "")),
        images_dir=_take(doc, "images_dir", None, ""),
        pose_map_style=style,
        perturb=_parse_perturb(dict(_take(doc, "perturb", {}, "") or {}), "perturb"),
        prompt=_parse_prompt(dict(_take(doc, "prompt", {}, "") or {}), "prompt"),
        backend=_parse_backend(dict(_take(doc, "backend", {}, "") or {}), "backend"),
        screening=_parse_screening(dict(_take(doc, "screening", {}, "") or {}), "screening"),
        cross_domain=(
            _parse_cross_domain(dict(cross_raw), "cross_domain")
            if cross_raw is not None
            else None
        ),
    )
    _no_extra_keys(doc, "")
    # A schema selector that is neither builtin nor resolvable relative to
    # the config file must fail at load, not at first use.
    try:
        load_schema(cfg.schema_selector, str(config_dir) if config_dir else None)
    except FileNotFoundError as e:
        raise ConfigError(f"schema {cfg.schema_selector!r} not found: {e}")
    return cfg


def apply_overrides(doc: dict, overrides: dict) -> dict:
    """Set dotted-path keys (values given as YAML literals) into a config doc."""
    out = dict(doc or {})
    for dotted, raw in overrides.items():
        value = yaml.safe_load(raw) if isinstance(raw, str) else raw
        parts = dotted.split(".")
        node = out
        for part in parts[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
            node[part] = dict(nxt)
            node = node[part]
        node[parts[-1]] = value
    return out


def load_config(
    path: str | os.PathLike | None = None,
    overrides: dict | None = None,
) -> PipelineConfig:
    """Load the pipeline config.

    Resolution order: explicit ``path`` argument, else $APCAP_CONFIG, else
    built-in defaults. ``overrides`` maps dotted keys (e.g.
    "backend.max_in_flight") to YAML-parsed values and wins over the file.
    """
    if path is None:
        env = os.environ.get(ENV_CONFIG_PATH)
        path = env if env else None
    doc: dict = {}
    config_dir: Path | None = None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {str(p)!r} does not exist")
        config_dir = p.parent
        try:
            loaded = yaml.safe_load(p.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {str(p)!r} is not valid YAML: {e}")
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError("config root must be a mapping")
        doc = loaded or {}
    if overrides:
        doc = apply_overrides(doc, overrides)
    return parse_config_dict(doc, config_dir)
