"""Run configuration: one JSON file drives every command.

The file has four sections.  ``dataset`` names the data source (synthetic
recipe or binary file paths plus geometry), ``distill`` holds the
optimization settings, ``eval`` the downstream protocol, and optional
top-level keys point at the embeddings file and output directory.
Validation happens here, before any compute, and raises ConfigError so
the CLI can map bad configs to a distinct exit code.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from typing import Any

from .data import LabeledDataset, SyntheticSpec, generate_synthetic, load_binary_dataset
from .distillation import DistillConfig
from .evaluation import EvalProtocol
from .geometry import DatasetMeta, extraction_spec, poster_dims
from .seeding import derive_seed

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "parse_config",
    "apply_overrides",
    "load_datasets",
    "resolved_geometry",
    "default_run_root",
    "make_run_dir",
    "RUN_ROOT_ENV",
]

RUN_ROOT_ENV = "PODD_RUN_ROOT"


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


def _require(section: dict, key: str, where: str) -> Any:
    if key not in section:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return section[key]


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


_DATASET_KEYS = {
    "kind",
    "n_classes",
    "image_h",
    "image_w",
    "channels",
    "class_names",
    "per_class",
    "test_per_class",
    "signal",
    "noise",
    "seed",
    "train_path",
    "test_path",
}
_DISTILL_KEYS = {
    "ipc",
    "class_rows",
    "class_cols",
    "patch_rows",
    "patch_cols",
    "label_mode",
    "unroll_steps",
    "backprop_window",
    "distilled_batch_size",
    "data_batch_size",
    "inner_lr",
    "outer_lr",
    "epochs",
    "seed",
    "inner_depth",
    "inner_width",
    "outer_optimizer",
    "checkpoint_every",
}
_EVAL_KEYS = {
    "n_models",
    "train_budget",
    "learning_rate",
    "batch_size",
    "depth",
    "width",
    "seed",
    "plateau_patience",
}
_TOP_KEYS = {"dataset", "distill", "eval", "embeddings_path", "output_dir"}


@dataclass(frozen=True)
class RunConfig:
    raw: dict[str, Any]
    meta: DatasetMeta
    dataset_kind: str
    synthetic: SyntheticSpec | None
    train_path: str | None
    test_path: str | None
    distill: DistillConfig
    protocol: EvalProtocol
    embeddings_path: str | None
    output_dir: str | None


def _default_depth(image_h: int) -> int:
    return 4 if image_h >= 64 else 3


def _parse_dataset(section: dict) -> tuple[DatasetMeta, str, SyntheticSpec | None, str | None, str | None]:
    _check_keys(section, _DATASET_KEYS, "dataset")
    kind = _require(section, "kind", "dataset")
    if kind == "synthetic":
        fields = {
            k: section[k]
            for k in (
                "n_classes",
                "image_h",
                "image_w",
                "channels",
                "per_class",
                "test_per_class",
                "signal",
                "noise",
                "seed",
            )
            if k in section
        }
        try:
            spec = SyntheticSpec(**fields)
        except ValueError as e:
            raise ConfigError(f"dataset: {e}") from None
        return spec.meta, kind, spec, None, None
    if kind == "binary":
        try:
            meta = DatasetMeta(
                n_classes=_require(section, "n_classes", "dataset"),
                image_h=_require(section, "image_h", "dataset"),
                image_w=_require(section, "image_w", "dataset"),
                channels=section.get("channels", 3),
                class_names=tuple(section.get("class_names", ())),
            )
        except ValueError as e:
            raise ConfigError(f"dataset: {e}") from None
        train = _require(section, "train_path", "dataset")
        test = _require(section, "test_path", "dataset")
        return meta, kind, None, train, test
    raise ConfigError(f"dataset: kind must be 'synthetic' or 'binary', got {kind!r}")


def parse_config(raw: dict[str, Any]) -> RunConfig:
    """Validate a parsed JSON config and resolve every derived object."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config")
    meta, kind, synthetic, train_path, test_path = _parse_dataset(
        _require(raw, "dataset", "config")
    )

    section = dict(_require(raw, "distill", "config"))
    _check_keys(section, _DISTILL_KEYS, "distill")
    section.setdefault("inner_depth", _default_depth(meta.image_h))
    if section["inner_depth"] not in (3, 4):
        raise ConfigError(f"distill: inner_depth must be 3 or 4, got {section['inner_depth']}")
    try:
        distill_cfg = DistillConfig(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"distill: {e}") from None
    if distill_cfg.class_rows * distill_cfg.class_cols != meta.n_classes:
        raise ConfigError(
            f"distill: class grid {distill_cfg.class_rows}x{distill_cfg.class_cols} "
            f"does not hold {meta.n_classes} classes"
        )
    try:
        resolved_geometry(meta, distill_cfg)
    except ValueError as e:
        raise ConfigError(f"distill: {e}") from None

    eval_section = dict(raw.get("eval", {}))
    _check_keys(eval_section, _EVAL_KEYS, "eval")
    eval_section.setdefault("depth", distill_cfg.inner_depth)
    eval_section.setdefault("width", distill_cfg.inner_width)
    eval_section.setdefault("learning_rate", distill_cfg.inner_lr)
    eval_section.setdefault("seed", derive_seed(distill_cfg.seed, "eval"))
    if eval_section["depth"] not in (3, 4):
        raise ConfigError(f"eval: depth must be 3 or 4, got {eval_section['depth']}")
    try:
        protocol = EvalProtocol(**eval_section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"eval: {e}") from None

    return RunConfig(
        raw=raw,
        meta=meta,
        dataset_kind=kind,
        synthetic=synthetic,
        train_path=train_path,
        test_path=test_path,
        distill=distill_cfg,
        protocol=protocol,
        embeddings_path=raw.get("embeddings_path"),
        output_dir=raw.get("output_dir"),
    )


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from None
    return parse_config(raw)


def apply_overrides(raw: dict[str, Any], overrides: tuple[str, ...]) -> dict[str, Any]:
    """Apply ``section.key=value`` overrides; values parse as JSON, else strings."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = out
        *parents, last = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part!r} is not a section")
        node[last] = parsed
    return out


def load_datasets(config: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if config.dataset_kind == "synthetic":
        return generate_synthetic(config.synthetic)
    try:
        train = load_binary_dataset(config.train_path, config.meta, split="train")
        test = load_binary_dataset(config.test_path, config.meta, split="test")
    except (OSError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return train, test


def resolved_geometry(meta: DatasetMeta, cfg: DistillConfig) -> dict[str, Any]:
    """Derived geometry for validation and the info command."""
    d_h, d_w = poster_dims(meta, cfg.ipc, (cfg.class_rows, cfg.class_cols))
    spec = extraction_spec(
        d_h,
        d_w,
        patch_h=meta.image_h,
        patch_w=meta.image_w,
        grid_rows=cfg.patch_rows,
        grid_cols=cfg.patch_cols,
    )
    if cfg.distilled_batch_size > spec.n_patches:
        raise ValueError(
            f"distilled_batch_size {cfg.distilled_batch_size} exceeds {spec.n_patches} patches"
        )
    return {
        "poster_h": d_h,
        "poster_w": d_w,
        "poster_pixels": d_h * d_w,
        "n_patches": spec.n_patches,
        "patch_h": spec.patch_h,
        "patch_w": spec.patch_w,
        "label_parameters": meta.n_classes * cfg.class_rows * cfg.class_cols,
    }


def default_run_root() -> str:
    return os.environ.get(RUN_ROOT_ENV, os.path.join(os.getcwd(), "runs"))


def make_run_dir(config_digest: str, output_dir: str | None) -> str:
    """Run directory named by config hash plus timestamp, under the run root."""
    if output_dir is not None:
        os.makedirs(output_dir, exist_ok=True)
        return output_dir
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = os.path.join(default_run_root(), f"{config_digest}-{stamp}")
    os.makedirs(path, exist_ok=True)
    return path
