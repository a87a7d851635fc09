"""Plain-text run configuration (INI ``key = value`` with sections).

Example::

    [model]
    family = c4
    size = small
    input_hw = 64

    [train]
    dataset = kvasir        ; Table-3 preset, explicit keys below override it
    n_epochs = 30

    [data]
    source = synthetic
    n_images = 200

    [dataset:mydata]        ; extra per-dataset hyperparameter sections
    batch_size = 4
    learning_rate = 5e-4
    n_epochs = 100

Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import PatchSpec, SamplePair, SyntheticSpec, extract_patches, load_folder_dataset, resize_to_input, synth_generate
from .training import DATASET_PRESETS, TrainConfig
from .unet import ArchConfig, preset


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _opt_float(v: str):
    return None if v.strip().lower() in ("", "none") else float(v)


def _orientation(v: str):
    return "uniform" if v.strip().lower() == "uniform" else float(v)


def _folds(v: str) -> tuple[int, ...]:
    return tuple(int(p) for p in v.replace(",", " ").split())


SCHEMA: dict[str, dict[str, object]] = {
    "model": {
        "family": str, "size": str, "lambda": _opt_float, "kernel_size": int,
        "in_channels": int, "n_classes": int, "input_hw": int, "pool_mode": str, "seed": int,
    },
    "train": {
        "dataset": str, "batch_size": int, "learning_rate": float, "n_epochs": int, "seed": int,
        "data_setting": str, "weight_decay": float, "augment": _bool, "folds": _folds,
        "eval_every": int,
    },
    "data": {
        "source": str, "manifest": str, "n_images": int, "image_size": int,
        "noise_level": float, "orientation": _orientation, "cell_px": int, "seed": int,
    },
}
DATASET_KEYS = {"batch_size": int, "learning_rate": float, "n_epochs": int}

DEFAULTS = {
    "model": {"family": "vanilla", "size": "small", "input_hw": "64", "n_classes": "1", "seed": "0"},
    "train": {"batch_size": "8", "learning_rate": "1e-4", "n_epochs": "30", "seed": "0",
              "data_setting": "large", "folds": "0 1 2 3 4", "eval_every": "1"},
    "data": {"source": "synthetic", "n_images": "200", "image_size": "64", "noise_level": "0.1",
             "orientation": "uniform", "cell_px": "6", "seed": "0"},
}


@dataclass
class RunConfig:
    arch: ArchConfig
    train: TrainConfig
    folds: tuple[int, ...]
    model_seed: int
    eval_every: int
    data: dict = field(default_factory=dict)
    dataset_presets: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def cell_name(self) -> str:
        return f"{self.arch.family}-{self.arch.size}-{self.train.data_setting}"


def parse_overrides(items: list[str] | None) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = key.strip().split(".", 1)
        out.setdefault(section, {})[name] = value.strip()
    return out


def _typed(section: str, raw: dict[str, str], schema: dict) -> dict:
    out = {}
    for k, v in raw.items():
        if k not in schema:
            raise ConfigError(f"unknown key {section}.{k}")
        try:
            out[k] = schema[k](v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {section}.{k}: {v!r} ({exc})") from None
    return out


def load_run_config(path=None, overrides: list[str] | None = None, seed: int | None = None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.read_dict(DEFAULTS)
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        parser.read(path)
        base = path.parent
    for section, kv in parse_overrides(overrides).items():
        if not parser.has_section(section):
            parser.add_section(section)
        for k, v in kv.items():
            parser.set(section, k, v)

    sections: dict[str, dict] = {}
    extra_presets: dict[str, TrainConfig] = {}
    for section in parser.sections():
        raw = dict(parser.items(section, raw=True))
        if section.startswith("dataset:"):
            vals = _typed(section, raw, DATASET_KEYS)
            extra_presets[section.split(":", 1)[1]] = TrainConfig(**vals)
        elif section in SCHEMA:
            sections[section] = _typed(section, raw, SCHEMA[section])
        else:
            raise ConfigError(f"unknown section [{section}]")

    m = sections["model"]
    arch_kwargs = {k: m[k] for k in ("kernel_size", "in_channels", "n_classes", "input_hw", "pool_mode") if k in m}
    try:
        if "lambda" in m and m["lambda"] is not None:
            arch = ArchConfig(family=m["family"], size=m["size"], lam=m["lambda"], **arch_kwargs)
        else:
            arch = preset(m["family"], m["size"], **arch_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    t = dict(sections["train"])
    presets = {**DATASET_PRESETS, **extra_presets}
    base_train = TrainConfig()
    ds_name = t.pop("dataset", None)
    if ds_name is not None:
        if ds_name not in presets:
            raise ConfigError(f"unknown dataset preset {ds_name!r}")
        base_train = presets[ds_name]
        # explicit hyperparameters in the file override the preset
        explicit = set(parser["train"].keys()) - set(DEFAULTS["train"]) | _explicit_keys(path, overrides, "train")
        t = {k: v for k, v in t.items() if k in explicit or k not in DATASET_KEYS}
    folds = t.pop("folds")
    eval_every = t.pop("eval_every")
    if seed is not None:
        t["seed"] = seed
    try:
        train = replace(base_train, **t)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    model_seed = m["seed"] if seed is None else seed
    if any(f < 0 or f >= 5 for f in folds):
        raise ConfigError("fold indices must lie in 0..4")
    return RunConfig(arch, train, folds, model_seed, eval_every, sections["data"], presets, base)


def _explicit_keys(path, overrides, section: str) -> set[str]:
    keys: set[str] = set()
    if path is not None:
        p = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        p.read(path)
        if p.has_section(section):
            keys |= set(p[section].keys())
    keys |= set(parse_overrides(overrides).get(section, {}))
    return keys


# -- dataset manifests --------------------------------------------------------

MANIFEST_KEYS = {
    "images_dir": str, "masks_dir": str, "class_map": str, "color_mean": str, "color_std": str,
    "patch_size": int, "patches_per_image": int, "patch_seed": int, "input_hw": int, "split_by": str,
}


@dataclass
class DatasetManifest:
    images_dir: Path
    masks_dir: Path
    class_map: dict | None = None
    color_mean: tuple[float, ...] | None = None
    color_std: tuple[float, ...] | None = None
    patch: PatchSpec | None = None
    input_hw: int | None = None
    split_by: str = "source"


def parse_class_map(text: str) -> dict:
    """``"0:0, 255:1"`` or ``"0 0 0:0; 255 0 0:1"`` (RGB keys)."""
    out: dict = {}
    sep = ";" if ";" in text else ","
    for part in text.split(sep):
        part = part.strip()
        if not part:
            continue
        key, idx = part.rsplit(":", 1)
        nums = tuple(int(v) for v in key.replace(",", " ").split())
        out[nums[0] if len(nums) == 1 else nums] = int(idx)
    return out


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not parser.read(path):
        raise ConfigError(f"manifest {path} not found")
    if parser.sections() != ["dataset"]:
        raise ConfigError("manifest must contain exactly one [dataset] section")
    raw = _typed("dataset", dict(parser["dataset"]), MANIFEST_KEYS)
    for req in ("images_dir", "masks_dir"):
        if req not in raw:
            raise ConfigError(f"manifest is missing {req}")
    patch = None
    if "patch_size" in raw:
        patch = PatchSpec(raw["patch_size"], raw.get("patches_per_image", 30), raw.get("patch_seed", 0))
    split_by = raw.get("split_by", "source")
    if split_by not in ("source", "patch"):
        raise ConfigError("split_by must be 'source' or 'patch'")
    return DatasetManifest(
        images_dir=path.parent / raw["images_dir"],
        masks_dir=path.parent / raw["masks_dir"],
        class_map=parse_class_map(raw["class_map"]) if "class_map" in raw else None,
        color_mean=_floats(raw["color_mean"]) if "color_mean" in raw else None,
        color_std=_floats(raw["color_std"]) if "color_std" in raw else None,
        patch=patch,
        input_hw=raw.get("input_hw"),
        split_by=split_by,
    )


def load_dataset(rc: RunConfig) -> tuple[list[SamplePair], DatasetManifest | None]:
    """Materialise the dataset named in ``[data]``."""
    d = rc.data
    if d["source"] == "synthetic":
        spec = SyntheticSpec(
            n_images=d["n_images"], image_size=d["image_size"], noise_level=d["noise_level"],
            orientation=d["orientation"], cell_px=d["cell_px"], seed=d["seed"],
        )
        return synth_generate(spec), None
    if d["source"] != "manifest":
        raise ConfigError(f"unknown data source {d['source']!r}")
    if "manifest" not in d:
        raise ConfigError("data.source = manifest needs data.manifest")
    man = load_manifest(rc.base_dir / d["manifest"])
    pairs = load_folder_dataset(man.images_dir, man.masks_dir, man.class_map)
    if man.patch is not None:
        pairs = [p for pair in pairs for p in extract_patches(pair, man.patch)]
    hw = man.input_hw or rc.arch.input_hw
    pairs = [resize_to_input(p, hw) for p in pairs]
    if man.split_by == "patch":
        for p in pairs:
            p.meta["source"] = p.id
    return pairs, man


def color_norm_from(man: DatasetManifest | None):
    if man is None or man.color_mean is None or man.color_std is None:
        return None
    return np.asarray(man.color_mean), np.asarray(man.color_std)
