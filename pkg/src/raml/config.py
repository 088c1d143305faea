"""Flat key=value experiment configuration with named profiles and strict keys."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .dataio import SyntheticDatasetSpec, parse_kv_lines
from .errors import ConfigError
from .losses import ABS, LOSS_TERMS, REL_SS, REL_TS, LossWeights
from .retrieval import SETUP_KINDS
from .trainer import INIT_MODES, DistillConfig, TrainConfig

DESK = {
    "dataset.num_classes": "20",
    "dataset.images_per_class": "30",
    "dataset.base_resolution": "64",
    "dataset.channels": "3",
    "dataset.fine_signal_period": "4.0",
    "dataset.background_low": "0.15",
    "dataset.background_high": "0.6",
    "dataset.position_jitter": "6",
    "dataset.noise": "0.03",
    "dataset.seed": "0",
    "backbone.channels": "8,16,32,64",
    "backbone.gem_p": "3.0",
    "backbone.embed_dim": "64",
    "backbone.learnable_p": "0",
    "teacher.epochs": "40",
    "teacher.batch_classes": "8",
    "teacher.batch_per_class": "4",
    "teacher.examples_per_epoch": "8000",
    "teacher.max_lr": "0.003",
    "teacher.weight_decay": "0.01",
    "teacher.seed": "0",
    "teacher.scales": "1",
    "distill.epochs": "40",
    "distill.batch_size": "32",
    "distill.examples_per_epoch": "8000",
    "distill.augmentations": "8",
    "distill.max_lr": "0.006",
    "distill.weight_decay": "0.01",
    "distill.scales": "0.7,0.5,0.35",
    "distill.seeds": "0,1,2",
    "distill.coupled": "1",
    "distill.init_mode": "teacher_large",
    "distill.loss_mask": "all",
    "distill.lambda_t": "0.7",
    "distill.lambda_s": "0.7",
    "eval.setups": ",".join(SETUP_KINDS),
    "eval.scales": "0.7,0.5,0.35",
    "eval.flops_scales": "1,0.7,0.5,0.35",
    "ablate.scale": "0.5",
    "ablate.seeds": "0,1,2",
    "ablate.coupled": "1,0",
    "ablate.loss_masks": "abs-only,rel_ts-only,rel_ss-only,all",
    "ablate.init_modes": "teacher_large,fresh",
    "ablate.augmentations": "8",
    "ablate.epochs": "20",
}

FULL = dict(DESK)
FULL.update({
    "teacher.epochs": "200",
    "teacher.batch_classes": "20",
    "teacher.batch_per_class": "10",
    "distill.epochs": "200",
    "distill.batch_size": "200",
    "ablate.epochs": "200",
    "ablate.augmentations": "1,2,4,8,16",
})

PROFILES = {"desk": DESK, "full": FULL}

MASKS = {
    "all": LOSS_TERMS,
    "abs-only": (ABS,),
    "rel_ts-only": (REL_TS,),
    "rel_ss-only": (REL_SS,),
}


def parse_mask(name: str) -> tuple[str, ...]:
    if name in MASKS:
        return MASKS[name]
    terms = tuple(t for t in name.split("+") if t)
    if not terms or any(t not in LOSS_TERMS for t in terms):
        raise ConfigError(f"unknown loss mask {name!r}")
    return terms


def mask_name(terms) -> str:
    for name, value in MASKS.items():
        if tuple(terms) == value:
            return name
    return "+".join(terms)


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _strs(v: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in v.split(",") if x.strip())


@dataclass
class ExperimentConfig:
    values: dict[str, str]
    output_dir: Path = Path("runs")

    @classmethod
    def load(cls, path=None, profile: str = "desk", overrides: dict[str, str] | None = None,
             output_dir=None) -> "ExperimentConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        values = dict(PROFILES[profile])
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise FileNotFoundError(f"config file not found: {p}")
            text = p.read_text()
            parsed = parse_kv_lines(text, path=p)
            lines = {}
            for n, line in enumerate(text.splitlines(), 1):
                if "=" in line and not line.strip().startswith("#"):
                    lines[line.split("=", 1)[0].strip()] = n
            for key in parsed:
                if key not in values and key != "output_dir":
                    raise ConfigError(f"unknown key {key!r}", line=lines.get(key), path=p)
            if "output_dir" in parsed and output_dir is None:
                output_dir = parsed.pop("output_dir")
            parsed.pop("output_dir", None)
            values.update(parsed)
        for key, value in (overrides or {}).items():
            if key not in values:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = value
        cfg = cls(values, Path(output_dir) if output_dir is not None else Path("runs"))
        cfg.validate()
        return cfg

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in sorted(self.values.items()))

    def get(self, key: str) -> str:
        return self.values[key]

    def validate(self) -> None:
        try:
            self.dataset_spec()
            self.backbone()
            self.teacher_config()
            self.distill_config()
            for s in self.setups():
                if s not in SETUP_KINDS:
                    raise ConfigError(f"unknown setup {s!r}")
            for m in self.ablate_grid()["loss_masks"]:
                parse_mask(m)
            for m in self.ablate_grid()["init_modes"]:
                if m not in INIT_MODES:
                    raise ConfigError(f"unknown init mode {m!r}")
            self.teacher_scales()
            self.eval_scales()
        except (KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid configuration value: {exc}") from None

    # -- typed views ----------------------------------------------------------
    def dataset_spec(self) -> SyntheticDatasetSpec:
        v = self.values
        return SyntheticDatasetSpec(
            num_classes=int(v["dataset.num_classes"]),
            images_per_class=int(v["dataset.images_per_class"]),
            base_resolution=int(v["dataset.base_resolution"]),
            channels=int(v["dataset.channels"]),
            fine_signal_period=float(v["dataset.fine_signal_period"]),
            background_low=float(v["dataset.background_low"]),
            background_high=float(v["dataset.background_high"]),
            position_jitter=int(v["dataset.position_jitter"]),
            noise=float(v["dataset.noise"]),
            seed=int(v["dataset.seed"]),
        )

    def backbone(self) -> BackboneConfig:
        v = self.values
        return BackboneConfig(channels=_ints(v["backbone.channels"]), gem_p=float(v["backbone.gem_p"]),
                              embed_dim=int(v["backbone.embed_dim"]),
                              input_channels=int(v["dataset.channels"]),
                              learnable_p=bool(int(v["backbone.learnable_p"])))

    def teacher_config(self, seed: int | None = None, scale: float = 1.0) -> TrainConfig:
        v = self.values
        return TrainConfig(epochs=int(v["teacher.epochs"]), batch_classes=int(v["teacher.batch_classes"]),
                           batch_per_class=int(v["teacher.batch_per_class"]),
                           examples_per_epoch=int(v["teacher.examples_per_epoch"]),
                           max_lr=float(v["teacher.max_lr"]), weight_decay=float(v["teacher.weight_decay"]),
                           seed=int(v["teacher.seed"]) if seed is None else seed, resolution_factor=scale)

    def teacher_scales(self) -> tuple[float, ...]:
        scales = _floats(self.values["teacher.scales"])
        if 1.0 not in scales:
            scales = (1.0,) + scales
        return scales

    def distill_config(self, **changes) -> DistillConfig:
        v = self.values
        base = dict(
            epochs=int(v["distill.epochs"]), batch_size=int(v["distill.batch_size"]),
            examples_per_epoch=int(v["distill.examples_per_epoch"]),
            augmentations=int(v["distill.augmentations"]), scale_factor=self.distill_scales()[0],
            weights=LossWeights(float(v["distill.lambda_t"]), float(v["distill.lambda_s"])),
            terms=parse_mask(v["distill.loss_mask"]), coupled=bool(int(v["distill.coupled"])),
            init_mode=v["distill.init_mode"], max_lr=float(v["distill.max_lr"]),
            weight_decay=float(v["distill.weight_decay"]), seed=self.distill_seeds()[0],
        )
        base.update(changes)
        return DistillConfig(**base)

    def distill_scales(self) -> tuple[float, ...]:
        return _floats(self.values["distill.scales"])

    def distill_seeds(self) -> tuple[int, ...]:
        return _ints(self.values["distill.seeds"])

    def setups(self) -> tuple[str, ...]:
        return _strs(self.values["eval.setups"])

    def eval_scales(self) -> tuple[float, ...]:
        return _floats(self.values["eval.scales"])

    def flops_scales(self) -> tuple[float, ...]:
        return _floats(self.values["eval.flops_scales"])

    def ablate_grid(self) -> dict:
        v = self.values
        return {
            "scale": float(v["ablate.scale"]),
            "seeds": _ints(v["ablate.seeds"]),
            "coupled": tuple(bool(int(x)) for x in _strs(v["ablate.coupled"])),
            "loss_masks": _strs(v["ablate.loss_masks"]),
            "init_modes": _strs(v["ablate.init_modes"]),
            "augmentations": _ints(v["ablate.augmentations"]),
            "epochs": int(v["ablate.epochs"]),
        }
