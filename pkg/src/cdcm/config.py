"""Experiment configuration: a flat ``key = value`` text file plus CLI overrides.

Every field records whether its default is taken from the published
experimental setup (``paper``) or chosen for this artifact (``artifact``).
The echoed file written into each run directory is complete, so re-running
it reproduces the run.
"""

import configparser
import os
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path

from .data.augment import AugmentParams
from .errors import ConfigurationError
from .losses import LossConfig, LossFamily, make_center
from .models import Head, ModelConfig, ModelFamily
from .training import TrainConfig

CACHE_ENV = "CDCM_CACHE_DIR"
CIFAR_ENV = "CDCM_CIFAR_ROOT"
DATASETS = ("modified-cifar10", "slices")
CENTERS = ("zeros", "ones", "random")


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "cdcm"))


def default_cifar_root() -> Path:
    env = os.environ.get(CIFAR_ENV)
    return Path(env) if env else cache_dir() / "cifar-10-batches-py"


def _f(default, origin, help):
    return field(default=default, metadata={"origin": origin, "help": help})


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = _f("modified-cifar10", "artifact", "modified-cifar10 or slices")
    normal_class: int = _f(8, "artifact", "CIFAR-10 class id used as the normal class")
    data_seed: int = _f(0, "artifact", "seed of the split planner / fold planner")
    cifar_root: str = _f("", "artifact", f"CIFAR-10 python batches (default ${CIFAR_ENV} or cache)")
    slice_root: str = _f("", "artifact", "root of a slice dataset (case/ and control/ folders)")
    model: str = _f("lenet", "artifact", "lenet or custom")
    head: str = _f("", "artifact", "metric or classifier; empty = implied by the loss")
    latent_dim: int = _f(128, "paper", "latent / center dimension")
    block_widths: str = _f("", "artifact", "comma list overriding the conv widths")
    dense_widths: str = _f("", "artifact", "comma list overriding the dense widths")
    fused_norm: bool = _f(False, "artifact", "standardize the fused GAP vector per sample (custom model)")
    dropout: float = _f(-1.0, "artifact", "dropout rate; negative = model default (0.2 for custom)")
    loss: str = _f("cdcm", "paper", "cdcm, deep_sad, bce, wbce or focal")
    center: str = _f("ones", "paper", "zeros, ones or random (uniform [0, 1))")
    center_seed: int = _f(0, "artifact", "seed for a random center")
    margin: float = _f(5.0, "paper", "cDCM margin, also its decision threshold")
    alpha: float = _f(5.0, "paper", "cDCM anomaly weight")
    eta: float = _f(5.0, "artifact", "Deep SAD anomaly weight")
    pos_weight: float = _f(10.0, "artifact", "WBCE anomaly weight (inverse imbalance ratio)")
    focal_alpha: float = _f(0.25, "artifact", "focal loss alpha")
    focal_gamma: float = _f(2.0, "artifact", "focal loss gamma")
    lr: float = _f(1e-3, "paper", "initial Adam learning rate")
    batch_size: int = _f(128, "paper", "mini-batch size (64 for the slice data)")
    max_epochs: int = _f(400, "paper", "maximum training epochs")
    lr_decay_factor: float = _f(0.5, "paper", "learning-rate multiplier on plateau")
    plateau_patience_iters: int = _f(900, "paper", "iterations without val-loss decrease before decay")
    early_stop_patience_iters: int = _f(4500, "paper", "iterations without val-loss decrease before stop")
    augment: bool = _f(True, "paper", "random affine augmentation of training batches")
    rotation: float = _f(15.0, "artifact", "max rotation in degrees")
    shift: float = _f(0.1, "artifact", "max shift as a fraction of the image size")
    shear: float = _f(10.0, "artifact", "max shear in degrees")
    zoom: float = _f(0.1, "artifact", "max relative zoom")
    seed: int = _f(0, "artifact", "first training seed")
    n_seeds: int = _f(5, "paper", "number of independent seeds")
    cv: str = _f("none", "artifact", "none or double (patient-level nested CV)")
    device: str = _f("cpu", "artifact", "torch device; never chosen automatically")
    out: str = _f("runs/experiment", "artifact", "run directory")

    def __post_init__(self):
        self.validate()

    # -- validation ---------------------------------------------------------
    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"dataset must be one of {', '.join(DATASETS)}")
        if not 0 <= self.normal_class <= 9:
            raise ConfigurationError("normal-class must be in 0..9")
        if self.model not in {m.value for m in ModelFamily}:
            raise ConfigurationError("model must be lenet or custom")
        if self.loss not in {f.value for f in LossFamily}:
            raise ConfigurationError(f"loss must be one of {', '.join(f.value for f in LossFamily)}")
        if self.center not in CENTERS:
            raise ConfigurationError(f"center must be one of {', '.join(CENTERS)}")
        if self.cv not in ("none", "double"):
            raise ConfigurationError("cv must be none or double")
        if self.cv == "double" and self.dataset != "slices":
            raise ConfigurationError("cv double needs dataset = slices")
        if self.dataset == "slices" and not self.slice_root:
            raise ConfigurationError("slice-root is required for dataset = slices")
        if self.n_seeds < 1:
            raise ConfigurationError("n-seeds must be >= 1")
        if self.head:
            if self.head not in {h.value for h in Head}:
                raise ConfigurationError("head must be metric or classifier")
            if self.head != self.implied_head.value:
                raise ConfigurationError(
                    f"head {self.head} is incompatible with loss {self.loss} (needs {self.implied_head.value})"
                )
        expected = (256, 256, 3) if self.dataset == "slices" else (32, 32, 3)
        family_shape = (32, 32, 3) if self.model == "lenet" else (256, 256, 3)
        if expected != family_shape:
            raise ConfigurationError(f"model {self.model} expects {family_shape} inputs but dataset {self.dataset} has {expected}")
        # the sub-configs do their own range checks
        self.loss_config()
        self.train_config()
        self.model_config()

    @property
    def implied_head(self):
        return Head.METRIC if LossFamily(self.loss).is_metric else Head.SIGMOID_CLASSIFIER

    # -- sub-configs --------------------------------------------------------
    def loss_config(self) -> LossConfig:
        fam = LossFamily(self.loss)
        center = tuple(make_center(self.center, self.latent_dim, self.center_seed).tolist()) if fam.is_metric else None
        return LossConfig(
            family=fam,
            center=center,
            margin=self.margin,
            alpha=self.alpha,
            eta=self.eta,
            pos_weight=self.pos_weight,
            focal_gamma=self.focal_gamma,
            focal_alpha=self.focal_alpha,
        )

    def model_config(self) -> ModelConfig:
        overrides = {"latent_dim": self.latent_dim, "head": self.implied_head}
        if self.block_widths:
            overrides["block_widths"] = _ints(self.block_widths, "block_widths")
        if self.dense_widths:
            overrides["dense_widths"] = _ints(self.dense_widths, "dense_widths")
        if self.dropout >= 0:
            overrides["dropout"] = self.dropout
        if self.fused_norm:
            overrides["fused_norm"] = True
        maker = ModelConfig.lenet if self.model == "lenet" else ModelConfig.custom
        return maker(**overrides)

    def augment_params(self) -> AugmentParams:
        if not self.augment:
            return AugmentParams(0.0, 0.0, 0.0, 0.0)
        return AugmentParams(self.rotation, self.shift, self.shear, self.zoom)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            initial_lr=self.lr,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            lr_decay_factor=self.lr_decay_factor,
            plateau_patience_iters=self.plateau_patience_iters,
            early_stop_patience_iters=self.early_stop_patience_iters,
            n_seeds=self.n_seeds,
            augment=self.augment_params(),
            device=self.device,
        )

    def seeds(self):
        return list(range(self.seed, self.seed + self.n_seeds))

    def cifar_path(self) -> Path:
        return Path(self.cifar_root) if self.cifar_root else default_cifar_root()

    # -- serialisation ------------------------------------------------------
    def to_text(self) -> str:
        lines = ["# experiment configuration (origin: paper = published setting, artifact = chosen here)"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"# {f.metadata['help']} [{f.metadata['origin']}]")
            lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def from_text(cls, text, overrides=None):
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        parser.optionxform = str
        try:
            parser.read_string("[experiment]\n" + text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config file: {exc}") from None
        raw = dict(parser["experiment"])
        raw.update(overrides or {})
        return cls.from_mapping(raw)

    @classmethod
    def load(cls, path=None, overrides=None):
        if path is None:
            return cls.from_mapping(overrides or {})
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        return cls.from_text(p.read_text(), overrides)

    @classmethod
    def from_mapping(cls, raw):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            name = key.replace("-", "_")
            if name not in known:
                raise ConfigurationError(f"unknown config field: {key}")
            kwargs[name] = _parse(known[name], value)
        return cls(**kwargs)

    def override(self, **changes):
        return replace(self, **changes)


def field_docs():
    """``[(name, default, origin, help)]`` for documentation and ``--help``."""
    return [(f.name, f.default if f.default is not MISSING else None, f.metadata["origin"], f.metadata["help"]) for f in fields(ExperimentConfig)]


def _ints(text, name):
    try:
        return tuple(int(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise ConfigurationError(f"{name} must be a comma list of integers") from None


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(f, value):
    if not isinstance(value, str):
        return value
    value = value.strip()
    kind = type(f.default)
    try:
        if kind is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
    except ValueError:
        raise ConfigurationError(f"{f.name}: cannot parse {value!r} as {kind.__name__}") from None
    return value
