from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Mapping, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from mtlswin.errors import ConfigError


class Settings(BaseSettings):
    """Process-level settings (env prefix MTLSWIN_)"""

    # Parallelism: torch intra-op threads and DataLoader workers
    THREADS: int = 1

    # Logging settings
    LOG_LEVEL: str = "INFO"
    LOG_FILE_NAME: str = "run.log"

    # Run defaults
    DEFAULT_SEED: int = 0
    DEFAULT_OUTPUT_DIR: str = "runs"

    # Checkpoint container
    CHECKPOINT_HEADER: str = "MTLSWIN-CKPT v1"

    model_config = SettingsConfigDict(
        env_prefix="MTLSWIN_", env_file=".env", case_sensitive=True, extra="ignore"
    )


# Create settings instance
settings = Settings()

TASK_ORDER = ("cls", "seg", "rec")

# Encoder size presets: depth of the third stage and input channel size decide the variant
VARIANT_PRESETS = {
    "default": {"depths": [2, 2, 2, 2], "channels": 96},
    "tiny": {"depths": [2, 2, 6, 2], "channels": 96},
    "base": {"depths": [2, 2, 18, 2], "channels": 128},
}

# Task-loss weights per task set
TASK_WEIGHT_PRESETS = {
    ("cls",): {"lambda_cls": 1.0},
    ("seg",): {"lambda_seg": 1.0},
    ("cls", "seg"): {"lambda_cls": 0.4, "lambda_seg": 0.6},
    ("cls", "rec"): {"lambda_cls": 0.4, "lambda_rec": 0.6},
    ("cls", "seg", "rec"): {"lambda_cls": 0.3, "lambda_seg": 0.4, "lambda_rec": 0.4},
}

SEG_LOSS_WEIGHTS = {"lambda_ce": 0.4, "lambda_dice": 0.6}

# Optimization recipe per model family: nominal (full scale) and desk-scale epochs
TRAIN_PRESETS = {
    "mtl": {"batch": 64, "lr_base": 0.01, "epochs": 600, "desk_epochs": 30},
    "mtl_tiny": {"batch": 32, "lr_base": 0.01, "epochs": 600, "desk_epochs": 30},
    "swin": {"batch": 64, "lr_base": 0.01, "epochs": 600, "desk_epochs": 30},
    "swin_unet": {"batch": 32, "lr_base": 0.01, "epochs": 200, "desk_epochs": 10},
    "joint": {"batch": 128, "lr_base": 0.004, "epochs": 600, "desk_epochs": 30},
}

def training_family(family: str, variant: str) -> str:
    """Tiny three-task models train with their own preset"""
    if family == "mtl" and variant == "tiny":
        return "mtl_tiny"
    return family


GENERATOR_DEFAULTS = {
    "image_size": 64,
    "train_count": 2000,
    "val_count": 200,
    "test_count": 179,
    "hospital1_train_fraction": 0.2,
    "shift_pool_per_hospital": 60,
    "slices_per_patient": 4,
    "rho_train": 0.9,
    "rho_shift": 0.0,
    "p_positive": 0.35,
    "p_other_blob": 0.35,
}

NUM_HOSPITALS = 11
ANNOTATED_HOSPITALS = (1, 2, 3, 4)


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class TaskWeights(BaseModel):
    """Weights of the total loss and of the segmentation loss"""

    lambda_cls: Optional[float] = None
    lambda_seg: Optional[float] = None
    lambda_rec: Optional[float] = None
    lambda_ce: float = SEG_LOSS_WEIGHTS["lambda_ce"]
    lambda_dice: float = SEG_LOSS_WEIGHTS["lambda_dice"]

    def for_task(self, task: str) -> Optional[float]:
        return getattr(self, f"lambda_{task}")

    @classmethod
    def for_tasks(cls, tasks: Iterable[str]) -> "TaskWeights":
        key = tuple(t for t in TASK_ORDER if t in set(tasks))
        if key not in TASK_WEIGHT_PRESETS:
            raise ConfigError(f"No default weights for task set {key}")
        return cls(**TASK_WEIGHT_PRESETS[key])


class ModelConfig(BaseModel):
    """Fully determines both the MTL and the joint architecture"""

    model_config = ConfigDict(extra="forbid")

    variant: Literal["default", "tiny", "base"] = "default"
    depths: Optional[List[int]] = None
    channels: Optional[int] = None
    window: int = 7
    heads: Optional[List[int]] = None
    mlp_ratio: float = 4.0
    patch_size: int = 4
    image_size: int = 224
    in_chans: int = 1
    tasks: List[str] = Field(default_factory=lambda: list(TASK_ORDER))
    weights: Optional[TaskWeights] = None
    num_classes: int = 2
    seg_classes: int = 2

    @field_validator("depths", "heads", "tasks", mode="before")
    @classmethod
    def _lists(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def _resolve(self) -> "ModelConfig":
        preset = VARIANT_PRESETS[self.variant]
        if self.depths is None:
            self.depths = list(preset["depths"])
        if self.channels is None:
            self.channels = preset["channels"]

        unknown = set(self.tasks) - set(TASK_ORDER)
        if unknown:
            raise ValueError(f"Unknown tasks: {sorted(unknown)}")
        self.tasks = [t for t in TASK_ORDER if t in set(self.tasks)]
        if "cls" not in self.tasks and self.tasks != ["seg"]:
            raise ValueError("Classification is the main task and must be configured (only {seg} may omit it)")

        if self.weights is None:
            self.weights = TaskWeights.for_tasks(self.tasks)
        for task in TASK_ORDER:
            weight = self.weights.for_task(task)
            if task in self.tasks and (weight is None or weight <= 0):
                raise ValueError(f"Active task '{task}' needs a positive weight")
            if task not in self.tasks and weight is not None:
                raise ValueError(f"Weight supplied for inactive task '{task}'")

        if not self.depths or any(d < 1 for d in self.depths):
            raise ValueError("Every stage needs depth >= 1")
        if self.heads is not None and len(self.heads) != len(self.depths):
            raise ValueError("heads must list one head count per stage")
        for i in range(self.num_stages):
            if self.stage_channels(i) % self.stage_heads(i):
                raise ValueError(f"Stage {i}: channels not divisible by heads")

        reduction = self.patch_size * 2 ** (self.num_stages - 1)
        if self.image_size % reduction:
            raise ValueError(f"image_size {self.image_size} not divisible by {reduction}")
        for i in range(self.num_stages):
            side = self.stage_grid(i)
            if side % self.stage_window(i):
                raise ValueError(f"Stage {i}: grid {side} not divisible by window {self.stage_window(i)}")
        return self

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_channels(self, i: int) -> int:
        return self.channels * 2 ** i

    def stage_heads(self, i: int) -> int:
        if self.heads is not None:
            return self.heads[i]
        return max(1, self.stage_channels(i) // 32)

    def stage_grid(self, i: int) -> int:
        return self.image_size // self.patch_size // 2 ** i

    def stage_window(self, i: int) -> int:
        return min(self.window, self.stage_grid(i))

    @property
    def final_channels(self) -> int:
        return self.stage_channels(self.num_stages - 1)

    def has_task(self, task: str) -> bool:
        return task in self.tasks


class TrainConfig(BaseModel):
    """SGD recipe for one training run"""

    model_config = ConfigDict(extra="forbid")

    family: Literal["mtl", "mtl_tiny", "swin", "swin_unet", "joint"] = "mtl"
    lr_base: float = 0.01
    batch: int = 64
    epochs: int = 30
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_exponent: float = 0.9
    augment: bool = True
    seed: int = 0
    max_iterations: Optional[int] = None

    @field_validator("lr_base", "batch", "epochs")
    @classmethod
    def _positive(cls, value):
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @classmethod
    def for_family(cls, family: str, scale: Literal["desk", "nominal"] = "desk", **overrides) -> "TrainConfig":
        if family not in TRAIN_PRESETS:
            raise ConfigError(f"Unknown model family: {family}")
        if scale not in ("desk", "nominal"):
            raise ConfigError(f"Unknown training scale: {scale}")
        preset = TRAIN_PRESETS[family]
        values = {
            "family": family,
            "batch": preset["batch"],
            "lr_base": preset["lr_base"],
            "epochs": preset["desk_epochs"] if scale == "desk" else preset["epochs"],
        }
        values.update(overrides)
        return build(cls, values)


class GeneratorConfig(BaseModel):
    """Synthetic spurious-correlation dataset"""

    model_config = ConfigDict(extra="forbid")

    image_size: int = GENERATOR_DEFAULTS["image_size"]
    train_count: int = GENERATOR_DEFAULTS["train_count"]
    val_count: int = GENERATOR_DEFAULTS["val_count"]
    test_count: int = GENERATOR_DEFAULTS["test_count"]
    hospital1_train_fraction: float = GENERATOR_DEFAULTS["hospital1_train_fraction"]
    shift_pool_per_hospital: int = GENERATOR_DEFAULTS["shift_pool_per_hospital"]
    slices_per_patient: int = GENERATOR_DEFAULTS["slices_per_patient"]
    rho_train: float = GENERATOR_DEFAULTS["rho_train"]
    rho_shift: float = GENERATOR_DEFAULTS["rho_shift"]
    p_positive: float = GENERATOR_DEFAULTS["p_positive"]
    p_other_blob: float = GENERATOR_DEFAULTS["p_other_blob"]
    brightness_offsets: List[float] = Field(default_factory=lambda: [0.0] * NUM_HOSPITALS)
    seed: int = 0

    @field_validator("brightness_offsets", mode="before")
    @classmethod
    def _offsets(cls, value):
        value = _split_list(value)
        if isinstance(value, list):
            value = [float(v) for v in value]
        return value

    @model_validator(mode="after")
    def _check(self) -> "GeneratorConfig":
        for name in ("rho_train", "rho_shift", "hospital1_train_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.p_positive <= 0 or self.p_other_blob < 0 or self.p_positive + self.p_other_blob > 1:
            raise ValueError("Lesion probabilities must be nonnegative and sum to at most 1")
        if self.image_size < 32 or self.image_size % 32:
            raise ValueError("image_size must be a multiple of 32")
        if min(self.train_count, self.val_count, self.test_count, self.slices_per_patient) < 1:
            raise ValueError("Split counts must be positive")
        if len(self.brightness_offsets) != NUM_HOSPITALS:
            raise ValueError(f"brightness_offsets needs {NUM_HOSPITALS} entries")
        return self


class RunConfig(BaseModel):
    """Resolved command invocation, echoed to run.meta"""

    command: Literal["gen-data", "train", "eval", "gradcam", "gradcheck", "shift-trend"]
    config_path: Optional[str] = None
    seed: int = settings.DEFAULT_SEED
    output_dir: str = settings.DEFAULT_OUTPUT_DIR
    values: Dict[str, str] = Field(default_factory=dict)


def build(model_cls, values: Mapping[str, Any]):
    """Construct a config model, turning validation failures into ConfigError"""
    try:
        return model_cls(**dict(values))
    except ValidationError as e:
        raise ConfigError(f"Invalid {model_cls.__name__}: {e}") from e


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    """Parse repeated ``K=V`` flags"""
    parsed = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"Override must look like key=value: {pair!r}")
        key, value = pair.split("=", 1)
        parsed[key.strip()] = value.strip()
    return parsed


def load_config_file(path: Optional[str], overrides: Iterable[str] = ()) -> Dict[str, str]:
    """Read a flat key=value file and apply ``--set`` overrides"""
    values: Dict[str, str] = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"Config file not found: {path}")
        values.update({k: v for k, v in dotenv_values(path).items() if v is not None})
    values.update(parse_overrides(overrides))
    return values


def select(values: Mapping[str, str], model_cls, prefix: str = "") -> Dict[str, str]:
    """Pick the keys of ``values`` that belong to ``model_cls`` (optionally prefixed)"""
    fields = set(model_cls.model_fields)
    picked = {}
    for key, value in values.items():
        name = key[len(prefix):] if prefix and key.startswith(prefix) else (None if prefix else key)
        if name in fields:
            picked[name] = value
    return picked


def model_config_from_values(values: Mapping[str, str]) -> ModelConfig:
    picked = select(values, ModelConfig)
    weight_keys = {k: v for k, v in values.items() if k.startswith("lambda_")}
    if weight_keys:
        picked["weights"] = build(TaskWeights, weight_keys)
    return build(ModelConfig, picked)


def validate_settings() -> bool:
    """Validate process settings"""
    if settings.THREADS < 1:
        raise ValueError("MTLSWIN_THREADS must be >= 1")
    if not settings.CHECKPOINT_HEADER:
        raise ValueError("CHECKPOINT_HEADER cannot be empty")
    return True


# Validate settings on import
validate_settings()
