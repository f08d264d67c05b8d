#!/usr/bin/env python3
"""
Configuration and Logging Setup
Loads config.json, builds typed run configurations and installs component loggers.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .schema import (
    AnswerMode,
    ConfigurationError,
    GenConfig,
    LossWeights,
    Method,
    OODMode,
    OptimizerKind,
)

DEFAULT_CONFIG_PATH = "config.json"
OUTPUT_ROOT_ENV_VAR = "CAUSAL_VIDQA_OUTPUT_ROOT"

# Loss-component ablation arms of IGV: (use L_e, use L_v*)
IGV_ABLATION_PRESETS: Dict[str, Tuple[bool, bool]] = {
    "lc": (False, False),
    "lc_le": (True, False),
    "lc_lv": (False, True),
    "full": (True, True),
}

DEFAULT_LOGGING_CONFIG = {
    "console_level": "INFO",
    "file_level": "DEBUG",
    "enable_file_logging": False,
    "enable_status_file_logging": True,
}


def load_config(config_path: str = DEFAULT_CONFIG_PATH) -> Dict:
    """Load configuration from JSON file"""
    try:
        with open(config_path, "r") as f:
            return json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"Configuration file not found: {config_path}")
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid JSON in config file: {e}")


def load_env_file(env_path: str = ".env"):
    """Load environment variables from .env file"""
    env_file = Path(env_path)
    if env_file.exists():
        with open(env_file, "r") as f:
            for line in f:
                line = line.strip()
                if line and not line.startswith("#") and "=" in line:
                    key, value = line.split("=", 1)
                    os.environ[key.strip()] = value.strip().strip("\"'")


def resolve_output_root(config: Dict) -> Path:
    """Output directory from the environment override or the config's output section"""
    override = os.getenv(OUTPUT_ROOT_ENV_VAR)
    if override:
        return Path(override)
    return Path(config.get("output", {}).get("output_dir", "output"))


def setup_logger(
    name: str,
    logging_config: Optional[Dict] = None,
    logs_dir: Optional[Path] = None,
) -> logging.Logger:
    """
    Setup a named component logger

    Args:
        name: Logger name, also used as the log file prefix
        logging_config: The config's logging section
        logs_dir: Directory for the optional file handler

    Returns:
        Configured logger
    """
    logging_config = {**DEFAULT_LOGGING_CONFIG, **(logging_config or {})}
    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG)

    # Remove existing handlers
    logger.handlers = []

    console_handler = logging.StreamHandler()
    console_handler.setLevel(getattr(logging, logging_config["console_level"]))
    console_handler.setFormatter(
        logging.Formatter(
            "%(asctime)s - %(levelname)s - %(message)s", datefmt="%Y-%m-%d %H:%M:%S"
        )
    )
    logger.addHandler(console_handler)

    if logging_config.get("enable_file_logging", False) and logs_dir is not None:
        logs_dir = Path(logs_dir)
        logs_dir.mkdir(parents=True, exist_ok=True)
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        log_file = logs_dir / f"{name.lower()}_{timestamp}.log"

        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(getattr(logging, logging_config["file_level"]))
        file_handler.setFormatter(
            logging.Formatter(
                "%(asctime)s - %(name)s - %(levelname)s - "
                "%(funcName)s:%(lineno)d - %(message)s"
            )
        )
        logger.addHandler(file_handler)
        logger.info(f"{name} logging to: {log_file}")

    return logger


def gen_config_from_dict(section: Dict) -> GenConfig:
    """Build a GenConfig from the data section, ignoring keys it does not own"""
    known = {f.name for f in fields(GenConfig)}
    kwargs = {k: v for k, v in section.items() if k in known}
    for key in ("causal_span", "splits"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    if "ood_mode" in kwargs:
        try:
            kwargs["ood_mode"] = OODMode(kwargs["ood_mode"])
        except ValueError:
            raise ConfigurationError(f"Unknown ood_mode: {kwargs['ood_mode']}")
    return GenConfig(**kwargs)


@dataclass
class ModelConfig:
    hidden_size: int = 64
    graph_layers: int = 2
    fusion_rank: int = 4
    projection_depth: int = 1
    num_heads: int = 4


@dataclass
class GroundingConfig:
    temperature: float = 1.0
    final_temperature: Optional[float] = None
    hard: bool = True
    regrounding_grad: bool = False
    # Let the environment loss move clip assignments (IGV); off keeps it on the predictor
    environment_grad: bool = False
    dump_masks: bool = True

    def temperature_at(self, epoch: int, epochs: int) -> float:
        """Linear anneal from temperature to final_temperature over training"""
        if self.final_temperature is None or epochs <= 1:
            return self.temperature
        frac = min(max(epoch / (epochs - 1), 0.0), 1.0)
        return self.temperature + frac * (self.final_temperature - self.temperature)


@dataclass
class InterventionConfig:
    bank_capacity: int = 4096
    alpha: float = 1.0
    num_negatives: int = 5
    use_intervener: bool = True
    disrupt_video: bool = True
    disrupt_question: bool = True


@dataclass
class RationalizerConfig:
    K_f: int = 5
    K_o: int = 12
    sigma: float = 0.5
    samples: int = 100
    decoder_layers: int = 1
    answer_mode: AnswerMode = AnswerMode.OPEN_ENDED
    dump_rationales: bool = True


@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 64
    optimizer: OptimizerKind = OptimizerKind.SGD
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_patience: int = 5
    lr_factor: float = 0.5
    grad_clip: Optional[float] = 5.0
    eval_splits: List[str] = field(default_factory=lambda: ["val", "test_iid", "test_ood"])


@dataclass
class RunConfig:
    """Typed view of config.json for one training run"""

    method: Method = Method.IGV
    seed: int = 0
    dataset_path: Optional[str] = None
    igv_preset: str = "full"
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    grounding: GroundingConfig = field(default_factory=GroundingConfig)
    intervention: InterventionConfig = field(default_factory=InterventionConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    rationalizer: RationalizerConfig = field(default_factory=RationalizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    @classmethod
    def from_dict(cls, config: Dict) -> "RunConfig":
        """
        Build a RunConfig from a config.json document

        Args:
            config: Parsed config dictionary; missing sections take defaults

        Returns:
            RunConfig (not yet validated)
        """
        training = dict(config.get("training", {}))
        loss = dict(config.get("loss", {}))
        try:
            method = Method(training.pop("method", Method.IGV))
            optimizer = OptimizerKind(training.pop("optimizer", OptimizerKind.SGD))
            rationalizer = dict(config.get("rationalizer", {}))
            answer_mode = AnswerMode(rationalizer.pop("answer_mode", AnswerMode.OPEN_ENDED))
        except ValueError as e:
            raise ConfigurationError(str(e))

        seed = training.pop("seed", 0)
        dataset_path = training.pop("dataset_path", None)
        igv_preset = loss.pop("igv_preset", "full")

        try:
            return cls(
                method=method,
                seed=seed,
                dataset_path=dataset_path,
                igv_preset=igv_preset,
                gen=gen_config_from_dict(config.get("data", {})),
                model=ModelConfig(**config.get("model", {})),
                grounding=GroundingConfig(**config.get("grounding", {})),
                intervention=InterventionConfig(**config.get("intervention", {})),
                loss=LossWeights(**loss),
                rationalizer=RationalizerConfig(answer_mode=answer_mode, **rationalizer),
                training=TrainingConfig(optimizer=optimizer, **training),
            )
        except TypeError as e:
            raise ConfigurationError(f"Unknown configuration key: {e}")

    @classmethod
    def from_echo(cls, echo: Dict) -> "RunConfig":
        """Rebuild a RunConfig from the layout produced by to_dict"""
        return cls.from_dict(
            {
                "data": echo.get("gen", {}),
                "model": echo.get("model", {}),
                "grounding": echo.get("grounding", {}),
                "intervention": echo.get("intervention", {}),
                "loss": {**echo.get("loss", {}), "igv_preset": echo.get("igv_preset", "full")},
                "rationalizer": echo.get("rationalizer", {}),
                "training": {
                    **echo.get("training", {}),
                    "method": echo.get("method", Method.IGV),
                    "seed": echo.get("seed", 0),
                    "dataset_path": echo.get("dataset_path"),
                },
            }
        )

    def to_dict(self) -> Dict:
        """JSON-serializable echo of this configuration"""
        return json.loads(json.dumps(asdict(self), default=str))

    def config_hash(self) -> str:
        """Stable hash of everything except method and seed"""
        echo = self.to_dict()
        echo.pop("method", None)
        echo.pop("seed", None)
        payload = json.dumps(echo, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def effective_loss_weights(self) -> LossWeights:
        """IGV loss weights after applying the ablation preset"""
        use_le, use_lv = IGV_ABLATION_PRESETS[self.igv_preset]
        return LossWeights(
            igv_lambda1=self.loss.igv_lambda1 if use_le else 0.0,
            igv_lambda2=self.loss.igv_lambda2 if use_lv else 0.0,
            beta=self.loss.beta,
        )

    def validate(self):
        """Raise ConfigurationError for values outside their documented ranges"""
        self.gen.validate()

        if self.igv_preset not in IGV_ABLATION_PRESETS:
            raise ConfigurationError(
                f"Unknown igv_preset '{self.igv_preset}', expected one of {sorted(IGV_ABLATION_PRESETS)}"
            )
        if self.dataset_path is not None and not Path(self.dataset_path).exists():
            raise ConfigurationError(f"dataset_path does not exist: {self.dataset_path}")

        positive = {
            "model.hidden_size": self.model.hidden_size,
            "model.fusion_rank": self.model.fusion_rank,
            "model.num_heads": self.model.num_heads,
            "model.projection_depth": self.model.projection_depth,
            "grounding.temperature": self.grounding.temperature,
            "intervention.bank_capacity": self.intervention.bank_capacity,
            "intervention.alpha": self.intervention.alpha,
            "intervention.num_negatives": self.intervention.num_negatives,
            "rationalizer.K_f": self.rationalizer.K_f,
            "rationalizer.K_o": self.rationalizer.K_o,
            "rationalizer.sigma": self.rationalizer.sigma,
            "rationalizer.samples": self.rationalizer.samples,
            "rationalizer.decoder_layers": self.rationalizer.decoder_layers,
            "training.epochs": self.training.epochs,
            "training.batch_size": self.training.batch_size,
            "training.lr": self.training.lr,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigurationError(f"{name} must be positive, got {value}")

        if self.grounding.final_temperature is not None and self.grounding.final_temperature <= 0:
            raise ConfigurationError("grounding.final_temperature must be positive")
        if self.model.graph_layers < 0:
            raise ConfigurationError("model.graph_layers must be nonnegative")
        if self.model.hidden_size % 2:
            raise ConfigurationError("model.hidden_size must be even for bidirectional encoders")
        if self.model.hidden_size % self.model.num_heads:
            raise ConfigurationError("model.hidden_size must be divisible by model.num_heads")
        if self.model.projection_depth > 2:
            raise ConfigurationError("model.projection_depth must be 1 or 2")
        if not 0.0 <= self.training.momentum < 1.0:
            raise ConfigurationError("training.momentum must lie in [0, 1)")
        if self.training.weight_decay < 0:
            raise ConfigurationError("training.weight_decay must be nonnegative")
        if not 0.0 < self.training.lr_factor < 1.0:
            raise ConfigurationError("training.lr_factor must lie in (0, 1)")
        if self.method == Method.EIGV and not (
            self.intervention.disrupt_video or self.intervention.disrupt_question
        ) and self.loss.beta > 0:
            raise ConfigurationError("EIGV with beta > 0 needs at least one disruption kind")
