import json
from pathlib import Path
from typing import Optional, Tuple

from ..models import InvalidArgumentError, Mechanism
from .image_service import AugmentConfig
from .training import TrainConfig

BASE_DIR = Path(__file__).resolve().parent.parent
CONFIG_PATH = BASE_DIR / "train_config.json"

DEFAULT_CONFIG = {
    "mechanism": "gca",
    "batch_size": 16,
    "epochs": 60,
    "warmup_epochs": 5,
    "lr": 3e-4,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "crop_margin": 0.1,
    "translate": True,
    "augment": True,
    "max_steps": None,
}

PRESETS = {
    "gca": {
        "name": "Global cross-attention",
        "desc": "Every anchor location attends to the whole sample map",
        "config": {**DEFAULT_CONFIG, "mechanism": "gca"},
    },
    "lca": {
        "name": "Local cross-attention",
        "desc": "Windows 7/5/3 at 16x16, 8x8, 4x4",
        "config": {**DEFAULT_CONFIG, "mechanism": "lca"},
    },
    "gca_msa": {
        "name": "Self-attention then global cross-attention",
        "desc": "Linear 8-head self-attention with positional encoding before GCA",
        "config": {**DEFAULT_CONFIG, "mechanism": "gca_msa"},
    },
    "concat": {
        "name": "Concatenation only",
        "desc": "Sample features concatenated to the skip, no attention",
        "config": {**DEFAULT_CONFIG, "mechanism": "concat_only"},
    },
    "overfit": {
        "name": "Overfit smoke test",
        "desc": "Fixed aligned pairs, no augmentation, short warmup",
        "config": {
            **DEFAULT_CONFIG,
            "batch_size": 8,
            "epochs": 500,
            "warmup_epochs": 2,
            "lr": 3e-3,
            "translate": False,
            "augment": False,
            "max_steps": 2000,
        },
    },
}


class TrainConfigManager:
    @staticmethod
    def get_config(path: Optional[Path] = None) -> dict:
        path = Path(path) if path is not None else CONFIG_PATH
        if not path.exists():
            if path == CONFIG_PATH:
                TrainConfigManager.save_config(DEFAULT_CONFIG)
                return dict(DEFAULT_CONFIG)
            raise FileNotFoundError(f"training config not found: {path}")

        with open(path, "r") as f:
            data = json.load(f)
        # fill keys the file does not set
        for k, v in DEFAULT_CONFIG.items():
            if k not in data:
                data[k] = v
        return data

    @staticmethod
    def save_config(config: dict, path: Optional[Path] = None):
        path = Path(path) if path is not None else CONFIG_PATH
        safe_config = {k: config.get(k, v) for k, v in DEFAULT_CONFIG.items()}
        with open(path, "w") as f:
            json.dump(safe_config, f, indent=4)

    @staticmethod
    def preset(name: str) -> dict:
        if name not in PRESETS:
            raise InvalidArgumentError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}")
        return dict(PRESETS[name]["config"])

    @staticmethod
    def to_train_config(config: dict, seed: int = 0) -> Tuple[Mechanism, TrainConfig]:
        """Split a flat config document into the mechanism and a validated TrainConfig."""
        augment = AugmentConfig() if config.get("augment", True) else AugmentConfig.disabled()
        train_cfg = TrainConfig(
            batch_size=int(config["batch_size"]),
            epochs=int(config["epochs"]),
            warmup_epochs=int(config["warmup_epochs"]),
            lr=float(config["lr"]),
            betas=(float(config["beta1"]), float(config["beta2"])),
            eps=float(config["eps"]),
            seed=seed,
            augment=augment,
            crop_margin=float(config["crop_margin"]),
            translate=bool(config["translate"]),
            max_steps=None if config.get("max_steps") is None else int(config["max_steps"]),
        )
        return Mechanism.parse(str(config["mechanism"])), train_cfg
