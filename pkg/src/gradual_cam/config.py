import json
from pathlib import Path
from typing import Any, Dict, Optional

from .util import atomic_write_text

CONFIG_DIR = Path.home() / ".config" / "gradual-cam"
CONFIG_FILE = CONFIG_DIR / "config.json"

DEFAULT_CONFIG: Dict[str, Any] = {
    "epochs": 20,
    "learning_rate": 0.05,
    "batch_size": 16,
    "train_count": 2000,
    "test_count": 300,
    "steps": 64,
    "threshold": 0.5,
    "replacement": "zero",
    "runs": 30,
    "warmup_runs": 3,
    "min_confidence": 0.99,
    "blend": 0.5,
    "run_log_path": ".gradual-cam/runs.jsonl",
}


def load_config(path: Optional[Path] = None) -> Dict[str, Any]:
    config_file = Path(path).expanduser() if path else CONFIG_FILE
    if not config_file.exists():
        atomic_write_text(config_file, json.dumps(DEFAULT_CONFIG, indent=2))
    cfg = json.loads(config_file.read_text(encoding="utf-8"))
    if not isinstance(cfg, dict):
        raise ValueError(f"config file {config_file} must hold a JSON object")
    merged = dict(DEFAULT_CONFIG)
    merged.update(cfg)
    if merged != cfg:
        atomic_write_text(config_file, json.dumps(merged, indent=2))
    return merged


def config_path(path: Optional[Path] = None) -> Path:
    return Path(path).expanduser() if path else CONFIG_FILE
