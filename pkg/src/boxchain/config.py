"""Pipeline configuration: one YAML file, validated up front, flags win."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("mock", "remote")


@dataclass
class PipelineConfig:
    seed: int = 0
    images_dir: Path = Path("images")
    layouts_dir: Path = Path("layouts")
    datasets_dir: Path = Path("datasets")
    outputs_dir: Path = Path("outputs")
    review_queue: Path = Path("review_queue.jsonl")

    backend_kind: str = "mock"
    behavior_file: Optional[Path] = None
    endpoint: Optional[str] = None
    model: Optional[str] = None
    api_key_env: str = "BOXCHAIN_API_KEY"
    timeout_s: float = 120.0
    max_in_flight: int = 4
    tile_px: int = 512
    tokens_per_tile: int = 256
    max_output_tokens: int = 256

    border_thickness: Optional[int] = None
    label_font_px: Optional[int] = None
    blur_sigma: Optional[float] = None

    k_max: int = 8
    box_id_cap: int = 5

    anls_tau: float = 0.5
    date_day_first: bool = False
    field_types: dict = field(default_factory=dict)

    host: str = "127.0.0.1"
    port: int = 8787
    service_token: Optional[str] = None

    def validate(self) -> "PipelineConfig":
        if self.backend_kind not in BACKEND_KINDS:
            raise ConfigError(f"backend kind must be one of {BACKEND_KINDS}")
        if self.backend_kind == "remote" and not self.endpoint:
            raise ConfigError("remote backend requires backend.endpoint")
        if self.k_max < 1:
            raise ConfigError("orchestrator.k_max must be >= 1")
        if not 0.0 < self.anls_tau <= 1.0:
            raise ConfigError("eval.anls_tau must be in (0, 1]")
        if not 1 <= self.port <= 65535:
            raise ConfigError(f"service.port {self.port} out of range")
        return self

    def log_resolved(self) -> None:
        resolved = {k: str(v) for k, v in asdict(self).items()}
        logger.info("resolved config: %s", json.dumps(resolved, sort_keys=True))


def _get(section: dict, key: str, default):
    value = section.get(key, default)
    return default if value is None else value


def load_config(path: Optional[str | Path]) -> PipelineConfig:
    """Read the YAML config; a missing path yields defaults."""
    if path is None:
        return PipelineConfig().validate()
    path = Path(path)
    try:
        payload = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: config must be a mapping")

    base = path.parent
    paths = payload.get("paths", {}) or {}
    backend = payload.get("backend", {}) or {}
    render = payload.get("render", {}) or {}
    orch = payload.get("orchestrator", {}) or {}
    ev = payload.get("eval", {}) or {}
    service = payload.get("service", {}) or {}

    def respath(value, default: str) -> Path:
        p = Path(value) if value else Path(default)
        return p if p.is_absolute() else base / p

    cfg = PipelineConfig(
        seed=int(payload.get("seed", 0)),
        images_dir=respath(paths.get("images_dir"), "images"),
        layouts_dir=respath(paths.get("layouts_dir"), "layouts"),
        datasets_dir=respath(paths.get("datasets_dir"), "datasets"),
        outputs_dir=respath(paths.get("outputs_dir"), "outputs"),
        review_queue=respath(paths.get("review_queue"), "review_queue.jsonl"),
        backend_kind=str(_get(backend, "kind", "mock")),
        behavior_file=respath(backend["behavior_file"], "") if backend.get("behavior_file") else None,
        endpoint=backend.get("endpoint"),
        model=backend.get("model"),
        api_key_env=str(_get(backend, "api_key_env", "BOXCHAIN_API_KEY")),
        timeout_s=float(_get(backend, "timeout_s", 120.0)),
        max_in_flight=int(_get(backend, "max_in_flight", 4)),
        tile_px=int(_get(backend, "tile_px", 512)),
        tokens_per_tile=int(_get(backend, "tokens_per_tile", 256)),
        max_output_tokens=int(_get(backend, "max_output_tokens", 256)),
        border_thickness=render.get("border_thickness"),
        label_font_px=render.get("label_font_px"),
        blur_sigma=render.get("blur_sigma"),
        k_max=int(_get(orch, "k_max", 8)),
        box_id_cap=int(_get(orch, "box_id_cap", 5)),
        anls_tau=float(_get(ev, "anls_tau", 0.5)),
        date_day_first=bool(_get(ev, "date_day_first", False)),
        field_types=dict(_get(ev, "field_types", {})),
        host=str(_get(service, "host", "127.0.0.1")),
        port=int(_get(service, "port", 8787)),
        service_token=service.get("token"),
    )
    return cfg.validate()
