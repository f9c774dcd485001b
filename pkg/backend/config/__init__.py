# backend/config/__init__.py
from .settings import settings, load_run_config, load_sim_config, load_schema

__all__ = ["settings", "load_run_config", "load_sim_config", "load_schema"]
