"""Join-Idle-Queue load balancing: simulator, fluid model, equilibrium solver and experiment harness."""

from .model import AssignmentPolicy, ConfigError, IQueueDiscipline, SystemConfig, lu_formula, validate_config

__all__ = ["AssignmentPolicy", "ConfigError", "IQueueDiscipline", "SystemConfig", "lu_formula", "validate_config"]
