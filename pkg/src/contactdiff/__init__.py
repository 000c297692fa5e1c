"""Contact localization on a serial arm with a conditional point-set diffusion model."""

from .robot import RobotModel, load_preset, load_robot, resolve_robot

__all__ = ["RobotModel", "load_preset", "load_robot", "resolve_robot"]
__version__ = "0.1.0"
