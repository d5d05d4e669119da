from .base import VisionInputs, abc_VisionBranch

__all__ = ["VisionInputs", "abc_VisionBranch"]
