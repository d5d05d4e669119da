"""
factory module
"""
import importlib
from typing import Optional

from .config import ModelConfig, UNetConfig
from .errors import ConfigError


def load_class(class_type):
    """
    Loads a class dynamically from a given module path and class name.

    :param class_type: The full path to the class in the format 'module_path.class_name'
    :type class_type: str
    :return: The loaded class
    :rtype: type
    """
    module_path, class_name = class_type.rsplit(".", 1)
    module = importlib.import_module(module_path)
    return getattr(module, class_name)


class VisionBranchFactory:
    """
    Factory class for creating U-Net vision branches.
    """
    mode_to_class = {
        "none": "egoav.vision.none.NoVision",
        "frames": "egoav.vision.frames.FramesVision",
        "pretrained": "egoav.vision.pretrained.PretrainedVision",
    }

    @classmethod
    def create(
        cls,
        mode: str,
        config: Optional[UNetConfig] = None,
        model_config: Optional[ModelConfig] = None,
        num_frames: int = 5,
    ):
        """
        Creates a vision branch for the given mode.

        :param mode: One of ``none``, ``frames``, ``pretrained``
        :type mode: str
        :param config: The U-Net configuration
        :type config: UNetConfig
        :param model_config: Encoder architecture, required by ``pretrained``
        :type model_config: ModelConfig
        :param num_frames: Frames per clip, used by ``frames``
        :type num_frames: int
        :return: An instance of the branch
        :rtype: abc_VisionBranch
        :raises ConfigError: If the mode is unsupported
        """
        class_type = cls.mode_to_class.get(mode)
        if class_type:
            branch = load_class(class_type)
            return branch(config or UNetConfig(), model_config=model_config, num_frames=num_frames)
        else:
            raise ConfigError(f"Unsupported vision mode: {mode}")
