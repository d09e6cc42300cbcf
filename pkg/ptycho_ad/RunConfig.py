"""
Run configuration file: a YAML document with a `recipe` section (SimulationRecipe,
used by `simulate`) and/or a `reconstruction` section (ReconstructionConfig, used by
`reconstruct`). Unknown keys at any level are rejected.
"""

import logging
import os
from typing import Any, Dict, Optional

import yaml

from .ImageExport import writeYaml
from .Reconstructor import ReconstructionConfig
from .Simulator import SimulationRecipe
from .errors import ConfigError

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = 'resolved-config.yaml'


class RunConfig():
    KEYS = {'recipe', 'reconstruction'}

    def __init__(self, recipe: Optional[SimulationRecipe] = None, reconstruction: Optional[ReconstructionConfig] = None):
        self.recipe = recipe if recipe is not None else SimulationRecipe()
        self.reconstruction = reconstruction if reconstruction is not None else ReconstructionConfig()

    @classmethod
    def fromConfigDict(cls, configDict: Optional[Dict[str, Any]]) -> "RunConfig":
        if configDict is None:
            configDict = {}
        if not isinstance(configDict, dict):
            raise ConfigError("Run configuration must be a mapping")
        unknown = set(configDict) - cls.KEYS
        if unknown:
            raise ConfigError(f"Unknown top-level key(s): {sorted(unknown)}")

        return cls(
            SimulationRecipe.fromConfigDict(configDict.get('recipe')),
            ReconstructionConfig.fromConfigDict(configDict.get('reconstruction')),
        )

    @classmethod
    def fromConfigFile(cls, configFilePath: Optional[str]) -> "RunConfig":
        """
        None gives the all-defaults configuration.
        """
        if configFilePath is None:
            return cls()
        with open(configFilePath, 'r') as F_CONFIG:
            try:
                configDict = yaml.safe_load(F_CONFIG)
            except yaml.YAMLError as e:
                raise ConfigError(f"{configFilePath}: invalid YAML ({e})")
        logger.debug(f"Loaded configuration {configFilePath}")
        return cls.fromConfigDict(configDict)

    def getJson(self):
        return {
            'recipe': self.recipe.getJson(),
            'reconstruction': self.reconstruction.getJson(),
        }


def writeResolvedConfig(outDir: str, sections: Dict[str, Any]) -> str:
    path = os.path.join(outDir, RESOLVED_CONFIG_NAME)
    writeYaml(path, sections)
    return path
