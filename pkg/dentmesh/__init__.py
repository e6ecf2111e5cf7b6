import importlib
import importlib.util
import json
import logging
import logging.config
import os
from pathlib import Path

PROJECT_ROOT = Path(os.path.realpath(__file__)).parents[1]
ASSETS_DIR = PROJECT_ROOT / "assets"

NUM_CLASSES = 17  # 0 = gingiva/background, 1..16 = T1..T16


def setup_logging(path=os.path.join(ASSETS_DIR, 'logging.json'),
                  default_level=logging.INFO, env_key='LOG_CFG', to_file=True, log_dir=ASSETS_DIR):
    """
    Setup logging configuration
    """
    value = os.getenv(env_key, None)
    if value:
        path = value
    if os.path.exists(path):
        with open(path, 'rt') as f:
            config = json.load(f)
            if not to_file:
                config['root']['handlers'] = ['console']  # keeps only console
                config['handlers'] = {'console': config['handlers']['console']}
            else:
                config['handlers']['info_file_handler']['filename'] = os.path.join(log_dir, 'info.log')
                config['handlers']['error_file_handler']['filename'] = os.path.join(log_dir, 'error.log')
            config['root']['level'] = logging.getLevelName(default_level)
        logging.config.dictConfig(config)
    else:
        logging.basicConfig(level=default_level)


def load_config(name=None):
    """
    Loads the UPPERCASE settings of a config module, 'config' at the project root by default.
    DENTMESH_CONFIG names another module (e.g. tests.config).
    """
    name = name or os.getenv('DENTMESH_CONFIG', 'config')
    try:
        module = importlib.import_module(name)
    except ImportError:
        path = PROJECT_ROOT / (name.replace('.', os.sep) + '.py')
        spec = importlib.util.spec_from_file_location(name, path)
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
    return {key: getattr(module, key) for key in dir(module) if key.isupper()}


CONFIG = load_config()
