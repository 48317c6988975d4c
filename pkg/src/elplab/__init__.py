from elplab.config import ExperimentConfig, resolve_config
from elplab.errors import ElpError
from elplab.utils import version

__version__ = version()

__all__ = ["ExperimentConfig", "ElpError", "resolve_config", "__version__"]
